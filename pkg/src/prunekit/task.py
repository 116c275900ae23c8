"""Synthetic multi-speaker frame labeling with powerset classes.

Each synthetic speaker emits a fixed sinusoid-plus-harmonic signature;
utterances mix randomly placed activity segments (never more than
``max_overlap`` simultaneously active) over background noise. Frame labels
encode the set of active speakers as a single powerset class at the
encoder's frame rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .model import DEFAULT_CONV_LAYERS, frames_out, min_input_length, total_stride
from .rng import substream

NOISE_STD = 0.1  # fixed background level under unit-amplitude signatures


@dataclass(frozen=True)
class PowersetSpec:
    max_speakers: int = 4
    max_overlap: int = 2

    def __post_init__(self):
        if self.max_overlap > self.max_speakers:
            raise ConfigError(
                f"max_overlap {self.max_overlap} exceeds max_speakers {self.max_speakers}"
            )

    @property
    def classes(self):
        return powerset_classes(self)

    @property
    def n_classes(self):
        return len(self.classes)


def powerset_classes(spec: PowersetSpec) -> list[tuple[int, ...]]:
    """All speaker subsets up to the overlap cap, ordered by size then lexicographically."""
    out = []
    for size in range(spec.max_overlap + 1):
        out.extend(combinations(range(spec.max_speakers), size))
    return out


@dataclass
class SyntheticSample:
    signal: Tensor  # [1, samples]
    labels: np.ndarray  # [frames], class ids
    activity: np.ndarray = field(repr=False, default=None)  # [speakers, samples] bool


def _signature(speaker: int, n: int) -> np.ndarray:
    freq = 0.05 + 0.04 * speaker
    phase = 2.0 * np.pi * speaker / 7.0
    t = np.arange(n)
    return np.sin(2 * np.pi * freq * t + phase) + 0.3 * np.sin(4 * np.pi * freq * t + phase)


def _activity_matrix(rng, spec: PowersetSpec, n: int) -> np.ndarray:
    """Random on/off segments per speaker, admitted in time order; a segment
    is skipped whenever it would push simultaneous activity above the
    overlap cap, so no speaker outranks another."""
    act = np.zeros((spec.max_speakers, n), dtype=bool)
    count = np.zeros(n, dtype=np.int64)
    events = []
    for k in range(spec.max_speakers):
        pos = int(rng.integers(0, 120))
        while pos < n:
            dur = int(rng.integers(60, 160))
            events.append((pos, k, dur))
            pos += dur + int(rng.integers(80, 240))
    for pos, k, dur in sorted(events):
        seg = slice(pos, min(pos + dur, n))
        if np.all(count[seg] < spec.max_overlap):
            act[k, seg] = True
            count[seg] += 1
    return act


def _frame_labels(act: np.ndarray, spec: PowersetSpec, stride: int, n_frames: int,
                  class_index: dict) -> np.ndarray:
    labels = np.zeros(n_frames, dtype=np.int64)
    for t in range(n_frames):
        window = act[:, t * stride : (t + 1) * stride]
        frac = window.mean(axis=1)
        active = [k for k in range(spec.max_speakers) if frac[k] > 0.5]
        if len(active) > spec.max_overlap:
            # rare window-level pile-up; keep the dominant speakers,
            # ties resolved toward the smaller index
            active = sorted(active, key=lambda k: (-frac[k], k))[: spec.max_overlap]
            active = sorted(active)
        labels[t] = class_index[tuple(active)]
    return labels


def generate_dataset(seed: int, n_utterances: int, samples_per_utterance: int,
                     spec: PowersetSpec = PowersetSpec(),
                     conv_layers=DEFAULT_CONV_LAYERS) -> list[SyntheticSample]:
    """Deterministic synthetic corpus; label frame rate follows the conv chain."""
    if samples_per_utterance < min_input_length(conv_layers):
        raise ConfigError(
            f"samples_per_utterance {samples_per_utterance} below frontend minimum "
            f"{min_input_length(conv_layers)}"
        )
    rng = substream(seed, "data")
    stride = total_stride(conv_layers)
    n_frames = frames_out(conv_layers, samples_per_utterance)
    class_index = {c: i for i, c in enumerate(powerset_classes(spec))}
    sigs = np.stack([_signature(k, samples_per_utterance) for k in range(spec.max_speakers)])

    samples = []
    for _ in range(n_utterances):
        act = _activity_matrix(rng, spec, samples_per_utterance)
        signal = (act * sigs).sum(axis=0) + rng.normal(0.0, NOISE_STD, samples_per_utterance)
        labels = _frame_labels(act, spec, stride, n_frames, class_index)
        samples.append(SyntheticSample(Tensor(signal[None, :]), labels, act))
    return samples


def task_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over frames against powerset class ids."""
    t, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (t,):
        raise ContractError(f"labels shape {labels.shape} != ({t},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError("label out of range")
    onehot = np.zeros((t, c))
    onehot[np.arange(t), labels] = 1.0
    ls = ad.log_softmax(logits, axis=-1)
    return ad.tsum(ls * Tensor(onehot)) * (-1.0 / t)


def frame_error_rate(logits, labels) -> float:
    """Misclassified fraction under argmax decoding."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    pred = data.argmax(axis=-1)
    return float((pred != np.asarray(labels)).mean())
