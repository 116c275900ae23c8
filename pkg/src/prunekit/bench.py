"""Inference timing, speedup ratios, similarity curves, and structure tables.

Timing uses a monotonic clock, discards warmup repetitions, and reports the
median over repetitions per component (conv frontend, transformer stack,
weighted-sum head) next to an end-to-end measurement, so unaccounted
hotspots show up as a mismatch. Reports serialize to both CSV and JSON.
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gates as G
from . import model as M
from .autodiff import Tensor, no_grad
from .compactor import PruneMask
from .errors import ContractError
from .rng import substream


def _median(xs):
    return float(np.median(xs))


@dataclass
class TimingReport:
    conv_seconds: float
    transformer_seconds: float
    head_seconds: float
    total_seconds: float  # end-to-end forward, measured separately
    batch_size: int
    reps: int
    warmup_reps: int
    input_length: int
    precision: str
    seed: int
    hardware: str
    raw: dict = field(default_factory=dict)  # component -> list of per-rep seconds

    @property
    def components_sum(self) -> float:
        return self.conv_seconds + self.transformer_seconds + self.head_seconds

    def to_dict(self) -> dict:
        return {
            "conv_seconds": self.conv_seconds,
            "transformer_seconds": self.transformer_seconds,
            "head_seconds": self.head_seconds,
            "total_seconds": self.total_seconds,
            "batch_size": self.batch_size,
            "reps": self.reps,
            "warmup_reps": self.warmup_reps,
            "input_length": self.input_length,
            "precision": self.precision,
            "seed": self.seed,
            "hardware": self.hardware,
            "raw": self.raw,
        }


def time_forward(enc: M.Encoder, batch_size: int = 4, reps: int = 5,
                 warmup_reps: int = 2, input_length: int = 4000,
                 seed: int = 0) -> TimingReport:
    """Median per-component wall-clock over ``reps`` repetitions.

    The same deterministic batch of random signals is replayed every
    repetition; warmup repetitions are discarded.
    """
    if reps < 3:
        raise ContractError("reps must be >= 3")
    if warmup_reps < 1:
        raise ContractError("warmup_reps must be >= 1")
    dtype = enc.proj_w.dtype
    rng = substream(seed, "bench")
    signals = [Tensor(rng.normal(size=(1, input_length)).astype(dtype))
               for _ in range(batch_size)]

    raw = {"conv": [], "transformer": [], "head": [], "total": []}
    with no_grad():
        for rep in range(warmup_reps + reps):
            t_conv = t_stack = t_head = 0.0
            for sig in signals:
                t0 = time.perf_counter()
                h0 = M.frontend(enc, sig)
                t1 = time.perf_counter()
                hiddens = M.transformer_stack(enc, h0)
                t2 = time.perf_counter()
                M.combine(enc, hiddens)
                t3 = time.perf_counter()
                t_conv += t1 - t0
                t_stack += t2 - t1
                t_head += t3 - t2
            t4 = time.perf_counter()
            for sig in signals:
                M.forward(enc, sig)
            t5 = time.perf_counter()
            if rep >= warmup_reps:
                raw["conv"].append(t_conv)
                raw["transformer"].append(t_stack)
                raw["head"].append(t_head)
                raw["total"].append(t5 - t4)

    return TimingReport(
        conv_seconds=_median(raw["conv"]),
        transformer_seconds=_median(raw["transformer"]),
        head_seconds=_median(raw["head"]),
        total_seconds=_median(raw["total"]),
        batch_size=batch_size,
        reps=reps,
        warmup_reps=warmup_reps,
        input_length=input_length,
        precision=str(np.dtype(dtype)),
        seed=seed,
        hardware=platform.platform(),
        raw=raw,
    )


def speedup(base: TimingReport, pruned: TimingReport) -> float:
    """End-to-end wall-clock ratio; measurement configs must match."""
    if (base.input_length, base.batch_size) != (pruned.input_length, pruned.batch_size):
        raise ContractError("speedup needs identical input length and batch size")
    return base.total_seconds / pruned.total_seconds


@dataclass
class SimilarityReport:
    rows: list  # dicts: label, sparsity, cosine_similarity
    layer_set: tuple
    n_utterances: int

    def to_dict(self) -> dict:
        return {"rows": self.rows, "layer_set": list(self.layer_set),
                "n_utterances": self.n_utterances}


def _mean_cosine(teacher_hiddens, student_hiddens, layer_set) -> float:
    vals = []
    for i in layer_set:
        h = teacher_hiddens[i]
        s = student_hiddens[i]
        num = (h * s).sum(axis=1)
        den = np.maximum(np.linalg.norm(h, axis=1) * np.linalg.norm(s, axis=1), 1e-12)
        vals.append(num / den)
    return float(np.mean(np.concatenate(vals)))


def similarity_report(teacher: M.Encoder, students, eval_samples,
                      layer_set=(0, 2, 4, 6)) -> SimilarityReport:
    """Raw-hidden cosine similarity between teacher and each student,
    averaged over matched layers, frames, and utterances. No distillation
    projections: this measures model closeness, not matchability."""
    rows = []
    with no_grad():
        teacher_cache = []
        for s in eval_samples:
            hiddens, _ = M.forward(teacher, s.signal)
            teacher_cache.append({i: hiddens[i].data for i in layer_set})
        for label, sparsity, student in students:
            per_utt = []
            for cache, sample in zip(teacher_cache, eval_samples):
                hiddens, _ = M.forward(student, sample.signal)
                per_utt.append(_mean_cosine(cache, {i: hiddens[i].data for i in layer_set},
                                            layer_set))
            rows.append({"label": label, "sparsity": float(sparsity),
                         "cosine_similarity": float(np.mean(per_utt))})
    return SimilarityReport(rows, tuple(layer_set), len(eval_samples))


@dataclass
class StructureReport:
    rows: list  # dicts: kind, layer, kept, original

    def to_dict(self) -> dict:
        return {"rows": self.rows}


def structure_report(mask: PruneMask) -> StructureReport:
    """Remaining unit counts per layer and kind, next to the original sizes."""
    rows = []
    for (kind, layer) in sorted(mask.entries):
        rows.append({
            "kind": kind,
            "layer": layer,
            "kept": len(mask.kept(kind, layer)),
            "original": mask.n_original(kind, layer),
        })
    return StructureReport(rows)


# ---------------------------------------------------------------------------
# writers


def write_json(report, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def write_timing_csv(report: TimingReport, path) -> None:
    lines = ["component,median_seconds"]
    lines.append(f"conv,{report.conv_seconds!r}")
    lines.append(f"transformer,{report.transformer_seconds!r}")
    lines.append(f"head,{report.head_seconds!r}")
    lines.append(f"total,{report.total_seconds!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_similarity_csv(report: SimilarityReport, path) -> None:
    lines = ["label,sparsity,cosine_similarity"]
    for r in report.rows:
        lines.append(f"{r['label']},{r['sparsity']!r},{r['cosine_similarity']!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_structure_csv(report: StructureReport, path) -> None:
    lines = ["kind,layer,kept,original"]
    for r in report.rows:
        lines.append(f"{r['kind']},{r['layer']},{r['kept']},{r['original']}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def speedup_table(rows) -> str:
    """CSV speedup table from (label, sparsity, base_seconds, pruned_seconds)."""
    lines = ["label,sparsity,base_seconds,pruned_seconds,speedup"]
    for label, sparsity, base_s, pruned_s in rows:
        lines.append(f"{label},{sparsity!r},{base_s!r},{pruned_s!r},{base_s / pruned_s:.1f}")
    return "\n".join(lines) + "\n"
