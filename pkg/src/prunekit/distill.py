"""Layer-matched teacher-student distillation loss.

For each matched layer the student hidden states pass through a trainable
square projection and are compared to the teacher's by mean absolute
difference minus cosine similarity, summed over frames and matched layers.
At a perfect match every (layer, frame) term is -1, so the minimum is
-len(layer_set) * frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

# effective norm floor 1e-12 (squared inside the sqrt), so a zeroed-out
# hidden vector yields cosine 0 with finite gradients
_NORM_SQ_FLOOR = 1e-24

DEFAULT_LAYER_SET = (0, 2, 4, 6)


@dataclass
class DistillConfig:
    layer_set: tuple
    projections: dict  # layer index -> Tensor [d, d]

    @classmethod
    def build(cls, d_model: int, n_layers: int, layer_set=DEFAULT_LAYER_SET):
        """Identity-initialized projections: teacher and student start equal."""
        layer_set = tuple(layer_set)
        if any(i < 0 or i > n_layers for i in layer_set):
            raise ConfigError(f"layer_set {layer_set} outside 0..{n_layers}")
        proj = {i: Tensor(np.eye(d_model), requires_grad=True) for i in layer_set}
        return cls(layer_set, proj)

    def named_parameters(self) -> dict:
        return {f"distill/W_{i}": w for i, w in self.projections.items()}


def _as_constant(h) -> Tensor:
    if isinstance(h, Tensor):
        return h.detach() if h.requires_grad else h
    return Tensor(np.asarray(h))


def _row_norms(x: Tensor) -> Tensor:
    return ad.sqrt(ad.maximum(ad.tsum(x * x, axis=1), _NORM_SQ_FLOOR))


def distill_loss(teacher, student, cfg: DistillConfig) -> Tensor:
    """Sum over matched layers and frames of L1(h, hat_h W) - cos(h, hat_h W).

    ``teacher`` entries are treated as constants; no gradient reaches them.
    """
    total = None
    for i in cfg.layer_set:
        h = _as_constant(teacher[i])
        s = student[i]
        if h.shape != s.shape:
            raise ContractError(f"layer {i}: teacher {h.shape} vs student {s.shape}")
        projected = s @ cfg.projections[i]
        diff = projected - h
        l1 = ad.tsum(ad.tmean(ad.tabs(diff), axis=1))
        cos = ad.tsum(ad.tsum(h * projected, axis=1) / (_row_norms(h) * _row_norms(projected)))
        term = l1 - cos
        total = term if total is None else total + term
    return total
