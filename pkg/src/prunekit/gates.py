"""Hard Concrete gates over prunable units.

Each prunable unit (conv output channel, attention head, FFN intermediate
dimension) carries one trainable ``log_alpha``. Sampling stretches a binary
concrete variable over [gamma, zeta] and clips to [0, 1], which places point
mass at exactly 0 and 1; the probability that a gate is open has a closed
form in ``log_alpha`` alone, so the expected number of surviving parameters
is differentiable without sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

CONV_CHANNEL = "conv_channel"
ATTENTION_HEAD = "attention_head"
FFN_DIM = "ffn_dim"
GATE_KINDS = (CONV_CHANNEL, ATTENTION_HEAD, FFN_DIM)

STOCHASTIC = "stochastic"
DETERMINISTIC = "deterministic"

# gates start near fully open: p_open(2.0) ~ 0.973
INIT_LOG_ALPHA = 2.0


@dataclass(frozen=True)
class GateConfig:
    beta: float = 2.0 / 3.0
    gamma: float = -0.1
    zeta: float = 1.1

    def __post_init__(self):
        if not (self.gamma < 0.0 < 1.0 < self.zeta):
            raise ConfigError(f"need gamma < 0 < 1 < zeta, got {self.gamma}, {self.zeta}")
        if self.beta <= 0.0:
            raise ConfigError(f"beta must be positive, got {self.beta}")


@dataclass
class GateGroup:
    """One gate per prunable unit of a single kind within one layer."""

    kind: str
    layer_index: int
    log_alpha: Tensor
    params_per_unit: int
    num_units: int = field(default=0)

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ConfigError(f"unknown gate kind {self.kind!r}")
        if self.num_units == 0:
            self.num_units = self.log_alpha.size
        if self.params_per_unit <= 0 or self.num_units <= 0:
            raise ConfigError("params_per_unit and num_units must be positive")
        if self.log_alpha.shape != (self.num_units,):
            raise ConfigError(
                f"log_alpha shape {self.log_alpha.shape} != ({self.num_units},)"
            )
        if not np.all(np.isfinite(self.log_alpha.data)):
            raise ConfigError("log_alpha must be finite")

    @property
    def name(self) -> str:
        return f"gates/{self.kind}/{self.layer_index}/log_alpha"


def make_group(kind: str, layer_index: int, num_units: int, params_per_unit: int,
               init_log_alpha: float = INIT_LOG_ALPHA) -> GateGroup:
    la = Tensor(np.full(num_units, init_log_alpha, dtype=np.float64), requires_grad=True)
    return GateGroup(kind, layer_index, la, params_per_unit, num_units)


@dataclass
class GateSample:
    z: Tensor
    mode: str


def sample_gates(group: GateGroup, cfg: GateConfig, u: np.ndarray) -> GateSample:
    """Reparametrized draw; gradient reaches log_alpha through the open region.

    ``u`` must be strictly inside (0, 1), one draw per unit.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (group.num_units,):
        raise ContractError(f"noise shape {u.shape} != ({group.num_units},)")
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ContractError("uniform noise must be strictly inside (0, 1)")
    logistic = Tensor(np.log(u) - np.log1p(-u))
    s = ad.sigmoid((group.log_alpha + logistic) * (1.0 / cfg.beta))
    stretched = s * (cfg.zeta - cfg.gamma) + cfg.gamma
    return GateSample(ad.clamp(stretched, 0.0, 1.0), STOCHASTIC)


def deterministic_gates(group: GateGroup, cfg: GateConfig) -> GateSample:
    """Most-likely gate values used for the final pruned model."""
    s = ad.sigmoid(group.log_alpha)
    stretched = s * (cfg.zeta - cfg.gamma) + cfg.gamma
    return GateSample(ad.clamp(stretched, 0.0, 1.0), DETERMINISTIC)


def prune_threshold(cfg: GateConfig) -> float:
    """log_alpha below which the deterministic gate is exactly zero."""
    p = -cfg.gamma / (cfg.zeta - cfg.gamma)
    return math.log(p / (1.0 - p))


def prob_open(log_alpha, cfg: GateConfig):
    """P(z != 0) as a function of log_alpha.

    Accepts a float, an ndarray, or a Tensor; the Tensor form is
    differentiable and feeds the expected-parameter accounting.
    """
    shift = cfg.beta * math.log(-cfg.gamma / cfg.zeta)
    if isinstance(log_alpha, Tensor):
        return ad.sigmoid(log_alpha - shift)
    return expit(np.asarray(log_alpha, dtype=np.float64) - shift)


def keep_probability(log_alpha, cfg: GateConfig, temperature: float = 0.75):
    """Soft indicator of surviving the deterministic prune rule.

    Sigmoid centered on the log_alpha below which the deterministic gate is
    exactly zero. Unlike ``prob_open`` (which describes the sampling
    distribution), this surrogate converges to the mask-based unit count as
    gates polarize, so a controller driving it lands the deterministic
    sparsity on target.
    """
    t0 = prune_threshold(cfg)
    if isinstance(log_alpha, Tensor):
        return ad.sigmoid((log_alpha - t0) * (1.0 / temperature))
    return expit((np.asarray(log_alpha, dtype=np.float64) - t0) / temperature)


def expected_remaining_params(groups, cfg: GateConfig, fixed_params: int) -> Tensor:
    """Expected surviving parameter count, linear in per-unit open probabilities.

    Exact whenever each weight is controlled by a single gate; conv-to-conv
    kernels (two gates per weight) get their exact bilinear treatment in the
    encoder-level accounting instead.
    """
    total = Tensor(float(fixed_params))
    for g in groups:
        total = total + ad.tsum(prob_open(g.log_alpha, cfg)) * float(g.params_per_unit)
    return total
