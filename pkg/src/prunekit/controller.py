"""Augmented-Lagrangian sparsity controller.

The constraint is expressed in normalized sparsity units (pruned fraction of
the full encoder parameter count) rather than raw counts, which keeps the
multiplier learning rate meaningful across model sizes. Multipliers are
unconstrained reals updated by gradient ascent while the gate parameters
descend, driving expected sparsity to the warmed-up target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError


@dataclass
class SparsityController:
    target_sparsity: float
    warmup_steps: int
    total_prunable: int
    fixed_params: int
    lambda1: Tensor = field(default=None)
    lambda2: Tensor = field(default=None)

    def __post_init__(self):
        max_sparsity = self.total_prunable / (self.total_prunable + self.fixed_params)
        if not 0.0 <= self.target_sparsity < max_sparsity:
            raise ConfigError(
                f"target sparsity {self.target_sparsity} infeasible; "
                f"achievable range is [0, {max_sparsity:.4f})"
            )
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.lambda1 is None:
            self.lambda1 = Tensor(0.0, requires_grad=True)
        if self.lambda2 is None:
            self.lambda2 = Tensor(0.0, requires_grad=True)

    @property
    def total_params(self) -> int:
        return self.total_prunable + self.fixed_params


def current_target(ctrl: SparsityController, step: int) -> float:
    """Linear warmup from 0 to the target, constant afterward."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    return min(1.0, step / ctrl.warmup_steps) * ctrl.target_sparsity


def expected_sparsity(ctrl: SparsityController, expected_remaining):
    """Pruned fraction of the full parameter count; differentiable for tensors."""
    scale = 1.0 / ctrl.total_params
    if isinstance(expected_remaining, Tensor):
        return 1.0 - expected_remaining * scale
    return 1.0 - float(expected_remaining) * scale


def penalty(ctrl: SparsityController, s_hat, s_target: float) -> Tensor:
    """lambda1 * residual + lambda2 * residual^2 with residual = s_hat - target.

    Differentiable with respect to the gate parameters (through ``s_hat``)
    and the multipliers; exactly zero at zero residual.
    """
    if not isinstance(s_hat, Tensor):
        s_hat = Tensor(float(s_hat))
    residual = s_hat - float(s_target)
    return ctrl.lambda1 * residual + ctrl.lambda2 * (residual * residual)


def update_multipliers(ctrl: SparsityController, grad_lambda1: float,
                       grad_lambda2: float, lr: float) -> SparsityController:
    """Plain gradient ascent on the multipliers."""
    if lr <= 0:
        raise ConfigError("lr must be positive")
    ctrl.lambda1 = Tensor(float(ctrl.lambda1.data) + lr * float(grad_lambda1),
                          requires_grad=True)
    ctrl.lambda2 = Tensor(float(ctrl.lambda2.data) + lr * float(grad_lambda2),
                          requires_grad=True)
    return ctrl


def state_dict(ctrl: SparsityController) -> dict:
    return {
        "target_sparsity": ctrl.target_sparsity,
        "warmup_steps": ctrl.warmup_steps,
        "total_prunable": ctrl.total_prunable,
        "fixed_params": ctrl.fixed_params,
        "lambda1": float(ctrl.lambda1.data),
        "lambda2": float(ctrl.lambda2.data),
    }


def from_state(state: dict) -> SparsityController:
    ctrl = SparsityController(
        target_sparsity=state["target_sparsity"],
        warmup_steps=state["warmup_steps"],
        total_prunable=state["total_prunable"],
        fixed_params=state["fixed_params"],
    )
    ctrl.lambda1 = Tensor(np.asarray(state["lambda1"]), requires_grad=True)
    ctrl.lambda2 = Tensor(np.asarray(state["lambda2"]), requires_grad=True)
    return ctrl
