"""AdamW with named parameter groups.

Groups carry their own learning rate and decoupled weight decay; a group
marked ``maximize`` ascends (gradients negated inside the step), which is
how the Lagrange multipliers ride the same optimizer as everything else.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError


class AdamW:
    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        """``groups``: list of dicts with keys ``params`` (name -> Tensor),
        ``lr``, and optional ``weight_decay`` (default 0.01), ``maximize``."""
        self.groups = []
        seen = set()
        for g in groups:
            if g["lr"] <= 0:
                raise ConfigError("learning rate must be positive")
            params = dict(g["params"])
            for name in params:
                if name in seen:
                    raise ConfigError(f"parameter {name!r} assigned to two groups")
                seen.add(name)
            self.groups.append({
                "params": params,
                "lr": float(g["lr"]),
                "weight_decay": float(g.get("weight_decay", 0.01)),
                "maximize": bool(g.get("maximize", False)),
            })
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.moments = {}  # name -> (m, v)

    def parameters(self):
        for g in self.groups:
            yield from g["params"].items()

    def zero_grad(self):
        for _, p in self.parameters():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.parameters():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        return float(np.sqrt(total))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for _, p in self.parameters():
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for g in self.groups:
            lr, wd = g["lr"], g["weight_decay"]
            sign = -1.0 if g["maximize"] else 1.0
            for name, p in g["params"].items():
                if p.grad is None:
                    continue
                grad = sign * p.grad
                m, v = self.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
                m = self.beta1 * m + (1.0 - self.beta1) * grad
                v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
                self.moments[name] = (m, v)
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p.data = p.data - lr * (update + wd * p.data)

    def state_tensors(self) -> dict:
        out = {}
        for name, (m, v) in self.moments.items():
            out[f"optim/{name}/m"] = m
            out[f"optim/{name}/v"] = v
        return out

    def load_state_tensors(self, tensors: dict, step_count: int):
        self.step_count = int(step_count)
        self.moments = {}
        for key, arr in tensors.items():
            if not key.startswith("optim/"):
                continue
            name, kind = key[len("optim/"):].rsplit("/", 1)
            m, v = self.moments.get(name, (None, None))
            if kind == "m":
                m = arr
            elif kind == "v":
                v = arr
            self.moments[name] = (m, v)
        for name, (m, v) in self.moments.items():
            if m is None or v is None:
                raise ConfigError(f"optimizer state for {name!r} is incomplete")
