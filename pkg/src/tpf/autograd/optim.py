"""AdamW with decoupled weight decay and per-group learning rates."""

from __future__ import annotations

from typing import Iterable, List, Sequence

import numpy as np

from .nn import Parameter


class AdamW:
    """Loshchilov & Hutter update rule.

    ``groups`` is a sequence of ``{"params": [...], "lr": float}`` dicts; a bare
    iterable of parameters is accepted as a single group using ``lr``.
    """

    def __init__(self, groups, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        if not isinstance(groups, (list, tuple)) or not groups or not isinstance(groups[0], dict):
            groups = [{"params": list(groups), "lr": lr}]
        self.groups: List[dict] = []
        seen = set()
        for grp in groups:
            params = [p for p in grp["params"] if id(p) not in seen]
            seen.update(id(p) for p in params)
            self.groups.append({"params": params, "lr": float(grp.get("lr", lr)),
                                "weight_decay": float(grp.get("weight_decay", weight_decay))})
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def params(self) -> List[Parameter]:
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for grp in self.groups:
            lr, wd = grp["lr"], grp["weight_decay"]
            if lr == 0.0:
                continue
            for p in grp["params"]:
                if p.grad is None:
                    continue
                key = id(p)
                if key not in self.m:
                    self.m[key] = np.zeros_like(p.data)
                    self.v[key] = np.zeros_like(p.data)
                m, v = self.m[key], self.v[key]
                m *= self.b1
                m += (1.0 - self.b1) * p.grad
                v *= self.b2
                v += (1.0 - self.b2) * p.grad * p.grad
                p.data = p.data * (1.0 - lr * wd) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
    if total > max_norm > 0:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return total
