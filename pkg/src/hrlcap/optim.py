"""Adadelta, with per-parameter state keyed by parameter name."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)
    sq_update: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0 or self.eps <= 0.0:
            raise ContractError(f"bad Adadelta constants rho={self.rho} eps={self.eps}")

    def to_dict(self) -> dict:
        return {"rho": self.rho, "eps": self.eps, "lr": self.lr,
                "sq_grad": self.sq_grad, "sq_update": self.sq_update}

    @classmethod
    def from_dict(cls, d: dict) -> "AdadeltaState":
        return cls(d["rho"], d["eps"], d["lr"],
                   {k: np.asarray(v) for k, v in d["sq_grad"].items()},
                   {k: np.asarray(v) for k, v in d["sq_update"].items()})


def adadelta_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                  state: AdadeltaState) -> None:
    """Update ``params`` in place from ``grads`` (names absent from ``grads`` are untouched).

    The update is ``-lr * sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g``; the
    squared-update accumulator tracks the unscaled step.
    """
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ContractError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        sg = state.sq_grad.get(name)
        su = state.sq_update.get(name)
        if sg is None:
            sg = np.zeros_like(p.data)
            su = np.zeros_like(p.data)
        sg = rho * sg + (1.0 - rho) * g * g
        delta = np.sqrt(su + eps) / np.sqrt(sg + eps) * g
        su = rho * su + (1.0 - rho) * delta * delta
        state.sq_grad[name] = sg
        state.sq_update[name] = su
        p.data = p.data - state.lr * delta
