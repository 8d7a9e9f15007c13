"""Parameter containers, initialisation, dropout and gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

INIT_BOUND = 0.1


def uniform_init(shape, bound: float = INIT_BOUND, seed=None) -> Tensor:
    """Parameter tensor with entries drawn from U[-bound, bound]."""
    if bound <= 0:
        raise ContractError(f"init bound must be positive, got {bound}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, Tensor(keep))


def clip_gradients(grads: dict, bound: float) -> dict:
    """Clamp every gradient entry into [-bound, bound]."""
    if bound <= 0:
        raise ContractError(f"clip bound must be positive, got {bound}")
    return {k: np.clip(g, -bound, bound) for k, g in grads.items()}


class ParamStore(dict):
    """Ordered ``name -> Tensor`` map that also hands out fresh parameters.

    Creation order is the draw order from the store's rng, so two stores built
    with the same seed and the same sequence of ``new`` calls are identical.
    """

    def __init__(self, seed=0, bound: float = INIT_BOUND):
        super().__init__()
        self.rng = np.random.default_rng(seed)
        self.bound = bound

    def new(self, name: str, shape) -> Tensor:
        if name in self:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = uniform_init(shape, self.bound, self.rng)
        t.name = name
        self[name] = t
        return t

    def group(self, *prefixes: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.items() if k.startswith(prefixes)}

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        names = self.keys() if names is None else names
        return {k: self[k].data.copy() for k in names}

    def load(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(values) != set(self):
            missing = sorted(set(self) - set(values))
            extra = sorted(set(values) - set(self))
            raise ContractError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for k, v in values.items():
            if k not in self:
                continue
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self[k].shape:
                raise ContractError(f"{k}: shape {v.shape} != {self[k].shape}")
            self[k].data = v.copy()

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.values())


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, store: ParamStore, name: str, n_in: int, n_out: int) -> "Linear":
        return cls(store.new(f"{name}.weight", (n_in, n_out)), store.new(f"{name}.bias", (n_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)
