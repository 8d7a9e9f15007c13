"""Additive alignment attention over encoder states.

Score for frame i under query q: ``w . tanh(W_a h_i + U_a q + b_a)``;
weights are the softmax of the scores over real frames and the context is the
weighted sum of states.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, InputError
from .nn import ParamStore

# Added to scores of padded frames; exp() of it underflows to exactly 0.
_MASKED = -1e30


@dataclass
class AttentionParams:
    w: Tensor           # (k,)
    W_a: Tensor         # (d_state, k)
    U_a: Tensor         # (d_query, k)
    b_a: Tensor         # (k,)

    @classmethod
    def create(cls, store: ParamStore, name: str, state_dim: int, query_dim: int,
               inner_dim: int | None = None) -> "AttentionParams":
        k = inner_dim or state_dim
        return cls(store.new(f"{name}.w", (k,)), store.new(f"{name}.W_a", (state_dim, k)),
                   store.new(f"{name}.U_a", (query_dim, k)), store.new(f"{name}.b_a", (k,)))

    @property
    def inner_dim(self) -> int:
        return self.w.shape[0]


def project_states(states: Tensor, p: AttentionParams) -> Tensor:
    """``W_a h_i + b_a`` for all frames; constant across decode steps."""
    if states.shape[-1] != p.W_a.shape[0]:
        raise DimensionError(f"attention: state dim {states.shape[-1]} != {p.W_a.shape[0]}")
    return ad.add(ad.matmul(states, p.W_a), p.b_a)


def attention_scores(query: Tensor, states: Tensor, p: AttentionParams, mask=None,
                     keys: Tensor | None = None) -> Tensor:
    """Attention weights (B, n) for a (B, d_q) query over (B, n, d) states."""
    if states.ndim != 3 or states.shape[1] == 0:
        raise InputError(f"attention: need (B, n>=1, d) states, got {states.shape}")
    if query.shape[-1] != p.U_a.shape[0] or query.shape[0] != states.shape[0]:
        raise DimensionError(f"attention: query {query.shape} incompatible with states {states.shape}")
    if keys is None:
        keys = project_states(states, p)
    B, n = states.shape[:2]
    q = ad.reshape(ad.matmul(query, p.U_a), (B, 1, p.inner_dim))
    e = ad.matmul(ad.tanh(ad.add(keys, q)), p.w)          # (B, n)
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        if not m.all():
            e = ad.add(e, Tensor(np.where(m > 0, 0.0, _MASKED)))
    return ad.softmax(e, axis=-1)


def context_vector(alpha: Tensor, states: Tensor) -> Tensor:
    """Convex combination (B, d) of (B, n, d) states under (B, n) weights."""
    if alpha.shape != states.shape[:2]:
        raise DimensionError(f"context: weights {alpha.shape} vs states {states.shape}")
    B, n = alpha.shape
    return ad.sum_(ad.mul(ad.reshape(alpha, (B, n, 1)), states), axis=1)


def write_attention_csv(path, rows) -> None:
    """Rows of (step, segment_index, frame_index, weight)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "segment", "frame", "weight"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3]))])
