"""LSTM / GRU cells and the two-level video encoder.

All tensors are batch-first. Variable-length batches carry a 0/1 frame mask;
at masked steps a recurrent state is carried through unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, InputError
from .nn import Linear, ParamStore, dropout


@dataclass
class LstmParams:
    weight: Tensor          # (input + hidden, 4 * hidden), gate order i, f, o, candidate
    bias: Tensor            # (4 * hidden,)
    input_size: int
    hidden_size: int

    @classmethod
    def create(cls, store: ParamStore, name: str, input_size: int, hidden_size: int) -> "LstmParams":
        return cls(store.new(f"{name}.weight", (input_size + hidden_size, 4 * hidden_size)),
                   store.new(f"{name}.bias", (4 * hidden_size,)), input_size, hidden_size)


@dataclass
class GruParams:
    gate_weight: Tensor     # (input + hidden, 2 * hidden), order update, reset
    gate_bias: Tensor
    cand_weight: Tensor     # (input + hidden, hidden)
    cand_bias: Tensor
    input_size: int
    hidden_size: int

    @classmethod
    def create(cls, store: ParamStore, name: str, input_size: int, hidden_size: int) -> "GruParams":
        n = input_size + hidden_size
        return cls(store.new(f"{name}.gate_weight", (n, 2 * hidden_size)),
                   store.new(f"{name}.gate_bias", (2 * hidden_size,)),
                   store.new(f"{name}.cand_weight", (n, hidden_size)),
                   store.new(f"{name}.cand_bias", (hidden_size,)), input_size, hidden_size)


def _check(x: Tensor, h: Tensor, input_size: int, hidden_size: int, cell: str) -> None:
    if x.shape[-1] != input_size or h.shape[-1] != hidden_size or x.shape[:-1] != h.shape[:-1]:
        raise DimensionError(
            f"{cell}: input {x.shape} / state {h.shape} do not match "
            f"input_size={input_size}, hidden_size={hidden_size}"
        )


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    _check(x, h_prev, p.input_size, p.hidden_size, "lstm_step")
    H = p.hidden_size
    z = ad.add(ad.matmul(ad.concat([x, h_prev], axis=-1), p.weight), p.bias)
    ifo = ad.sigmoid(ad.slice_(z, (..., slice(0, 3 * H))))
    i = ad.slice_(ifo, (..., slice(0, H)))
    f = ad.slice_(ifo, (..., slice(H, 2 * H)))
    o = ad.slice_(ifo, (..., slice(2 * H, 3 * H)))
    cand = ad.tanh(ad.slice_(z, (..., slice(3 * H, 4 * H))))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, cand))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def gru_step(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    _check(x, h_prev, p.input_size, p.hidden_size, "gru_step")
    H = p.hidden_size
    zr = ad.sigmoid(ad.add(ad.matmul(ad.concat([x, h_prev], axis=-1), p.gate_weight), p.gate_bias))
    z = ad.slice_(zr, (..., slice(0, H)))
    r = ad.slice_(zr, (..., slice(H, 2 * H)))
    cand = ad.tanh(ad.add(ad.matmul(ad.concat([x, ad.mul(r, h_prev)], axis=-1), p.cand_weight),
                          p.cand_bias))
    # h = (1 - z) * h_prev + z * cand
    return ad.add(h_prev, ad.mul(z, ad.sub(cand, h_prev)))


def carry(new: Tensor, old: Tensor, mask: np.ndarray | None) -> Tensor:
    """``new`` where ``mask`` is 1, ``old`` where it is 0 (mask shape (B,))."""
    if mask is None:
        return new
    m = Tensor(np.asarray(mask, dtype=np.float64)[:, None])
    return ad.add(old, ad.mul(m, ad.sub(new, old)))


@dataclass
class EncoderOutputs:
    low: Tensor             # (B, n, 2 * d_low): forward || backward hidden states
    high: Tensor            # (B, n_high, d_high)
    low_mask: np.ndarray    # (B, n) 1.0 for real frames
    high_mask: np.ndarray   # (B, n_high)
    lengths: np.ndarray     # (B,) frame counts

    @property
    def n(self) -> int:
        return self.low.shape[1]


class VideoEncoder:
    """Input projection -> Bi-LSTM (worker states) -> LSTM (manager states)."""

    def __init__(self, store: ParamStore, feat_dim: int, proj_dim: int, low_dim: int,
                 high_dim: int, stride: int = 1, dropout_rate: float = 0.0):
        self.proj = Linear.create(store, "enc.proj", feat_dim, proj_dim)
        self.fwd = LstmParams.create(store, "enc.fwd", proj_dim, low_dim)
        self.bwd = LstmParams.create(store, "enc.bwd", proj_dim, low_dim)
        self.high = LstmParams.create(store, "enc.high", 2 * low_dim, high_dim)
        self.feat_dim, self.low_dim, self.high_dim = feat_dim, low_dim, high_dim
        self.stride = stride
        self.dropout_rate = dropout_rate

    @property
    def low_out_dim(self) -> int:
        return 2 * self.low_dim

    def __call__(self, features: np.ndarray, lengths=None, train: bool = False,
                 rng: np.random.Generator | None = None) -> EncoderOutputs:
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim == 2:
            feats = feats[None]
        if feats.ndim != 3 or feats.shape[1] == 0:
            raise InputError(f"encode: need a non-empty (B, n, d_feat) feature array, got {feats.shape}")
        if feats.shape[2] != self.feat_dim:
            raise DimensionError(f"encode: feature dim {feats.shape[2]} != {self.feat_dim}")
        if not np.all(np.isfinite(feats)):
            raise InputError("encode: features contain non-finite values")
        B, n, _ = feats.shape
        lengths = np.full(B, n) if lengths is None else np.asarray(lengths)
        if lengths.min() < 1:
            raise InputError("encode: every video needs at least one frame")
        mask = (np.arange(n)[None, :] < lengths[:, None]).astype(np.float64)
        full = bool(mask.all())

        x = dropout(self.proj(Tensor(feats)), self.dropout_rate, train, rng)
        steps = [ad.slice_(x, (slice(None), t, slice(None))) for t in range(n)]

        fwd = self._run(self.fwd, steps, range(n), None if full else mask, B)
        bwd = self._run(self.bwd, steps, range(n - 1, -1, -1), None if full else mask, B)
        low_steps = [ad.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]
        low = ad.stack(low_steps, axis=1)

        idx = list(range(0, n, self.stride))
        high_mask = mask[:, idx]
        high_steps = self._run(self.high, [low_steps[i] for i in idx], range(len(idx)),
                               None if full else high_mask, B)
        high = ad.stack(high_steps, axis=1)
        return EncoderOutputs(low, high, mask, high_mask, lengths)

    @staticmethod
    def _run(p: LstmParams, inputs, order, mask, B) -> list[Tensor]:
        h = c = Tensor(np.zeros((B, p.hidden_size)))
        outs: list[Tensor | None] = [None] * len(inputs)
        for t in order:
            h_new, c_new = lstm_step(inputs[t], h, c, p)
            m = None if mask is None else mask[:, t]
            h, c = carry(h_new, h, m), carry(c_new, c, m)
            outs[t] = h
        return outs
