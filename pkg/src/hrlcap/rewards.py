"""Delta-CIDEr immediate rewards and discounted returns."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .metrics import IdfTable, PreparedRefs, cider_d


def delta_reward(prefix: Sequence, extension: Sequence, references, idf: IdfTable | None = None) -> float:
    """CIDEr-D gained by appending ``extension`` to ``prefix`` (CIDEr of "" is 0)."""
    if not isinstance(references, PreparedRefs):
        references = PreparedRefs.build(references, idf)
    before = cider_d(prefix, references) if len(prefix) else 0.0
    return cider_d(list(prefix) + list(extension), references) - before


def prefix_scores(caption: Sequence, references: PreparedRefs) -> np.ndarray:
    """CIDEr-D of every prefix caption[:t], t = 0..len."""
    return np.array([0.0] + [cider_d(caption[:t], references) for t in range(1, len(caption) + 1)])


def token_rewards(caption: Sequence, references: PreparedRefs, n_actions: int | None = None) -> np.ndarray:
    """Per-action delta rewards; actions past the words (EOS) earn 0."""
    scores = prefix_scores(caption, references)
    r = np.diff(scores)
    if n_actions is not None and n_actions > len(r):
        r = np.concatenate([r, np.zeros(n_actions - len(r))])
    return r


def segment_rewards(caption: Sequence, segments: Sequence[tuple[int, int]],
                    references: PreparedRefs) -> np.ndarray:
    """Delta reward per [start, end) action range; ranges past the words are clipped."""
    scores = prefix_scores(caption, references)
    n = len(caption)
    return np.array([scores[min(e, n)] - scores[min(s, n)] for s, e in segments])


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """R_t = f_t + gamma * R_{t+1}, with zero return after the last step."""
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma must lie in [0, 1], got {gamma}")
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class RewardTrace:
    token_rewards: np.ndarray
    segment_rewards: np.ndarray
    worker_returns: np.ndarray
    manager_returns: np.ndarray
    gamma: float
    worker_baseline: np.ndarray = field(default_factory=lambda: np.zeros(0))
    manager_baseline: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def build(cls, caption, segments, references: PreparedRefs, gamma: float,
              n_actions: int | None = None) -> "RewardTrace":
        tok = token_rewards(caption, references, n_actions)
        seg = segment_rewards(caption, segments, references)
        return cls(tok, seg, discounted_returns(tok, gamma), discounted_returns(seg, gamma), gamma)
