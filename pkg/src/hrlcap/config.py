"""Model / training configuration and the flat ``key = value`` config format.

A config file is one ``key = value`` pair per line; ``#`` starts a comment.
Keys are the field names of :class:`ModelConfig` and :class:`TrainConfig`
(they share one namespace). Environment variables ``HRLCAP_<KEY>`` (upper
case) override file values, and explicit overrides beat both.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

from .errors import ContractError, LoadError

ENV_PREFIX = "HRLCAP_"


@dataclass
class ModelConfig:
    feat_dim: int = 16
    proj_dim: int = 32
    enc_low: int = 32           # per direction; low-level states are 2 * enc_low wide
    enc_high: int = 32
    enc_stride: int = 1
    att_dim: int = 0            # 0: inner dim = attended state dim
    worker_hidden: int = 64
    word_emb: int = 32
    out_hidden: int = 0         # 0: same as word_emb
    manager_hidden: int = 32
    goal_dim: int = 16
    critic_hidden: int = 32
    critic_emb: int = 32
    dropout: float = 0.5
    max_len: int = 30
    max_frames: int = 50
    critic_threshold: float = 0.5
    length_norm: bool = False

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and f.name not in ("att_dim", "out_hidden") and v < 1:
                raise ContractError(f"{f.name} must be >= 1, got {v}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class TrainConfig:
    seed: int = 0
    batch: int = 64
    gamma: float = 0.95
    sigma: float = 0.1
    clip: float = 10.0
    beam: int = 5
    rho: float = 0.95
    eps: float = 1e-6
    xe_epochs: int = 30
    rl_epochs: int = 20
    schedule: str = "W:1,M:1"
    xe_lr: float = 1.0
    rl_lr: float = 0.1
    lr_patience: int = 4
    lr_factor: float = 0.5
    ss_max: float = 0.25        # final probability of feeding a model sample
    ss_ramp_epochs: int = 20
    critic_epochs: int = 10
    critic_batch: int = 64
    critic_lr: float = 1.0
    baseline_lr: float = 1.0
    rl_update_encoders: bool = True
    checkpoint_every: int = 1
    val_batch: int = 100

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.sigma < 0:
            raise ContractError(f"sigma must be >= 0, got {self.sigma}")
        if self.batch < 1:
            raise ContractError(f"batch must be >= 1, got {self.batch}")
        parse_schedule(self.schedule)


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "Config":
        self.model.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return {"model": dataclasses.asdict(self.model), "train": dataclasses.asdict(self.train)}

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        return cls(ModelConfig(**d.get("model", {})), TrainConfig(**d.get("train", {})))


PRESETS = {
    # layer sizes and sequence limits at the scale of the two video datasets
    "msrvtt": dict(feat_dim=2048, proj_dim=512, enc_low=512, enc_high=256, worker_hidden=1024,
                   word_emb=512, manager_hidden=256, goal_dim=16, critic_hidden=128,
                   critic_emb=128, max_len=30, max_frames=50),
    "charades": dict(feat_dim=2048, proj_dim=512, enc_low=512, enc_high=256, worker_hidden=1024,
                     word_emb=512, manager_hidden=256, goal_dim=16, critic_hidden=64,
                     critic_emb=64, max_len=60, max_frames=150),
    # desk-scale settings for the synthetic multi-activity task
    "synthetic": dict(feat_dim=16, proj_dim=16, enc_low=16, enc_high=16, worker_hidden=64,
                      word_emb=16, manager_hidden=32, goal_dim=16, critic_hidden=16, critic_emb=16,
                      dropout=0.0, batch=32, eps=1e-4, critic_epochs=3),
}


def parse_schedule(text: str) -> list[tuple[str, int]]:
    """``"W:1,M:1"`` -> [("W", 1), ("M", 1)]."""
    out = []
    for part in text.split(","):
        part = part.strip()
        try:
            phase, n = part.split(":")
            n = int(n)
        except ValueError:
            raise ContractError(f"bad schedule entry {part!r}") from None
        if phase not in ("W", "M") or n < 1:
            raise ContractError(f"bad schedule entry {part!r}")
        out.append((phase, n))
    if not out:
        raise ContractError("empty schedule")
    return out


def _field_types() -> dict[str, tuple[str, str]]:
    out = {}
    for section, cls in (("model", ModelConfig), ("train", TrainConfig)):
        for f in fields(cls):
            out[f.name] = (section, f.type)
    return out


def _coerce(key: str, typ: str, raw: str):
    raw = raw.strip()
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ContractError(f"config key {key}: cannot parse {raw!r} as {typ}") from None


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise LoadError(f"config line {lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def build_config(pairs: dict[str, str] | None = None, env: dict[str, str] | None = None,
                 overrides: dict | None = None) -> Config:
    types = _field_types()
    cfg = Config()
    merged: dict[str, object] = {}
    preset = None
    for source in (pairs or {}, _env_pairs(env)):
        for k, v in source.items():
            if k == "preset":
                preset = v
                continue
            if k not in types:
                raise ContractError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, types[k][1], v)
    if preset is not None:
        if preset not in PRESETS:
            raise ContractError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for k, v in PRESETS[preset].items():
            merged.setdefault(k, v)
    for k, v in (overrides or {}).items():
        if k not in types:
            raise ContractError(f"unknown config key {k!r}")
        merged[k] = v
    for k, v in merged.items():
        setattr(getattr(cfg, types[k][0]), k, v)
    return cfg.validate()


def _env_pairs(env: dict[str, str] | None) -> dict[str, str]:
    env = os.environ if env is None else env
    types = _field_types()
    return {k[len(ENV_PREFIX):].lower(): v for k, v in env.items()
            if k.startswith(ENV_PREFIX) and (k[len(ENV_PREFIX):].lower() in types
                                             or k[len(ENV_PREFIX):].lower() == "preset")}


def load_config(path=None, overrides: dict | None = None, env: dict[str, str] | None = None) -> Config:
    pairs = {}
    if path is not None:
        try:
            with open(path) as fh:
                pairs = parse_config_text(fh.read())
        except OSError as exc:
            raise LoadError(f"cannot read config {path}: {exc}") from None
    return build_config(pairs, env, overrides)


def dump_config(cfg: Config) -> str:
    lines = ["# model"]
    lines += [f"{f.name} = {getattr(cfg.model, f.name)}" for f in fields(cfg.model)]
    lines.append("# training")
    lines += [f"{f.name} = {getattr(cfg.train, f.name)}" for f in fields(cfg.train)]
    return "\n".join(lines) + "\n"
