"""End-to-end runs on the synthetic task and the goal-dimension sweep."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .agent import HRLCaptioner, save_model
from .config import Config, build_config
from .data import CaptionDataset, SynthTaskSpec, Vocabulary, gen_synth, load_manifest, write_csv
from .training import Trainer, train_critic

log = logging.getLogger(__name__)

SWEEP_HEADER = ["config", "goal_dim", "xe_best_cider", "hrl_best_cider", "hrl_best_bleu4",
                "hrl_best_rouge_l", "critic_accuracy", "seconds"]


def synthetic_config(**overrides) -> Config:
    return build_config({"preset": "synthetic"}, env={}, overrides=overrides)


def ensure_synth(data_dir, spec: SynthTaskSpec | None = None) -> Path:
    """Generate the synthetic dataset unless ``data_dir`` already holds one."""
    data_dir = Path(data_dir)
    if not (data_dir / "task.json").exists():
        gen_synth(spec or SynthTaskSpec(n_activities=16), data_dir)
    return data_dir


def load_splits(data_dir, cfg: Config) -> tuple[Vocabulary, CaptionDataset, CaptionDataset]:
    data_dir = Path(data_dir)
    vocab = Vocabulary.load(data_dir / "vocab.json")
    make = lambda s: CaptionDataset(load_manifest(data_dir / f"{s}.jsonl"), vocab,
                                    cfg.model.max_frames, cfg.model.max_len)
    return vocab, make("train"), make("val")


@dataclass
class RunSummary:
    xe_best: float
    hrl_best: float
    rl_best: float
    best_bleu4: float
    best_rouge_l: float
    critic_accuracy: float
    seconds: float
    out_dir: Path

    @property
    def curve(self) -> Path:
        return self.out_dir / "curve.csv"


def run_synthetic(out_dir, data_dir, cfg: Config | None = None, train_subset: int | None = None) -> RunSummary:
    """Critic, XE warm start and HRL phases on the synthetic task; artefacts go to ``out_dir``."""
    t0 = time.perf_counter()
    cfg = cfg or synthetic_config()
    out_dir = Path(out_dir)
    vocab, train, val = load_splits(data_dir, cfg)
    if train_subset is not None:
        train.records = train.records[:train_subset]
        train.ids, train.refs = train.ids[:train_subset], train.refs[:train_subset]
    model = HRLCaptioner(cfg.model, len(vocab), seed=cfg.train.seed)
    critic = train_critic(model, train, cfg.train, val)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(out_dir / "critic.ckpt", model, vocab.itos, {"critic": critic})
    trainer = Trainer(model, train, val, cfg.train, out_dir)
    history = trainer.fit()
    xe = [s for s in history if s.phase == "XE"]
    rl = [s for s in history if s.phase != "XE"]
    best = max(history, key=lambda s: s.cider)
    return RunSummary(
        xe_best=max((s.cider for s in xe), default=float("nan")),
        hrl_best=best.cider,
        rl_best=max((s.cider for s in rl), default=float("nan")),
        best_bleu4=best.bleu4,
        best_rouge_l=best.rouge_l,
        critic_accuracy=critic.get("val_accuracy", critic["train_accuracy"]),
        seconds=time.perf_counter() - t0,
        out_dir=out_dir,
    )


def goal_dim_sweep(out_dir, data_dir, dims=(16, 32, 64), cfg: Config | None = None,
                   train_subset: int | None = None) -> Path:
    """Train HRL-<d> for each goal dimension and write ``goal_dim_sweep.csv``."""
    cfg = cfg or synthetic_config()
    out_dir = Path(out_dir)
    rows = []
    for d in dims:
        run_cfg = Config(replace(cfg.model, goal_dim=d), replace(cfg.train)).validate()
        s = run_synthetic(out_dir / f"hrl-{d}", data_dir, run_cfg, train_subset)
        log.info("HRL-%d: XE best %.4f, HRL best %.4f", d, s.xe_best, s.hrl_best)
        rows.append([f"HRL-{d}", d, s.xe_best, s.hrl_best, s.best_bleu4, s.best_rouge_l,
                     s.critic_accuracy, round(s.seconds, 3)])
    path = out_dir / "goal_dim_sweep.csv"
    write_csv(path, SWEEP_HEADER, rows)
    return path
