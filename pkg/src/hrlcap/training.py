"""Learning procedures.

* cross-entropy warm start with scheduled sampling and ground-truth goal gating;
* Internal Critic maximum likelihood on chunk-end labels (then frozen);
* Worker REINFORCE with a linear baseline on h^W (delta-CIDEr token rewards);
* Manager deterministic policy gradient through the frozen Worker
  (delta-CIDEr segment rewards, Gaussian goal exploration);
* the alternating XE -> {Worker, Manager} loop with checkpointing and resume.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .agent import (CRITIC_GROUP, ENCODER_GROUP, EOS, MANAGER_GROUP, PAD, WORKER_GROUP, HRLCaptioner,
                    Rollout, decode, rollout)
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, TrainConfig, parse_schedule
from .data import Batch, CaptionDataset
from .errors import ContractError, InputError, ModelStateError
from .metrics import PreparedRefs, build_idf, score_corpus
from .nn import ParamStore, clip_gradients
from .optim import AdadeltaState, adadelta_step
from .rewards import discounted_returns, segment_rewards, token_rewards

log = logging.getLogger(__name__)

CURVE_HEADER = ["epoch", "phase", "loss", "cider", "bleu4", "rouge_l", "lr", "seconds"]


# ------------------------------------------------------------------ helpers


def named_grads(grads: dict[int, np.ndarray], params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: grads[t.id] for name, t in params.items() if t.id in grads}


def policy_gradient_loss(logp_steps: Sequence[Tensor], weights: np.ndarray) -> Tensor:
    """``-sum_t sum_b weights[b, t] * logp_t[b] / B`` (weights are constants).

    With one step and weight (R - b) this is the REINFORCE-with-baseline
    surrogate whose gradient at the softmax input is (R - b)(pi - onehot).
    """
    B = weights.shape[0]
    total = None
    for t, lp in enumerate(logp_steps):
        w = weights[:, t]
        if not np.any(w):
            continue
        term = ad.sum_(ad.mul(lp, Tensor(w)))
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = ad.mul(logp_steps[0], Tensor(np.zeros(B)))
        total = ad.sum_(total)
    return ad.scale(total, -1.0 / B)


def scheduled_sampling_prob(epoch: int, ss_max: float, ramp_epochs: int) -> float:
    """Probability of feeding a model sample instead of the ground truth."""
    if ramp_epochs <= 0:
        return ss_max
    return ss_max * min(1.0, epoch / ramp_epochs)


def lr_schedule_update(history: Sequence[float], base: float = 1.0, patience: int = 4,
                       factor: float = 0.5) -> float:
    """Scale after replaying a validation history: ``factor`` per ``patience`` stale epochs."""
    scale, best, stale = base, -math.inf, 0
    for v in history:
        if v > best:
            best, stale = v, 0
        else:
            stale += 1
            if stale == patience:
                scale *= factor
                stale = 0
    return scale


# ------------------------------------------------------------------ baselines


class BaselineEstimator:
    """Linear regressor hidden state -> expected return.

    Inputs are taken as constants, so its loss never reaches the policy.
    """

    def __init__(self, dim: int, rho: float = 0.95, eps: float = 1e-6, lr: float = 1.0):
        self.params = ParamStore(seed=0)
        self.params["weight"] = ad.parameter(np.zeros(dim), "weight")
        self.params["bias"] = ad.parameter(np.zeros(1), "bias")
        self.opt = AdadeltaState(rho, eps, lr)

    def predict(self, h) -> np.ndarray:
        h = h.data if isinstance(h, Tensor) else np.asarray(h)
        return h @ self.params["weight"].data + self.params["bias"].data[0]

    def loss(self, h, returns, mask=None) -> Tensor:
        h = Tensor(h.data if isinstance(h, Tensor) else np.asarray(h, dtype=np.float64))
        r = np.asarray(returns, dtype=np.float64)
        m = np.ones_like(r) if mask is None else np.asarray(mask, dtype=np.float64)
        pred = ad.add(ad.matmul(h, self.params["weight"]), ad.reshape(self.params["bias"], ()))
        diff = ad.sub(pred, Tensor(r))
        return ad.scale(ad.sum_(ad.mul(ad.mul(diff, diff), Tensor(m))), 1.0 / max(1.0, m.sum()))

    def fit(self, h, returns, mask=None) -> float:
        """One mean-squared-error step."""
        with Tape() as tape:
            loss = self.loss(h, returns, mask)
        adadelta_step(self.params, named_grads(tape.backward(loss), self.params), self.opt)
        return loss.item()

    def state_dict(self) -> dict:
        return {"params": self.params.snapshot(), "opt": self.opt.to_dict()}

    def load_state_dict(self, d: dict) -> None:
        self.params.load(d["params"])
        self.opt = AdadeltaState.from_dict(d["opt"])


# ------------------------------------------------------------------ losses


def xe_loss(model: HRLCaptioner, batch: Batch, teacher_prob: float, rng, train: bool = True):
    """(loss, rollout) with loss = mean over videos of -sum_t log pi(a*_t)."""
    if not 0.0 <= teacher_prob <= 1.0:
        raise ContractError(f"teacher-forcing probability must lie in [0, 1], got {teacher_prob}")
    ctx = model.encode(batch.features, batch.lengths, train=train, rng=rng)
    ro = rollout(model, ctx, "teacher", targets=batch.targets, boundaries=batch.boundaries,
                 teacher_prob=teacher_prob, train=train, rng=rng)
    return policy_gradient_loss(ro.logp, ro.valid), ro


def critic_loss(model: HRLCaptioner, batch: Batch) -> tuple[Tensor, np.ndarray]:
    """Negative log-likelihood of the chunk-end labels (per caption, batch mean)."""
    tokens = batch.targets
    valid = (tokens != PAD).astype(np.float64)
    z = batch.boundaries.astype(np.float64)
    logits = model.critic_logits(np.where(tokens == PAD, EOS, tokens))
    ll = ad.add(ad.mul(ad.log_sigmoid(logits), Tensor(z * valid)),
                ad.mul(ad.log_sigmoid(ad.neg(logits)), Tensor((1 - z) * valid)))
    return ad.scale(ad.sum_(ll), -1.0 / tokens.shape[0]), logits.data


def critic_accuracy(model: HRLCaptioner, ds: CaptionDataset, batch_size: int = 200,
                    include_eos: bool = False) -> float:
    """Fraction of caption tokens whose boundary label the critic predicts."""
    correct = total = 0
    with ad.no_record():
        for s in range(0, len(ds), batch_size):
            b = ds.batch(list(range(s, min(len(ds), s + batch_size))))
            _, logits = critic_loss(model, b)
            pred = logits > math.log(model.cfg.critic_threshold / (1 - model.cfg.critic_threshold))
            mask = b.targets != PAD
            if not include_eos:
                mask &= b.targets != EOS
            correct += int(((pred == b.boundaries.astype(bool)) & mask).sum())
            total += int(mask.sum())
    return correct / max(1, total)


def train_critic(model: HRLCaptioner, train: CaptionDataset, cfg: TrainConfig,
                 val: CaptionDataset | None = None) -> dict:
    """Fit the critic by maximum likelihood, then mark it frozen."""
    for rec in train.records:
        if rec.chunks is None:
            raise InputError(f"{rec.video_id}: no chunk labels for critic training")
    rng = np.random.default_rng(cfg.seed + 1)
    params = model.params.group(*CRITIC_GROUP)
    opt = AdadeltaState(cfg.rho, cfg.eps, cfg.critic_lr)
    losses = []
    for epoch in range(cfg.critic_epochs):
        order = rng.permutation(len(train))
        ep = []
        for s in range(0, len(order), cfg.critic_batch):
            b = train.batch(order[s:s + cfg.critic_batch], rng)
            with Tape() as tape:
                loss, _ = critic_loss(model, b)
            grads = clip_gradients(named_grads(tape.backward(loss), params), cfg.clip)
            adadelta_step(params, grads, opt)
            ep.append(loss.item())
        losses.append(float(np.mean(ep)))
        log.info("critic epoch %d loss %.4f", epoch, losses[-1])
    model.critic_trained = True
    out = {"losses": losses, "train_accuracy": critic_accuracy(model, train)}
    if val is not None:
        out["val_accuracy"] = critic_accuracy(model, val)
    return out


# ------------------------------------------------------------------ epoch stats


@dataclass
class EpochStats:
    epoch: int
    phase: str
    loss: float
    cider: float
    bleu4: float
    rouge_l: float
    lr: float
    seconds: float

    def row(self) -> list:
        return [self.epoch, self.phase, repr(self.loss), repr(self.cider), repr(self.bleu4),
                repr(self.rouge_l), repr(self.lr), f"{self.seconds:.3f}"]


def write_curve(path, history: Sequence[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for s in history:
            w.writerow(s.row())


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ trainer


class Trainer:
    """Owns the model, optimiser, baselines and rng for one training run."""

    def __init__(self, model: HRLCaptioner, train: CaptionDataset, val: CaptionDataset | None,
                 cfg: TrainConfig, out_dir=None):
        cfg.validate()
        self.model = model
        self.train = train
        self.val = val
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = AdadeltaState(cfg.rho, cfg.eps, cfg.xe_lr)
        self.worker_baseline = BaselineEstimator(model.cfg.worker_hidden, cfg.rho, cfg.eps, cfg.baseline_lr)
        self.manager_baseline = BaselineEstimator(model.cfg.manager_hidden, cfg.rho, cfg.eps, cfg.baseline_lr)
        self.idf = build_idf(train.refs)
        self._refs: dict[str, PreparedRefs] = {}
        self.history: list[EpochStats] = []
        self.epoch = 0
        self.best_xe: tuple[float, dict] | None = None
        self.best: tuple[float, dict] | None = None

    # -------------------------------------------------------------- helpers

    def prepared(self, vid: str, refs) -> PreparedRefs:
        p = self._refs.get(vid)
        if p is None:
            p = self._refs[vid] = PreparedRefs.build(refs, self.idf)
        return p

    def _batch_refs(self, batch: Batch) -> list[PreparedRefs]:
        lookup = dict(zip(self.train.ids, self.train.refs))
        return [self.prepared(v, lookup[v]) for v in batch.video_ids]

    def owned(self, phase: str) -> dict[str, Tensor]:
        p = self.model.params
        if phase == "XE":
            return {k: v for k, v in p.items() if not k.startswith(CRITIC_GROUP)}
        if phase == "W":
            groups = WORKER_GROUP if self.cfg.rl_update_encoders else \
                tuple(g for g in WORKER_GROUP if g not in ENCODER_GROUP)
            return p.group(*groups)
        if phase == "M":
            return p.group(*MANAGER_GROUP)
        raise ContractError(f"unknown phase {phase!r}")

    def _apply(self, tape: Tape, loss: Tensor, phase: str) -> None:
        params = self.owned(phase)
        grads = clip_gradients(named_grads(tape.backward(loss), params), self.cfg.clip)
        adadelta_step(params, grads, self.opt)

    # -------------------------------------------------------------- steps

    def xe_step(self, batch: Batch, teacher_prob: float) -> float:
        with Tape() as tape:
            loss, _ = xe_loss(self.model, batch, teacher_prob, self.rng, train=True)
        self._apply(tape, loss, "XE")
        return loss.item()

    def worker_pg_step(self, batch: Batch) -> dict:
        """Sample captions, reward tokens by delta CIDEr, REINFORCE with baseline."""
        m = self.model
        with Tape() as tape:
            ctx = m.encode(batch.features, batch.lengths, train=True, rng=self.rng)
            ro = rollout(m, ctx, "sample", train=True, rng=self.rng, sigma=0.0)
            returns, words = self._token_returns(ro, batch)
            hW = np.stack(ro.worker_hidden, axis=1)                 # (B, T, H)
            base = self.worker_baseline.predict(hW)
            adv = (returns - base) * ro.valid
            loss = policy_gradient_loss(ro.logp, adv)
        self._apply(tape, loss, "W")
        self.worker_baseline.fit(hW.reshape(-1, hW.shape[-1]), returns.reshape(-1), ro.valid.reshape(-1))
        return {"loss": loss.item(), "return": float(returns[:, 0].mean()), "advantage": adv}

    def _token_returns(self, ro: Rollout, batch: Batch):
        refs = self._batch_refs(batch)
        B, T = ro.valid.shape
        returns = np.zeros((B, T))
        words = [self.train.vocab.decode(c) for c in ro.captions()]
        for b in range(B):
            n = int(ro.valid[b].sum())
            r = token_rewards(words[b], refs[b], n_actions=n)[:n]
            returns[b, :n] = discounted_returns(r, self.cfg.gamma)
        return returns, words

    def manager_dpg_step(self, batch: Batch, sigma: float | None = None) -> dict:
        """Greedy rollout with goal noise; segment returns drive the Manager through the Worker."""
        m = self.model
        sigma = self.cfg.sigma if sigma is None else sigma
        with Tape() as tape:
            ctx = m.encode(batch.features, batch.lengths, train=False)
            ro = rollout(m, ctx, "greedy", sigma=sigma, rng=self.rng)
            weights, hM, seg_returns, seg_mask = self._segment_weights(ro, batch)
            loss = policy_gradient_loss(ro.logp, weights)
        self._apply(tape, loss, "M")
        if seg_mask.any():
            self.manager_baseline.fit(hM, seg_returns, seg_mask)
        return {"loss": loss.item(), "advantage": weights}

    def _segment_weights(self, ro: Rollout, batch: Batch):
        refs = self._batch_refs(batch)
        B, T = ro.valid.shape
        words = [self.train.vocab.decode(c) for c in ro.captions()]
        segs = [ro.segments(b) for b in range(B)]
        S = max(len(s) for s in segs)
        hM = np.zeros((B, S, self.model.cfg.manager_hidden))
        R = np.zeros((B, S))
        mask = np.zeros((B, S))
        for b in range(B):
            f = segment_rewards(words[b], segs[b], refs[b])
            R[b, : len(f)] = discounted_returns(f, self.cfg.gamma)
            mask[b, : len(f)] = 1.0
            for j, (s, _) in enumerate(segs[b]):
                hM[b, j] = ro.manager_hidden[s][b]
        base = self.manager_baseline.predict(hM)
        weights = np.zeros((B, T))
        for b in range(B):
            for j, (s, e) in enumerate(segs[b]):
                weights[b, s:e] = R[b, j] - base[b, j]
        return weights * ro.valid, hM.reshape(-1, hM.shape[-1]), R.reshape(-1), mask.reshape(-1)

    # -------------------------------------------------------------- epochs

    def phase_for(self, epoch: int) -> str:
        if epoch < self.cfg.xe_epochs:
            return "XE"
        sched = parse_schedule(self.cfg.schedule)
        cycle = [p for p, n in sched for _ in range(n)]
        return cycle[(epoch - self.cfg.xe_epochs) % len(cycle)]

    def run_epoch(self, phase: str) -> float:
        order = self.rng.permutation(len(self.train))
        losses = []
        p_model = scheduled_sampling_prob(self.epoch, self.cfg.ss_max, self.cfg.ss_ramp_epochs)
        for s in range(0, len(order), self.cfg.batch):
            b = self.train.batch(order[s:s + self.cfg.batch], self.rng)
            if phase == "XE":
                losses.append(self.xe_step(b, 1.0 - p_model))
            elif phase == "W":
                losses.append(self.worker_pg_step(b)["loss"])
            else:
                losses.append(self.manager_dpg_step(b)["loss"])
        return float(np.mean(losses)) if losses else 0.0

    def validate(self, ds: CaptionDataset | None = None, beam: int = 1):
        ds = ds or self.val
        return evaluate(self.model, ds, beam=beam, batch_size=self.cfg.val_batch)

    def _lr_for(self, phase: str) -> float:
        xe_hist = [s.cider for s in self.history if s.phase == "XE"]
        rl_hist = [s.cider for s in self.history if s.phase != "XE"]
        if phase == "XE":
            return lr_schedule_update(xe_hist, self.cfg.xe_lr, self.cfg.lr_patience, self.cfg.lr_factor)
        return lr_schedule_update(rl_hist, self.cfg.rl_lr, self.cfg.lr_patience, self.cfg.lr_factor)

    def warm_start(self) -> None:
        """Reload the best XE parameters and restart the optimiser for the RL phases."""
        if self.best_xe is not None:
            self.model.params.load(self.best_xe[1], strict=False)
        self.opt = AdadeltaState(self.cfg.rho, self.cfg.eps, self.cfg.rl_lr)

    def fit(self, epochs: int | None = None) -> list[EpochStats]:
        """Train up to ``xe_epochs + rl_epochs`` total epochs (or ``epochs`` more)."""
        if not self.model.critic_trained:
            raise ModelStateError("hrl training needs a pretrained internal critic")
        if self.val is None:
            raise ContractError("training needs a validation split")
        total = self.cfg.xe_epochs + self.cfg.rl_epochs
        stop = total if epochs is None else min(total, self.epoch + epochs)
        critic_before = self.model.params.snapshot(self.model.params.group(*CRITIC_GROUP))
        while self.epoch < stop:
            phase = self.phase_for(self.epoch)
            if phase != "XE" and self.epoch == self.cfg.xe_epochs:
                self.warm_start()
            self.opt.lr = self._lr_for(phase)
            t0 = time.perf_counter()
            loss = self.run_epoch(phase)
            scores = self.validate()
            stats = EpochStats(self.epoch, phase, loss, scores.cider, scores.bleu4, scores.rouge,
                               self.opt.lr, time.perf_counter() - t0)
            self.history.append(stats)
            snap = self.model.params.snapshot()
            if phase == "XE" and (self.best_xe is None or stats.cider > self.best_xe[0]):
                self.best_xe = (stats.cider, snap)
            if self.best is None or stats.cider > self.best[0]:
                self.best = (stats.cider, snap)
            log.info("epoch %d %s loss %.4f CIDEr-D %.4f BLEU@4 %.4f ROUGE-L %.4f lr %.4g",
                     stats.epoch, phase, loss, stats.cider, stats.bleu4, stats.rouge_l, stats.lr)
            self.epoch += 1
            self._persist()
        for k, v in critic_before.items():
            if not np.array_equal(v, self.model.params[k].data):
                raise ModelStateError(f"critic parameter {k} changed during training")
        return self.history

    # -------------------------------------------------------------- checkpoints

    def _persist(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        write_curve(self.out_dir / "curve.csv", self.history)
        itos = self.train.vocab.itos
        if self.best is not None and self.best[1] is not None:
            from .agent import save_model
            current = self.model.params.snapshot()
            self.model.params.load(self.best[1])
            save_model(self.out_dir / "best.ckpt", self.model, itos,
                       {"epoch": self.best_epoch(), "cider": self.best[0]})
            self.model.params.load(current)
        if self.epoch % self.cfg.checkpoint_every == 0 or self.epoch == self.cfg.xe_epochs + self.cfg.rl_epochs:
            self.save(self.out_dir / "last.ckpt")

    def best_epoch(self) -> int:
        best = max(self.history, key=lambda s: s.cider)
        return best.epoch

    def save(self, path) -> None:
        meta = {
            "kind": "trainer",
            "model_config": dataclasses.asdict(self.model.cfg),
            "train_config": dataclasses.asdict(self.cfg),
            "vocab_size": self.model.vocab_size,
            "critic_trained": self.model.critic_trained,
            "itos": self.train.vocab.itos,
            "epoch": self.epoch,
            "rng": self.rng.bit_generator.state,
            "opt": self.opt.to_dict(),
            "worker_baseline": self.worker_baseline.state_dict(),
            "manager_baseline": self.manager_baseline.state_dict(),
            "history": [dataclasses.asdict(s) for s in self.history],
            "best_xe": None if self.best_xe is None else {"cider": self.best_xe[0], "params": self.best_xe[1]},
            "best": None if self.best is None else {"cider": self.best[0], "params": self.best[1]},
        }
        save_checkpoint(path, self.model.params.snapshot(), meta)

    def restore(self, path) -> None:
        params, meta = load_checkpoint(path)
        if meta.get("kind") != "trainer":
            raise ModelStateError(f"{path} is not a trainer checkpoint")
        self.model.params.load(params)
        self.model.critic_trained = bool(meta["critic_trained"])
        self.epoch = int(meta["epoch"])
        self.rng.bit_generator.state = meta["rng"]
        self.opt = AdadeltaState.from_dict(meta["opt"])
        self.worker_baseline.load_state_dict(meta["worker_baseline"])
        self.manager_baseline.load_state_dict(meta["manager_baseline"])
        self.history = [EpochStats(**s) for s in meta["history"]]
        bx, b = meta.get("best_xe"), meta.get("best")
        self.best_xe = None if bx is None else (bx["cider"], bx["params"])
        self.best = None if b is None else (b["cider"], b["params"])


def evaluate(model: HRLCaptioner, ds: CaptionDataset, beam: int = 1, batch_size: int = 100,
             idf=None):
    """Decode a split (greedy when ``beam`` is 1) and score it against its references."""
    cands = decode_dataset(model, ds, beam=beam, batch_size=batch_size)
    words = {v: ds.vocab.decode(r.tokens) for v, r in cands.items()}
    return score_corpus(words, ds.references(), idf)


def decode_dataset(model: HRLCaptioner, ds: CaptionDataset, beam: int = 1, batch_size: int = 100,
                   mode: str | None = None, seed: int | None = None, top5: bool = False) -> dict:
    mode = mode or ("greedy" if beam == 1 else "beam")
    out = {}
    for s in range(0, len(ds), batch_size):
        idx = list(range(s, min(len(ds), s + batch_size)))
        b = ds.batch(idx, with_captions=False)
        res = decode(model, b.features, b.lengths, mode=mode, beam=beam,
                     seed=None if seed is None else seed + s, top5=top5)
        out.update(zip(b.video_ids, res))
    return out


def hrl_train(config: Config, train: CaptionDataset, val: CaptionDataset, out_dir=None,
              model: HRLCaptioner | None = None, resume: bool = True) -> Trainer:
    """XE warm start followed by alternating Worker / Manager phases.

    ``model`` must carry a trained critic. If ``out_dir/last.ckpt`` exists and
    ``resume`` is set, training continues from it.
    """
    if model is None or not model.critic_trained:
        raise ModelStateError("hrl training needs a pretrained internal critic")
    trainer = Trainer(model, train, val, config.train, out_dir)
    last = Path(out_dir) / "last.ckpt" if out_dir else None
    if resume and last is not None and last.exists():
        trainer.restore(last)
    trainer.fit()
    return trainer
