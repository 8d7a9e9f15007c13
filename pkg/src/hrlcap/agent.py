"""The hierarchical decoder: Manager, Worker, Internal Critic, and decoding.

One ``rollout`` loop drives every use of the decoder (teacher forcing,
greedy, sampling, exploration) so training and inference share the exact
step semantics:

* the Manager steps at t = 0 and at the step right after a boundary, and its
  goal is held fixed in between;
* a boundary after token a_t is ``critic p(z_t) > threshold`` or a_t = EOS
  (under teacher forcing the ground-truth chunk ends are used instead);
* a row stops at EOS or after ``max_len`` tokens.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, attention_scores, context_vector, project_states
from .autodiff import Tensor, no_record
from .config import ModelConfig
from .errors import ContractError, ModelStateError
from .nn import Linear, ParamStore, dropout
from .recurrent import EncoderOutputs, GruParams, LstmParams, VideoEncoder, carry, gru_step, lstm_step

PAD, BOS, EOS, UNK = 0, 1, 2, 3

WORKER_GROUP = ("enc.", "watt.", "worker.", "wemb", "wout.")
ENCODER_GROUP = ("enc.",)
MANAGER_GROUP = ("mgr.", "matt.", "goal.")
CRITIC_GROUP = ("critic.",)


@dataclass
class Context:
    """Encoder outputs for a batch plus the step-invariant attention keys."""

    enc: EncoderOutputs
    wkeys: Tensor
    mkeys: Tensor

    @property
    def batch(self) -> int:
        return self.enc.low.shape[0]

    def rows(self, idx) -> "Context":
        """Row-selected copy (inference only; drops any tape history)."""
        idx = np.asarray(idx)
        e = self.enc
        enc = EncoderOutputs(Tensor(e.low.data[idx]), Tensor(e.high.data[idx]), e.low_mask[idx],
                             e.high_mask[idx], e.lengths[idx])
        return Context(enc, Tensor(self.wkeys.data[idx]), Tensor(self.mkeys.data[idx]))


@dataclass
class DecoderState:
    hW: Tensor
    cW: Tensor
    hM: Tensor
    cM: Tensor
    hI: Tensor
    goal: Tensor
    prev: np.ndarray            # (B,) previous token ids
    need_goal: np.ndarray       # (B,) Manager emits a goal at the coming step
    manager_steps: np.ndarray   # (B,) how many goals each row has received
    finished: np.ndarray        # (B,)
    tokens: list = field(default_factory=list)       # per step (B,) arrays
    boundaries: list = field(default_factory=list)   # per step (B,) bool arrays

    @property
    def step(self) -> int:
        return len(self.tokens)

    def rows(self, idx) -> "DecoderState":
        idx = np.asarray(idx)
        pick = lambda t: Tensor(t.data[idx])
        return DecoderState(pick(self.hW), pick(self.cW), pick(self.hM), pick(self.cM),
                            pick(self.hI), pick(self.goal), self.prev[idx].copy(),
                            self.need_goal[idx].copy(), self.manager_steps[idx].copy(),
                            self.finished[idx].copy(), [t[idx] for t in self.tokens],
                            [b[idx] for b in self.boundaries])


@dataclass
class Hypothesis:
    state: DecoderState         # single-row state
    logprob: float
    step_logprobs: list
    segment_ids: list
    attention: list
    finished: bool = False
    top5: list | None = None


@dataclass
class StepOutput:
    logits: Tensor
    worker_alpha: np.ndarray
    manager_alpha: np.ndarray | None
    new_goal: np.ndarray


def explore_goal(goal: Tensor, sigma: float, rng: np.random.Generator | None) -> Tensor:
    """Goal plus isotropic Gaussian noise of standard deviation ``sigma``."""
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return goal
    return ad.add(goal, Tensor(rng.normal(0.0, sigma, size=goal.shape)))


class HRLCaptioner:
    """Parameters and step functions of the full encoder / HRL decoder."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, seed: int = 0):
        cfg.validate()
        if vocab_size <= EOS:
            raise ContractError(f"vocabulary of {vocab_size} has no room for real tokens")
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.params = store = ParamStore(seed)
        self.encoder = VideoEncoder(store, cfg.feat_dim, cfg.proj_dim, cfg.enc_low, cfg.enc_high,
                                    cfg.enc_stride, cfg.dropout)
        low, high = self.encoder.low_out_dim, cfg.enc_high
        att = cfg.att_dim or None
        self.watt = AttentionParams.create(store, "watt", low, cfg.worker_hidden, att)
        self.matt = AttentionParams.create(store, "matt", high, cfg.manager_hidden, att)
        self.manager = LstmParams.create(store, "mgr.lstm", high + cfg.worker_hidden, cfg.manager_hidden)
        self.goal_proj = Linear.create(store, "goal", cfg.manager_hidden, cfg.goal_dim)
        self.wemb = store.new("wemb", (vocab_size, cfg.word_emb))
        self.worker = LstmParams.create(store, "worker.lstm", low + cfg.goal_dim + cfg.word_emb,
                                        cfg.worker_hidden)
        out_hidden = cfg.out_hidden or cfg.word_emb
        self.out_hidden = Linear.create(store, "wout.hidden", cfg.worker_hidden, out_hidden)
        self.out_logits = Linear.create(store, "wout.logits", out_hidden, vocab_size)
        self.cemb = store.new("critic.emb", (vocab_size, cfg.critic_emb))
        self.critic = GruParams.create(store, "critic.gru", cfg.critic_emb, cfg.critic_hidden)
        self.critic_out = Linear.create(store, "critic.out", cfg.critic_hidden, 1)
        self.critic_trained = False
        self.loaded = True

    # ------------------------------------------------------------ components

    def encode(self, features, lengths=None, train: bool = False, rng=None) -> Context:
        if not self.loaded:
            raise ModelStateError("model parameters are not loaded")
        enc = self.encoder(features, lengths, train=train, rng=rng)
        return Context(enc, project_states(enc.low, self.watt), project_states(enc.high, self.matt))

    def init_state(self, batch: int) -> DecoderState:
        z = lambda d: Tensor(np.zeros((batch, d)))
        c = self.cfg
        return DecoderState(z(c.worker_hidden), z(c.worker_hidden), z(c.manager_hidden),
                            z(c.manager_hidden), z(c.critic_hidden), z(c.goal_dim),
                            np.full(batch, BOS), np.ones(batch, bool), np.zeros(batch, np.int64),
                            np.zeros(batch, bool))

    def manager_step(self, state: DecoderState, ctx: Context, mask=None, sigma: float = 0.0,
                     rng=None) -> tuple[DecoderState, Tensor, np.ndarray]:
        """Advance the Manager on rows where ``mask`` is set; returns the active goals."""
        mask = np.ones(ctx.batch, bool) if mask is None else np.asarray(mask, bool)
        enc = ctx.enc
        alpha = attention_scores(state.hM, enc.high, self.matt, enc.high_mask, keys=ctx.mkeys)
        c_m = context_vector(alpha, enc.high)
        hM, cM = lstm_step(ad.concat([c_m, state.hW], axis=-1), state.hM, state.cM, self.manager)
        goal = explore_goal(self.goal_proj(hM), sigma, rng)
        m = None if mask.all() else mask.astype(np.float64)
        new = replace(state, hM=carry(hM, state.hM, m), cM=carry(cM, state.cM, m),
                      goal=carry(goal, state.goal, m), manager_steps=state.manager_steps + mask)
        return new, new.goal, alpha.data

    def worker_step(self, state: DecoderState, ctx: Context, goal: Tensor, prev, train=False,
                    rng=None) -> tuple[DecoderState, Tensor, np.ndarray]:
        """One Worker LSTM step; returns the pre-softmax scores x_t."""
        enc = ctx.enc
        alpha = attention_scores(state.hW, enc.low, self.watt, enc.low_mask, keys=ctx.wkeys)
        c_w = context_vector(alpha, enc.low)
        emb = ad.embedding(self.wemb, prev)
        hW, cW = lstm_step(ad.concat([c_w, goal, emb], axis=-1), state.hW, state.cW, self.worker)
        h = dropout(hW, self.cfg.dropout, train, rng)
        logits = self.out_logits(ad.tanh(self.out_hidden(h)))
        return replace(state, hW=hW, cW=cW), logits, alpha.data

    def critic_step(self, hI: Tensor, tokens) -> tuple[Tensor, Tensor]:
        """GRU update on the token just emitted; returns (h_I, p(z_t)) with p of shape (B,)."""
        h = gru_step(ad.embedding(self.cemb, tokens), hI, self.critic)
        p = ad.sigmoid(ad.reshape(self.critic_out(h), (h.shape[0],)))
        return h, p

    # --------------------------------------------------------------- stepping

    def step(self, state: DecoderState, ctx: Context, sigma=0.0, train=False, rng=None):
        """Manager (where due) then Worker for one time step; tokens are not chosen here."""
        new_goal = state.need_goal & ~state.finished
        m_alpha = None
        if new_goal.any():
            state, goal, m_alpha = self.manager_step(state, ctx, new_goal, sigma, rng)
        state, logits, w_alpha = self.worker_step(state, ctx, state.goal, state.prev, train, rng)
        return state, StepOutput(logits, w_alpha, m_alpha, new_goal)

    def commit(self, state: DecoderState, tokens, boundary=None, limit: int | None = None):
        """Record chosen tokens; run the critic unless ``boundary`` is given."""
        done = state.finished
        tokens = np.where(done, PAD, np.asarray(tokens, dtype=np.int64))
        hI = state.hI
        if boundary is None:
            with no_record():
                hI, p = self.critic_step(state.hI, np.where(done, EOS, tokens))
            boundary = p.data > self.cfg.critic_threshold
        boundary = (np.asarray(boundary, bool) | (tokens == EOS)) & ~done
        finished = done | (tokens == EOS)
        if limit is not None and state.step + 1 >= limit:
            finished = np.ones_like(finished)
        return replace(state, hI=hI, prev=np.where(done, state.prev, tokens),
                       need_goal=boundary, finished=finished, tokens=state.tokens + [tokens],
                       boundaries=state.boundaries + [boundary])

    def critic_logits(self, tokens: np.ndarray) -> Tensor:
        """Pre-sigmoid critic scores (B, T) for a teacher-forced token array."""
        B, T = tokens.shape
        h = Tensor(np.zeros((B, self.cfg.critic_hidden)))
        out = []
        for t in range(T):
            h = gru_step(ad.embedding(self.cemb, tokens[:, t]), h, self.critic)
            out.append(ad.reshape(self.critic_out(h), (B,)))
        return ad.stack(out, axis=1)


# ------------------------------------------------------------------ rollout


@dataclass
class Rollout:
    tokens: np.ndarray          # (B, T) chosen / target token ids (PAD after the end)
    valid: np.ndarray           # (B, T) 1.0 where the step is part of the episode
    logp: list                  # per step (B,) Tensors: log pi(chosen token)
    logits: list                # per step (B, V) Tensors
    segment_ids: np.ndarray     # (B, T) index of the goal in force at each step
    goal_steps: np.ndarray      # (B, T) True where a new goal was emitted
    worker_hidden: list         # per step (B, Hw) arrays
    manager_hidden: list        # per step (B, Hm) arrays (after any goal update)
    goals: list                 # per step (B, goal_dim) arrays actually fed to the Worker
    worker_alpha: list          # per step (B, n)
    manager_alpha: list         # per step (B, n_high) or None
    manager_steps: np.ndarray   # (B,)

    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=1).astype(np.int64)

    def captions(self) -> list[list[int]]:
        """Emitted word ids per row, EOS excluded."""
        out = []
        for row, n in zip(self.tokens, self.lengths()):
            words = [int(t) for t in row[:n]]
            if words and words[-1] == EOS:
                words = words[:-1]
            out.append(words)
        return out

    def segments(self, b: int) -> list[tuple[int, int]]:
        """Action-index ranges [start, end) per goal for row ``b`` (EOS included)."""
        n = int(self.valid[b].sum())
        ids = self.segment_ids[b, :n]
        out, start = [], 0
        for t in range(1, n + 1):
            if t == n or ids[t] != ids[t - 1]:
                out.append((start, t))
                start = t
        return out


def rollout(model: HRLCaptioner, ctx: Context, mode: str, *, targets=None, boundaries=None,
            teacher_prob: float = 1.0, sigma: float = 0.0, train: bool = False, rng=None,
            max_len: int | None = None) -> Rollout:
    """Run the decoder over a batch.

    ``mode`` is ``"teacher"`` (``targets`` (B, T) ending in EOS, ground-truth
    ``boundaries`` (B, T) gate the Manager), ``"greedy"`` or ``"sample"``.
    """
    B = ctx.batch
    if mode == "teacher":
        targets = np.asarray(targets, dtype=np.int64)
        limit = targets.shape[1]
        tgt_len = (targets != PAD).sum(axis=1)
    elif mode in ("greedy", "sample"):
        limit = max_len or model.cfg.max_len
    else:
        raise ContractError(f"unknown rollout mode {mode!r}")
    if limit < 1:
        raise ContractError("max length must be positive")
    if (mode == "sample" or train or sigma > 0 or teacher_prob < 1.0) and rng is None:
        raise ContractError("stochastic rollout needs an rng")

    state = model.init_state(B)
    out = dict(tokens=[], valid=[], logp=[], logits=[], seg=[], goal_steps=[], hw=[], hm=[],
               goals=[], wa=[], ma=[])
    seg = np.full(B, -1)
    for t in range(limit):
        active = ~state.finished
        state, so = model.step(state, ctx, sigma=sigma, train=train, rng=rng)
        seg = seg + so.new_goal
        logp_all = ad.log_softmax(so.logits)
        if mode == "teacher":
            chosen = targets[:, t]
            boundary = np.asarray(boundaries)[:, t].astype(bool)
        elif mode == "greedy":
            chosen = logp_all.data.argmax(axis=1)
            boundary = None
        else:
            chosen = _sample(np.exp(logp_all.data), rng)
            boundary = None
        chosen = np.where(active, chosen, PAD)
        out["logp"].append(ad.pick(logp_all, np.where(active, chosen, 0)))
        out["logits"].append(so.logits)
        out["valid"].append(active.astype(np.float64))
        out["seg"].append(np.where(active, seg, -1))
        out["goal_steps"].append(so.new_goal)
        out["hw"].append(state.hW.data)
        out["hm"].append(state.hM.data)
        out["goals"].append(state.goal.data)
        out["wa"].append(so.worker_alpha)
        out["ma"].append(so.manager_alpha)
        out["tokens"].append(chosen)
        state = model.commit(state, chosen, boundary, limit=None if mode == "teacher" else limit)
        if mode == "teacher":
            state.finished = state.finished | (t + 1 >= tgt_len)
            nxt = targets[:, t]
            if teacher_prob < 1.0:
                use_model = rng.random(B) >= teacher_prob
                sampled = _sample(np.exp(logp_all.data), rng)
                nxt = np.where(use_model, sampled, nxt)
            state.prev = np.where(active, nxt, state.prev)
        if state.finished.all():
            break
    stack = lambda k: np.stack(out[k], axis=1)
    return Rollout(stack("tokens"), stack("valid"), out["logp"], out["logits"], stack("seg"),
                   stack("goal_steps"), out["hw"], out["hm"], out["goals"], out["wa"], out["ma"],
                   state.manager_steps)


def _sample(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])[:, None]
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf > u * cdf[:, -1:]).argmax(axis=1)
    return idx


# ------------------------------------------------------------------ decoding


@dataclass
class DecodeResult:
    tokens: list[int]                       # words, EOS excluded
    segments: list[tuple[int, int]]         # word-index ranges
    log_prob: float
    step_logprobs: list[float]
    attention: list[tuple[int, int, int, float]] = field(default_factory=list)
    top5: list | None = None


def _word_segments(action_segments, n_words) -> list[tuple[int, int]]:
    out = []
    for s, e in action_segments:
        e = min(e, n_words)
        if e > s:
            out.append((s, e))
    return out


def _attention_rows(alphas, seg_ids, length) -> list[tuple[int, int, int, float]]:
    rows = []
    for t in range(len(alphas)):
        for i, w in enumerate(alphas[t]):
            rows.append((t, int(seg_ids[t]), i, float(w)))
    return rows


def decode(model: HRLCaptioner, features, lengths=None, mode: str = "greedy", beam: int = 1,
           seed: int | None = None, max_len: int | None = None, top5: bool = False,
           length_norm: bool | None = None) -> list[DecodeResult]:
    """Decode a batch of videos with goal exploration disabled.

    ``mode`` is ``"greedy"``, ``"sample"`` or ``"beam"`` (width ``beam``).
    """
    if not getattr(model, "loaded", False):
        raise ModelStateError("model is not loaded")
    max_len = max_len or model.cfg.max_len
    if max_len < 1:
        raise ContractError("max length must be positive")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    with no_record():
        if mode == "beam":
            lens = np.full(len(feats), feats.shape[1]) if lengths is None else np.asarray(lengths)
            norm = model.cfg.length_norm if length_norm is None else length_norm
            return [beam_search(model, feats[b:b + 1, :lens[b]], beam, max_len, norm, top5)
                    for b in range(len(feats))]
        rng = np.random.default_rng(seed) if mode == "sample" else None
        ctx = model.encode(feats, lengths)
        ro = rollout(model, ctx, mode, rng=rng, max_len=max_len)
    results = []
    for b, words in enumerate(ro.captions()):
        n = int(ro.valid[b].sum())
        lp = [float(ro.logp[t].data[b]) for t in range(n)]
        top = None
        if top5:
            top = [_top5(ro.logits[t].data[b]) for t in range(n)]
        results.append(DecodeResult(words, _word_segments(ro.segments(b), len(words)), float(sum(lp)), lp,
                                    _attention_rows([ro.worker_alpha[t][b] for t in range(n)],
                                                    ro.segment_ids[b], n), top))
    return results


def _top5(logits: np.ndarray) -> list[tuple[int, float]]:
    p = np.exp(logits - logits.max())
    p /= p.sum()
    idx = np.argsort(-p, kind="stable")[:5]
    return [(int(i), float(p[i])) for i in idx]


def _merge(states: list[DecoderState]) -> DecoderState:
    if len(states) == 1:
        return states[0]
    cat = lambda name: Tensor(np.concatenate([getattr(s, name).data for s in states]))
    arr = lambda name: np.concatenate([getattr(s, name) for s in states])
    steps = states[0].step
    return DecoderState(cat("hW"), cat("cW"), cat("hM"), cat("cM"), cat("hI"), cat("goal"),
                        arr("prev"), arr("need_goal"), arr("manager_steps"), arr("finished"),
                        [np.concatenate([s.tokens[t] for s in states]) for t in range(steps)],
                        [np.concatenate([s.boundaries[t] for s in states]) for t in range(steps)])


def beam_search(model: HRLCaptioner, features, k: int, max_len: int, length_norm: bool = False,
                top5: bool = False) -> DecodeResult:
    """Beam search over one video; each hypothesis owns a full decoder state.

    Scores are summed token log-probabilities (optionally length-normalised
    for the final pick). Ties are broken by the token's own log-probability
    and then by token id, which makes width 1 coincide with greedy decoding.
    """
    if k < 1:
        raise ContractError(f"beam width must be >= 1, got {k}")
    ctx1 = model.encode(features)
    live = [Hypothesis(model.init_state(1), 0.0, [], [], [], top5=[] if top5 else None)]
    finished: list[Hypothesis] = []
    V = model.vocab_size
    for t in range(max_len):
        state, so = model.step(_merge([h.state for h in live]),
                               ctx1.rows(np.zeros(len(live), dtype=np.int64)))
        logp = ad.log_softmax(so.logits).data
        cand = (np.array([h.logprob for h in live])[:, None] + logp).reshape(-1)
        order = np.lexsort((np.arange(cand.size), -logp.reshape(-1), -cand))[: 2 * k]
        picked: list[tuple[Hypothesis, int, int]] = []
        n_live = 0
        for rank, idx in enumerate(order):
            row, tok = divmod(int(idx), V)
            if (tok == EOS and rank >= k) or (tok != EOS and n_live >= k):
                continue
            n_live += tok != EOS
            h = live[row]
            seg = int(state.manager_steps[row]) - 1
            hyp = Hypothesis(
                None, float(cand[idx]), h.step_logprobs + [float(logp[row, tok])],
                h.segment_ids + [seg],
                h.attention + [(t, seg, i, float(w)) for i, w in enumerate(so.worker_alpha[row])],
                top5=h.top5 + [_top5(so.logits.data[row])] if top5 else None)
            picked.append((hyp, row, tok))
        merged = model.commit(state.rows([r for _, r, _ in picked]), [tok for _, _, tok in picked],
                              limit=max_len)
        for i, (h, _, _) in enumerate(picked):
            h.state = merged.rows([i])
            h.finished = bool(h.state.finished[0])
        finished += [h for h, _, _ in picked if h.finished]
        live = [h for h, _, _ in picked if not h.finished]
        if not live or len(finished) >= k:
            break
        if not length_norm and finished and \
                max(h.logprob for h in finished) >= max(h.logprob for h in live):
            break
    pool = finished or live
    if length_norm:
        best = max(pool, key=lambda h: h.logprob / len(h.step_logprobs))
    else:
        best = max(pool, key=lambda h: h.logprob)
    n = len(best.step_logprobs)
    words = [int(best.state.tokens[t][0]) for t in range(n)]
    if words and words[-1] == EOS:
        words = words[:-1]
    segs, start, ids = [], 0, best.segment_ids
    for i in range(1, n + 1):
        if i == n or ids[i] != ids[i - 1]:
            segs.append((start, i))
            start = i
    return DecodeResult(words, _word_segments(segs, len(words)), best.logprob, best.step_logprobs,
                        best.attention, best.top5)


# ------------------------------------------------------------------ persistence


def save_model(path, model: HRLCaptioner, itos: list[str] | None = None, extra: dict | None = None) -> None:
    from .checkpoint import save_checkpoint

    meta = {"kind": "model", "model_config": dataclasses.asdict(model.cfg),
            "vocab_size": model.vocab_size, "critic_trained": model.critic_trained,
            "itos": itos, **(extra or {})}
    save_checkpoint(path, model.params.snapshot(), meta)


def load_model(path) -> tuple[HRLCaptioner, dict]:
    from .checkpoint import load_checkpoint

    params, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise ModelStateError(f"{path} does not hold a model")
    model = HRLCaptioner(ModelConfig(**meta["model_config"]), int(meta["vocab_size"]))
    model.params.load(params)
    model.critic_trained = bool(meta.get("critic_trained"))
    return model, meta
