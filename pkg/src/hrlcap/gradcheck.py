"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, no_record, precision
from .errors import ContractError, NumericError


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def numeric_gradient(fn: Callable[[], Tensor], t: Tensor, step: float,
                     extended: bool = False) -> np.ndarray:
    """Central differences; ``extended`` evaluates ``fn`` in long double."""
    if extended:
        saved = t.data
        t.data = saved.astype(np.longdouble)
        try:
            with precision(np.longdouble):
                return numeric_gradient(fn, t, step).astype(np.float64)
        finally:
            t.data = saved
    flat = t.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = _value(fn)
        flat[i] = orig - step
        fm = _value(fn)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(t.shape)


def _value(fn):
    with no_record():
        v = np.asarray(fn().data).reshape(-1)[0]
    if not np.isfinite(v):
        raise NumericError("function value is not finite")
    return v


def analytic_gradients(fn: Callable[[], Tensor], point: Sequence[Tensor]) -> list[np.ndarray]:
    with Tape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    return [grads.get(t.id, np.zeros_like(t.data)) for t in point]


def finite_difference_check(fn: Callable[[], Tensor], point: Sequence[Tensor],
                            step: float = 1e-5, extended: bool = False) -> float:
    """Max coordinatewise relative error between tape and numeric gradients.

    ``fn`` closes over the tensors in ``point`` (which must require grad) and
    returns a scalar; it must be deterministic. The tape gradient is always
    float64; ``extended`` only raises the precision of the numeric side.
    """
    if step <= 0:
        raise ContractError(f"step must be positive, got {step}")
    point = list(point)
    for t in point:
        if not t.requires_grad:
            raise ContractError(f"{t!r} does not require grad")
    worst = 0.0
    for t, g in zip(point, analytic_gradients(fn, point)):
        num = numeric_gradient(fn, t, step, extended)
        if g.size:
            worst = max(worst, float(relative_error(g, num).max()))
    return worst


# ---------------------------------------------------------------- the suite


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # a fixed random projection turns any output into a scalar with a generic gradient
    from . import autodiff as ad
    return ad.sum_(ad.mul(out, Tensor(w)))


def primitive_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, scalar fn, point) for every differentiable primitive."""
    from . import autodiff as ad

    rng = np.random.default_rng(seed)

    def p(*shape, positive=False):
        x = rng.normal(size=shape)
        return ad.parameter(np.abs(x) + 0.5 if positive else x)

    def case(name, make, *point):
        out = make()
        w = rng.normal(size=out.shape)
        return name, (lambda: _weighted(make(), w)), list(point)

    a, b, c = p(3, 4), p(3, 4), p(4)
    m1, m2, v = p(2, 3, 4), p(4, 5), p(4)
    cat_a, cat_b = p(2, 3), p(2, 2)
    s1, s2 = p(2, 3), p(2, 3)
    pos = p(3, 4, positive=True)
    table = p(6, 3)
    ids = rng.integers(0, 6, size=(2, 3))
    picked = p(4, 5)
    pick_ids = rng.integers(0, 5, size=4)
    return [
        case("add", lambda: ad.add(a, b), a, b),
        case("add_broadcast", lambda: ad.add(a, c), a, c),
        case("sub", lambda: ad.sub(a, c), a, c),
        case("neg", lambda: ad.neg(a), a),
        case("mul", lambda: ad.mul(a, b), a, b),
        case("mul_broadcast", lambda: ad.mul(a, c), a, c),
        case("scale", lambda: ad.scale(a, -1.7), a),
        case("matmul", lambda: ad.matmul(m1, m2), m1, m2),
        case("matmul_vector", lambda: ad.matmul(m1, v), m1, v),
        case("concat", lambda: ad.concat([cat_a, cat_b], axis=-1), cat_a, cat_b),
        case("stack", lambda: ad.stack([s1, s2], axis=1), s1, s2),
        case("reshape", lambda: ad.reshape(a, (2, 6)), a),
        case("tanh", lambda: ad.tanh(a), a),
        case("sigmoid", lambda: ad.sigmoid(a), a),
        case("log_sigmoid", lambda: ad.log_sigmoid(a), a),
        case("exp", lambda: ad.exp(a), a),
        case("log", lambda: ad.log(pos), pos),
        case("softmax", lambda: ad.softmax(a), a),
        case("log_softmax", lambda: ad.log_softmax(a), a),
        case("embedding", lambda: ad.embedding(table, ids), table),
        case("slice", lambda: ad.slice_(m1, (slice(None), 1, slice(1, 3))), m1),
        case("pick", lambda: ad.pick(picked, pick_ids), picked),
        case("sum_axis", lambda: ad.sum_(m1, axis=1), m1),
        case("mean", lambda: ad.mean(a), a),
    ]


def tiny_model_case(seed: int = 0):
    """Full unrolled cross-entropy loss of a small captioner (dims <= 8, 4 frames, 5 steps)."""
    from .agent import EOS, HRLCaptioner, rollout
    from .config import ModelConfig

    cfg = ModelConfig(feat_dim=5, proj_dim=4, enc_low=3, enc_high=5, worker_hidden=6, word_emb=4,
                      out_hidden=5, manager_hidden=5, goal_dim=3, critic_hidden=3, critic_emb=3,
                      dropout=0.0, max_len=5)
    model = HRLCaptioner(cfg, vocab_size=8, seed=seed)
    # spread the weights so the check exercises non-saturated, non-linear regions
    rng = np.random.default_rng(seed + 1)
    for t in model.params.values():
        t.data = rng.uniform(-1.0, 1.0, size=t.shape)
    feats = rng.normal(size=(2, 4, 5))
    lengths = np.array([4, 3])
    targets = np.array([[4, 5, 6, 7, EOS], [5, 4, EOS, 0, 0]])
    bounds = np.array([[0, 1, 0, 0, 1], [1, 0, 1, 0, 0]])

    def loss():
        from .training import policy_gradient_loss
        ctx = model.encode(feats, lengths)
        ro = rollout(model, ctx, "teacher", targets=targets, boundaries=bounds)
        return policy_gradient_loss(ro.logp, ro.valid)

    point = [t for k, t in model.params.items() if not k.startswith("critic.")]
    return loss, point


def run_suite(seed: int = 0, step: float = 1e-5, extended: bool = True) -> dict[str, float]:
    """Max relative error per case: every primitive plus the tiny model's loss."""
    out = {name: finite_difference_check(fn, pt, step, extended)
           for name, fn, pt in primitive_cases(seed)}
    fn, pt = tiny_model_case(seed)
    out["tiny_model_xe"] = finite_difference_check(fn, pt, step, extended)
    return out
