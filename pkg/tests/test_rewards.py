import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hrlcap.errors import ContractError
from hrlcap.metrics import PreparedRefs, build_idf, cider_d
from hrlcap.rewards import (RewardTrace, delta_reward, discounted_returns, prefix_scores,
                            segment_rewards, token_rewards)

VOCAB = list("abcdefg")
caption = st.lists(st.sampled_from(VOCAB), min_size=1, max_size=12)


def _prepared(refs):
    idf = build_idf([refs, [["x", "y"]], [["a", "z"]]])
    return PreparedRefs.build(refs, idf), idf


def test_delta_from_empty_prefix_is_cider():
    refs = [list("abc")]
    prep, idf = _prepared(refs)
    assert delta_reward([], ["a", "b"], prep) == cider_d(["a", "b"], prep)
    assert delta_reward([], ["a", "b"], refs, idf) == cider_d(["a", "b"], refs, idf)


def test_saturated_ngram_extension_may_be_negative():
    # repeating a word whose clipped count is already used lowers the score
    refs = [list("ab")]
    prep, _ = _prepared(refs)
    assert delta_reward(["a", "b"], ["a"], prep) <= 0.0


@settings(max_examples=100, deadline=None)
@given(cap=caption, refs=st.lists(caption, min_size=1, max_size=3))
def test_token_rewards_telescope(cap, refs):
    prep, _ = _prepared(refs)
    r = token_rewards(cap, prep)
    assert abs(r.sum() - cider_d(cap, prep)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(cap=caption, refs=st.lists(caption, min_size=1, max_size=3), data=st.data())
def test_segment_rewards_telescope(cap, refs, data):
    prep, _ = _prepared(refs)
    n = len(cap)
    cuts = sorted(data.draw(st.sets(st.integers(1, n), max_size=4)) | {n})
    # the last action is EOS, one past the final word
    segs, start = [], 0
    for c in cuts:
        segs.append((start, c))
        start = c
    segs[-1] = (segs[-1][0], n + 1)
    f = segment_rewards(cap, segs, prep)
    assert abs(f.sum() - cider_d(cap, prep)) < 1e-9


def test_token_rewards_pad_eos_with_zero():
    prep, _ = _prepared([list("ab")])
    r = token_rewards(["a", "b"], prep, n_actions=3)
    assert r.shape == (3,) and r[2] == 0.0


def test_prefix_scores_start_at_zero():
    prep, _ = _prepared([list("ab")])
    assert prefix_scores(["a"], prep)[0] == 0.0


def test_returns_examples():
    np.testing.assert_allclose(discounted_returns([1.0, 1.0], 0.95), [1.95, 1.0], atol=1e-15)
    r = [0.3, -0.1, 2.0]
    np.testing.assert_array_equal(discounted_returns(r, 0.0), r)
    assert discounted_returns(r, 1.0)[0] == pytest.approx(sum(r))
    assert discounted_returns([], 0.9).shape == (0,)


def test_returns_reject_bad_gamma():
    with pytest.raises(ContractError):
        discounted_returns([1.0], 1.5)


@settings(max_examples=50, deadline=None)
@given(r=st.lists(st.floats(-5, 5), min_size=1, max_size=10), g=st.floats(0, 1))
def test_returns_recursion(r, g):
    R = discounted_returns(r, g)
    for t in range(len(r) - 1):
        assert R[t] == pytest.approx(r[t] + g * R[t + 1], abs=1e-12)
    assert R[-1] == r[-1]


def test_reward_trace():
    prep, _ = _prepared([list("abcd")])
    tr = RewardTrace.build(list("abcd"), [(0, 2), (2, 5)], prep, 0.95, n_actions=5)
    assert tr.token_rewards.shape == (5,)
    assert tr.segment_rewards.sum() == pytest.approx(tr.token_rewards.sum(), abs=1e-12)
    np.testing.assert_allclose(tr.worker_returns, discounted_returns(tr.token_rewards, 0.95))
