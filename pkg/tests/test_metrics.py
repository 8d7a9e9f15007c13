import math

import pytest
from hypothesis import given, settings, strategies as st

from hrlcap.errors import InputError
from hrlcap.metrics import (PreparedRefs, bleu, build_idf, cider_d, corpus_bleu, lcs_length, ngrams,
                            rouge_l, score_corpus, tokenize)

from metric_fixtures import BLEU_CASES, CIDER_CASES, LN2, ROUGE_CASES

words = st.lists(st.sampled_from(list("abcdef")), min_size=0, max_size=8)
nonempty = st.lists(st.sampled_from(list("abcdef")), min_size=1, max_size=8)


def test_tokenize_examples():
    assert tokenize("A man, runs.") == ["a", "man", "runs"]
    assert tokenize("") == []
    clean = "a man runs"
    assert tokenize(" ".join(tokenize(clean))) == tokenize(clean)


def test_ngrams_counts():
    assert ngrams("a b a b".split(), 2) == {("a", "b"): 2, ("b", "a"): 1}
    assert ngrams(["a"], 2) == {}


def test_idf_values():
    idf = build_idf([[["a", "b"]], [["a", "c"]]])
    assert idf.idf(("b",)) == pytest.approx(LN2, abs=1e-12)
    assert idf.idf(("a",)) == 0.0
    # unseen n-grams are treated as document frequency 1
    assert idf.idf(("zzz",)) == pytest.approx(LN2, abs=1e-12)


def test_idf_rejects_empty():
    with pytest.raises(InputError):
        build_idf([])
    with pytest.raises(InputError):
        build_idf([[]])


def _corpus(refs, others):
    return build_idf([[tokenize(r) for r in refs], *[[tokenize(o)] for o in others]])


@pytest.mark.parametrize("name,cand,refs,others,expected", CIDER_CASES, ids=[c[0] for c in CIDER_CASES])
def test_cider_fixtures(name, cand, refs, others, expected):
    idf = _corpus(refs, others)
    got = cider_d(tokenize(cand), [tokenize(r) for r in refs], idf)
    assert got == pytest.approx(expected, abs=1e-6)


def test_cider_length_penalty_factor():
    refs = [tokenize("a b c d e f g h i j k l")]
    idf = build_idf([refs, [["z"]]])
    cand = tokenize("a b c d e f")          # length gap 6
    with_penalty = cider_d(cand, refs, idf)
    without = cider_d(cand, refs, idf, sigma=1e9)
    assert with_penalty / without == pytest.approx(math.exp(-0.5), abs=1e-9)


def test_cider_empty_candidate_is_zero():
    idf = build_idf([[["a"]], [["b"]]])
    assert cider_d([], [["a"]], idf) == 0.0


def test_prepared_refs_match_raw():
    refs = [tokenize("a b c"), tokenize("b c d")]
    idf = build_idf([refs, [["a"]]])
    prepared = PreparedRefs.build(refs, idf)
    for cand in (["a", "b"], ["c", "d", "b"], ["b"]):
        assert cider_d(cand, prepared) == cider_d(cand, refs, idf)


@pytest.mark.parametrize("name,cand,refs,n,expected", BLEU_CASES, ids=[c[0] for c in BLEU_CASES])
def test_bleu_fixtures(name, cand, refs, n, expected):
    assert bleu(tokenize(cand), [tokenize(r) for r in refs], n) == pytest.approx(expected, abs=1e-6)


def test_bleu_smoothing_keeps_partial_matches_positive():
    cand, refs = ["a", "b"], [["a", "c"]]
    assert bleu(cand, refs, 2) == 0.0
    assert bleu(cand, refs, 2, smooth=True) > 0.0


def test_corpus_bleu_identical():
    caps = [["a", "b", "c", "d"], ["e", "f", "g", "h", "i"]]
    assert corpus_bleu(caps, [[c] for c in caps]) == pytest.approx(1.0)


@pytest.mark.parametrize("name,cand,refs,expected", ROUGE_CASES, ids=[c[0] for c in ROUGE_CASES])
def test_rouge_fixtures(name, cand, refs, expected):
    assert rouge_l(tokenize(cand), [tokenize(r) for r in refs]) == pytest.approx(expected, abs=1e-6)


def test_lcs():
    assert lcs_length("abcd", "acbd") == 3
    assert lcs_length("", "abc") == 0


def test_metrics_need_references():
    with pytest.raises(InputError):
        bleu(["a"], [])
    with pytest.raises(InputError):
        rouge_l(["a"], [])


@settings(max_examples=100, deadline=None)
@given(cand=words, refs=st.lists(nonempty, min_size=1, max_size=3), other=nonempty)
def test_metric_ranges(cand, refs, other):
    idf = build_idf([refs, [other]])
    assert 0.0 <= cider_d(cand, refs, idf) <= 10.0 + 1e-9
    assert 0.0 <= bleu(cand, refs) <= 1.0 + 1e-12
    assert 0.0 <= bleu(cand, refs, smooth=True) <= 1.0 + 1e-12
    assert 0.0 <= rouge_l(cand, refs) <= 1.0 + 1e-12


@settings(max_examples=50, deadline=None)
@given(data=st.lists(st.tuples(words, st.lists(nonempty, min_size=1, max_size=2)), min_size=1, max_size=5),
       seed=st.integers(0, 1000))
def test_corpus_scores_invariant_to_video_order(data, seed):
    import random

    cands = {f"v{i}": c for i, (c, _) in enumerate(data)}
    refs = {f"v{i}": r for i, (_, r) in enumerate(data)}
    keys = list(refs)
    random.Random(seed).shuffle(keys)
    a = score_corpus(cands, refs)
    b = score_corpus({k: cands[k] for k in keys}, {k: refs[k] for k in keys})
    assert a.cider == b.cider and a.bleu == b.bleu and a.rouge == b.rouge


def test_score_corpus_missing_candidate():
    with pytest.raises(InputError):
        score_corpus({}, {"v": [["a"]]})
