"""Caption metrics: CIDEr-D, BLEU@N and ROUGE-L.

CIDEr-D follows the MS-COCO evaluation code: n = 1..4, tf-idf vectors with
document frequency counted over videos, candidate counts clipped against the
reference, a Gaussian length penalty with sigma = 6, averaged over
references and scaled by 10.
"""
from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import InputError

Tokens = Sequence[str] | Sequence[int]

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")


def tokenize(text: str) -> list[str]:
    return _PUNCT.sub("", text.lower()).split()


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class IdfTable:
    df: dict[tuple, int]
    num_videos: int

    @property
    def log_n(self) -> float:
        return math.log(self.num_videos)

    def idf(self, gram: tuple) -> float:
        # unseen n-grams behave as document frequency 1
        return self.log_n - math.log(max(1, self.df.get(gram, 1)))


def build_idf(references: Iterable[Sequence[Tokens]], max_n: int = 4) -> IdfTable:
    """Document frequencies over videos (each item is one video's references)."""
    df: Counter = Counter()
    count = 0
    for refs in references:
        refs = list(refs)
        if not refs:
            raise InputError("build_idf: a video has no references")
        count += 1
        grams = set()
        for r in refs:
            for n in range(1, max_n + 1):
                grams.update(ngrams(r, n))
        df.update(grams)
    if count == 0:
        raise InputError("build_idf: empty reference corpus")
    return IdfTable(dict(df), count)


@dataclass
class _Vec:
    weights: list[dict]
    norms: list[float]
    length: int


def _vectorize(tokens: Tokens, idf: IdfTable, max_n: int) -> _Vec:
    weights, norms = [], []
    for n in range(1, max_n + 1):
        w = {g: c * idf.idf(g) for g, c in ngrams(tokens, n).items()}
        weights.append(w)
        norms.append(math.sqrt(sum(v * v for v in w.values())))
    return _Vec(weights, norms, len(tokens))


@dataclass
class PreparedRefs:
    """Reference tf-idf vectors computed once and reused across candidates."""

    vecs: list[_Vec]
    idf: IdfTable
    max_n: int = 4

    @classmethod
    def build(cls, references: Sequence[Tokens], idf: IdfTable, max_n: int = 4) -> "PreparedRefs":
        if not references:
            raise InputError("cider_d: need at least one reference")
        return cls([_vectorize(r, idf, max_n) for r in references], idf, max_n)


def cider_d(candidate: Tokens, references, idf: IdfTable | None = None, sigma: float = 6.0,
            max_n: int = 4) -> float:
    """CIDEr-D of one candidate; ``references`` may be a :class:`PreparedRefs`."""
    if not isinstance(references, PreparedRefs):
        references = PreparedRefs.build(references, idf, max_n)
    if len(candidate) == 0:
        return 0.0
    cand = _vectorize(candidate, references.idf, references.max_n)
    total = 0.0
    for ref in references.vecs:
        penalty = math.exp(-((cand.length - ref.length) ** 2) / (2.0 * sigma ** 2))
        for n in range(references.max_n):
            cw, rw = cand.weights[n], ref.weights[n]
            denom = cand.norms[n] * ref.norms[n]
            if denom == 0.0:
                continue
            dot = sum(min(v, rw[g]) * rw[g] for g, v in cw.items() if g in rw)
            total += penalty * dot / denom
    return 10.0 * total / (references.max_n * len(references.vecs))


def _closest_ref_len(c: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def _bleu_counts(candidate, references, max_n):
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand = ngrams(candidate, n)
        best: Counter = Counter()
        for r in references:
            best |= ngrams(r, n)
        matches.append(sum(min(c, best[g]) for g, c in cand.items()))
        totals.append(max(0, len(candidate) - n + 1))
    return matches, totals


def _bleu_from_counts(matches, totals, c_len, r_len, smooth):
    if c_len == 0:
        return 0.0
    logs = []
    for n, (m, t) in enumerate(zip(matches, totals), 1):
        if smooth and n > 1:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        logs.append(math.log(m / t))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(sum(logs) / len(logs))


def bleu(candidate: Tokens, references: Sequence[Tokens], max_n: int = 4, smooth: bool = False) -> float:
    """Sentence BLEU@max_n. ``smooth`` adds one to n>1 counts (for sentence-level rewards)."""
    if not references:
        raise InputError("bleu: need at least one reference")
    m, t = _bleu_counts(candidate, references, max_n)
    return _bleu_from_counts(m, t, len(candidate), _closest_ref_len(len(candidate), references), smooth)


def corpus_bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
                max_n: int = 4) -> float:
    M, T = [0] * max_n, [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        m, t = _bleu_counts(cand, refs, max_n)
        M = [a + b for a, b in zip(M, m)]
        T = [a + b for a, b in zip(T, t)]
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
    return _bleu_from_counts(M, T, c_len, r_len, False)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, references: Sequence[Tokens], beta: float = 1.2) -> float:
    """LCS F-measure; precision and recall are each maximised over references."""
    if not references:
        raise InputError("rouge_l: need at least one reference")
    if len(candidate) == 0:
        return 0.0
    precs, recs = [], []
    for r in references:
        lcs = lcs_length(candidate, r)
        precs.append(lcs / len(candidate))
        recs.append(lcs / len(r) if len(r) else 0.0)
    p, r = max(precs), max(recs)
    if p == 0.0 or r == 0.0:
        return 0.0
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


@dataclass
class CorpusScores:
    cider: float
    bleu: list[float]       # BLEU@1..4
    rouge: float
    per_video: dict = field(default_factory=dict)

    @property
    def bleu4(self) -> float:
        return self.bleu[3]


def score_corpus(candidates: Mapping[str, Tokens], references: Mapping[str, Sequence[Tokens]],
                 idf: IdfTable | None = None) -> CorpusScores:
    """Per-video and aggregate scores; IDF defaults to the scored references."""
    ids = sorted(references)
    missing = [v for v in ids if v not in candidates]
    if missing:
        raise InputError(f"no candidate for video(s) {missing[:5]}")
    idf = idf or build_idf(references[v] for v in ids)
    per = {}
    for v in ids:
        c, refs = candidates[v], references[v]
        per[v] = {"cider": cider_d(c, refs, idf),
                  **{f"bleu{n}": bleu(c, refs, n) for n in range(1, 5)},
                  "rouge": rouge_l(c, refs)}
    cands = [candidates[v] for v in ids]
    refs = [references[v] for v in ids]
    return CorpusScores(
        cider=sum(per[v]["cider"] for v in ids) / len(ids),
        bleu=[corpus_bleu(cands, refs, n) for n in range(1, 5)],
        rouge=sum(per[v]["rouge"] for v in ids) / len(ids),
        per_video=per,
    )
