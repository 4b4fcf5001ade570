"""Token-level BLEU-4 on whitespace tokens."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

MAX_ORDER = 4


@dataclass(frozen=True)
class BleuReport:
    score: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __float__(self) -> float:
        return self.score

    def __str__(self) -> str:
        prec = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return f"BLEU = {self.score:.2f} {prec} (BP={self.brevity_penalty:.3f} hyp_len={self.hyp_len} ref_len={self.ref_len})"


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _stats(hyp: Sequence[str], ref: Sequence[str]) -> tuple[list[int], list[int]]:
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        h, r = ngram_counts(hyp, n), ngram_counts(ref, n)
        matches.append(sum(min(c, r[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return matches, totals


def corpus_bleu(hyps: Sequence[str], refs: Sequence[str]) -> BleuReport:
    """Corpus BLEU-4: clipped n-gram precisions pooled over lines, geometric mean, brevity penalty.

    No smoothing: any order with zero matches (or no hypothesis n-grams) gives 0.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"hypothesis and reference line counts differ: {len(hyps)} vs {len(refs)}")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        h, r = hyp.split(), ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        m, t = _stats(h, r)
        for i in range(MAX_ORDER):
            matches[i] += m[i]
            totals[i] += t[i]
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    bp = _brevity_penalty(hyp_len, ref_len)
    if hyp_len == 0 or min(precisions) == 0.0:
        return BleuReport(0.0, precisions, bp, hyp_len, ref_len)
    score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(min(score, 100.0), precisions, bp, hyp_len, ref_len)


def _brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    if hyp_len >= ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / hyp_len)


def sentence_bleu(hyp: str, ref: str) -> float:
    """BLEU-4 of one sentence with add-one smoothing on the n >= 2 precisions."""
    h, r = hyp.split(), ref.split()
    if not h:
        return 0.0
    m, t = _stats(h, r)
    if m[0] == 0:
        return 0.0
    logp = math.log(m[0] / t[0]) + sum(math.log((m[i] + 1) / (t[i] + 1)) for i in range(1, MAX_ORDER))
    return min(100.0, 100.0 * _brevity_penalty(len(h), len(r)) * math.exp(logp / MAX_ORDER))
