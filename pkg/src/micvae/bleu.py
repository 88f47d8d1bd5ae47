"""Corpus-level BLEU over whitespace tokens, without smoothing."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def ngram_stats(hypotheses, references, max_n: int = 4):
    """Clipped matches and hypothesis n-gram totals per order, plus lengths."""
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """BLEU in [0, 100] = BP · exp(mean_n log p_n).

    Orders for which the whole hypothesis corpus has no n-grams are left out
    of the mean; any order with n-grams but zero matches gives 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in count")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches, totals, c, r = ngram_stats(hypotheses, references, max_n)
    if c == 0:
        return 0.0
    logs = []
    for m, t in zip(matches, totals):
        if t == 0:
            continue
        if m == 0:
            return 0.0
        logs.append(math.log(m / t))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(sum(logs) / len(logs))
