"""Independent reference implementations used by the tests."""

from __future__ import annotations

from functools import lru_cache

import mpmath

mpmath.mp.dps = 30

# Frozen high-precision values of the importance score at default parameters.
FRESH_SCORE = 0.050000025000012500006
AGE3_SCORE = 0.00474258754267803342
AGE10_TWO_RETRIEVALS_SCORE = 1.35000341478788294858


def score_oracle(age, retrieval_gaps, alpha=0.1, beta=0.9, gamma=1.0, epsilon=1e-6):
    """Score written directly from the textbook form alpha/(e^(g*age) + 1 - eps) + beta*sum 1/(gap + eps)."""
    a, b, g, e = (mpmath.mpf(str(v)) for v in (alpha, beta, gamma, epsilon))
    decay = a / (mpmath.exp(g * age) + 1 - e)
    return decay + b * mpmath.fsum(1 / (gap + e) for gap in retrieval_gaps)


def rouge2_oracle(candidate: list[str], reference: list[str]) -> float:
    """Greedy one-to-one matching of candidate bigram occurrences against reference occurrences."""
    cand = [tuple(candidate[i:i + 2]) for i in range(len(candidate) - 1)]
    if not cand:
        return 0.0
    pool = [tuple(reference[i:i + 2]) for i in range(len(reference) - 1)]
    matched = 0
    for gram in cand:
        if gram in pool:
            pool.remove(gram)
            matched += 1
    return matched / len(cand)


def lcs_oracle(a: list[str], b: list[str]) -> int:
    """Memoized recursion over suffixes."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rougeL_oracle(candidate: list[str], reference: list[str]) -> float:
    if not candidate:
        return 0.0
    return lcs_oracle(candidate, reference) / len(candidate)
