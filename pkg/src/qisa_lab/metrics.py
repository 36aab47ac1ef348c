"""Edit-distance text metrics: character and word error rates."""

from __future__ import annotations

from .errors import ContractError


def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two sequences (two-row DP)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        curr = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            curr[j] = min(prev[j] + 1, curr[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = curr
    return prev[len(b)]


def cer(reference: str, hypothesis: str) -> float:
    """Character error rate: edit distance / reference length (may exceed 1)."""
    if not reference:
        raise ContractError("reference text must be non-empty")
    return levenshtein(reference, hypothesis) / len(reference)


def wer(reference: str, hypothesis: str) -> float:
    """Word error rate over whitespace-delimited words (may exceed 1)."""
    ref_words = reference.split()
    if not ref_words:
        raise ContractError("reference text must contain at least one word")
    return levenshtein(ref_words, hypothesis.split()) / len(ref_words)
