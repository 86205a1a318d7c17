"""Word and character error rates."""
from __future__ import annotations

from typing import NamedTuple, Sequence


class EditCounts(NamedTuple):
    distance: int
    substitutions: int
    insertions: int
    deletions: int


class ErrorRate(NamedTuple):
    rate: float
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def edit_counts(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Levenshtein alignment with unit costs, split into S/I/D via backtrace."""
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i][j] = min(d[i - 1][j - 1] + cost, d[i - 1][j] + 1, d[i][j - 1] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(d[n][m], s, ins, dels)


def _rate(ref: Sequence, hyp: Sequence) -> ErrorRate:
    c = edit_counts(ref, hyp)
    return ErrorRate(c.distance / max(1, len(ref)), c.substitutions, c.insertions, c.deletions, len(ref))


def word_error_rate(ref: str, hyp: str) -> ErrorRate:
    """WER as a fraction of reference words (unpacks as ``rate, S, I, D, n_ref``)."""
    return _rate(ref.split(), hyp.split())


def char_error_rate(ref: str, hyp: str) -> ErrorRate:
    return _rate(list(ref), list(hyp))


def corpus_error_rate(pairs: Sequence[tuple[str, str]], unit: str = "word") -> ErrorRate:
    """Pool edits over ``(ref, hyp)`` pairs before dividing."""
    fn = word_error_rate if unit == "word" else char_error_rate
    s = i = d = n = 0
    for ref, hyp in pairs:
        r = fn(ref, hyp)
        s, i, d, n = s + r.substitutions, i + r.insertions, d + r.deletions, n + r.ref_len
    return ErrorRate((s + i + d) / max(1, n), s, i, d, n)
