"""Backoff n-gram language model read from ARPA text."""
from __future__ import annotations

import math
import re
from pathlib import Path
from typing import Sequence

from .errors import FormatError

LN10 = math.log(10.0)
UNK = "<unk>"
BOS = "<s>"
EOS = "</s>"

_COUNT_RE = re.compile(r"^ngram\s+(\d+)\s*=\s*(\d+)$")
_SECTION_RE = re.compile(r"^\\(\d+)-grams:$")


class NGramLM:
    """Log10 probabilities and backoff weights per order.

    ``probs[n]`` maps an n-tuple of words to its log10 probability and
    ``backoffs[n]`` maps the same tuple to its log10 backoff weight (absent
    means 0).
    """

    def __init__(self, order: int, probs: dict[int, dict], backoffs: dict[int, dict], unk_logprob: float = -100.0):
        self.order = order
        self.probs = probs
        self.backoffs = backoffs
        self.unk_logprob = probs.get(1, {}).get((UNK,), unk_logprob)

    def __contains__(self, word: str) -> bool:
        return (word,) in self.probs.get(1, {})

    def logprob(self, word: str, context: Sequence[str] = ()) -> float:
        """log10 P(word | context) with standard backoff."""
        context = tuple(context)[-(self.order - 1) :] if self.order > 1 else ()
        if (word,) not in self.probs.get(1, {}):
            word = UNK
        penalty = 0.0
        while True:
            key = context + (word,)
            p = self.probs.get(len(key), {}).get(key)
            if p is not None:
                return p + penalty
            if not context:
                return self.unk_logprob + penalty
            penalty += self.backoffs.get(len(context), {}).get(context, 0.0)
            context = context[1:]

    def score_words(self, words: Sequence[str], bos: bool = True, eos: bool = True) -> float:
        """Total log10 probability of a word sequence."""
        hist = [BOS] if bos else []
        total = 0.0
        seq = list(words) + ([EOS] if eos else [])
        for w in seq:
            total += self.logprob(w, hist)
            hist.append(w)
        return total


def load_arpa(path: str | Path) -> NGramLM:
    """Parse an ARPA file; structural problems raise :class:`FormatError` with a line number."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot read ARPA file {path}: {exc}") from None

    def fail(lineno: int, msg: str):
        raise FormatError(f"{path}:{lineno}: {msg}")

    i = 0
    while i < len(lines) and lines[i].strip() != "\\data\\":
        if lines[i].strip():
            fail(i + 1, f"expected \\data\\ header, got {lines[i].strip()!r}")
        i += 1
    if i == len(lines):
        fail(i, "missing \\data\\ section")
    i += 1

    counts: dict[int, int] = {}
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        m = _COUNT_RE.match(line)
        if not m:
            break
        counts[int(m.group(1))] = int(m.group(2))
        i += 1
    if not counts:
        fail(i + 1, "no 'ngram N=count' lines in \\data\\ section")
    order = max(counts)
    if sorted(counts) != list(range(1, order + 1)):
        fail(i + 1, f"ngram orders {sorted(counts)} are not contiguous from 1")

    probs: dict[int, dict] = {n: {} for n in counts}
    backoffs: dict[int, dict] = {n: {} for n in counts}
    current = None
    ended = False
    while i < len(lines):
        lineno = i + 1
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line == "\\end\\":
            ended = True
            break
        m = _SECTION_RE.match(line)
        if m:
            n = int(m.group(1))
            if n not in counts:
                fail(lineno, f"section \\{n}-grams: not declared in \\data\\")
            if current is not None and len(probs[current]) != counts[current]:
                fail(lineno, f"{current}-grams: found {len(probs[current])} entries, header says {counts[current]}")
            current = n
            continue
        if line.startswith("\\"):
            fail(lineno, f"unexpected section header {line!r}")
        if current is None:
            fail(lineno, "n-gram entry outside any section")
        parts = line.split()
        if len(parts) not in (current + 1, current + 2):
            fail(lineno, f"expected {current} words plus log-prob (and optional backoff), got {len(parts)} fields")
        try:
            lp = float(parts[0])
            bo = float(parts[current + 1]) if len(parts) == current + 2 else None
        except ValueError:
            fail(lineno, f"non-numeric probability or backoff in {line!r}")
        if lp > 0:
            fail(lineno, f"log10 probability {lp} is positive")
        key = tuple(parts[1 : current + 1])
        probs[current][key] = lp
        if bo is not None:
            backoffs[current][key] = bo
    if not ended:
        fail(len(lines), "missing \\end\\ marker")
    if current is not None and len(probs[current]) != counts[current]:
        fail(len(lines), f"{current}-grams: found {len(probs[current])} entries, header says {counts[current]}")
    missing = [n for n in counts if counts[n] and not probs[n]]
    if missing:
        fail(len(lines), f"sections {missing} declared but absent")
    return NGramLM(order, probs, backoffs)
