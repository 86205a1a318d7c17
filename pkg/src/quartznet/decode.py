"""Greedy and prefix-beam CTC decoding with optional word n-gram fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .ctc import Vocabulary, collapse
from .errors import ConfigError
from .lm import BOS, EOS, LN10, NGramLM

_NEG_INF = -math.inf


def _as_array(log_probs) -> np.ndarray:
    data = getattr(log_probs, "data", log_probs)
    return np.asarray(data, dtype=np.float64)


def greedy_decode(log_probs, vocab: Vocabulary) -> str:
    """Per-frame argmax, merge repeats, drop blanks."""
    lp = _as_array(log_probs)
    return vocab.decode(collapse(lp.argmax(axis=1).tolist(), vocab.blank_index))


@dataclass(frozen=True)
class BeamConfig:
    beam_width: int = 2048
    alpha: float = 3.5  # LM weight
    beta: float = 1.5  # word insertion bonus
    n_best: int | None = None

    def __post_init__(self):
        if self.beam_width < 1:
            raise ConfigError(f"beam_width must be >= 1, got {self.beam_width}")


class Hypothesis(NamedTuple):
    text: str
    score: float  # acoustic + alpha * lm + beta * words
    acoustic: float  # natural-log CTC probability of the prefix
    lm: float  # natural-log LM score of the completed words (+ </s>)
    words: int


class _LmState(NamedTuple):
    score: float  # ln
    words: tuple[str, ...]
    partial: str


def _lse(a: float, b: float) -> float:
    if a == _NEG_INF:
        return b
    if b == _NEG_INF:
        return a
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def beam_search(log_probs, vocab: Vocabulary, lm: NGramLM | None = None, bc: BeamConfig = BeamConfig()) -> list[Hypothesis]:
    """Prefix beam search over a ``[T, V]`` log-probability lattice.

    Each prefix keeps its summed blank/non-blank ending mass (used for the
    final ranking) and its best single-path score (used for pruning). With a
    beam of one the search therefore follows the greedy path, and with no
    pruning the summed masses are exact.

    When ``lm`` is given, words are scored as they are completed by a space,
    and the last word plus ``</s>`` are scored before the final ranking.
    Without an LM the scores are purely acoustic and ``alpha``/``beta`` are
    ignored.
    """
    lp = _as_array(log_probs)
    T, V = lp.shape
    blank = vocab.blank_index
    if V != vocab.size:
        raise ConfigError(f"lattice has {V} outputs, vocabulary has {vocab.size}")
    space = vocab.symbols.index(" ") if " " in vocab.symbols else -1
    fuse = lm is not None

    lm_cache: dict[tuple, _LmState] = {(): _LmState(0.0, (), "")}

    def lm_state(prefix: tuple) -> _LmState:
        st = lm_cache.get(prefix)
        if st is not None:
            return st
        parent = lm_state(prefix[:-1])
        k = prefix[-1]
        if k == space:
            if parent.partial:
                gain = LN10 * lm.logprob(parent.partial, (BOS,) + parent.words)
                st = _LmState(parent.score + gain, parent.words + (parent.partial,), "")
            else:
                st = parent
        else:
            st = _LmState(parent.score, parent.words, parent.partial + vocab.symbols[k])
        lm_cache[prefix] = st
        return st

    def bonus(prefix: tuple) -> float:
        if not fuse:
            return 0.0
        st = lm_state(prefix)
        return bc.alpha * st.score + bc.beta * len(st.words)

    # prefix -> [p_blank, p_nonblank, best_blank, best_nonblank] (all ln)
    beams: dict[tuple, list[float]] = {(): [0.0, _NEG_INF, 0.0, _NEG_INF]}
    symbols = [k for k in range(V) if k != blank]
    for t in range(T):
        row = lp[t]
        nxt: dict[tuple, list[float]] = {}

        def slot(prefix):
            s = nxt.get(prefix)
            if s is None:
                s = nxt[prefix] = [_NEG_INF, _NEG_INF, _NEG_INF, _NEG_INF]
            return s

        for prefix, (pb, pnb, vb, vnb) in beams.items():
            total = _lse(pb, pnb)
            best = max(vb, vnb)
            s = slot(prefix)
            s[0] = _lse(s[0], total + row[blank])
            s[2] = max(s[2], best + row[blank])
            last = prefix[-1] if prefix else None
            for k in symbols:
                p = row[k]
                if k == last:
                    s[1] = _lse(s[1], pnb + p)
                    s[3] = max(s[3], vnb + p)
                    ext = slot(prefix + (k,))
                    ext[1] = _lse(ext[1], pb + p)
                    ext[3] = max(ext[3], vb + p)
                else:
                    ext = slot(prefix + (k,))
                    ext[1] = _lse(ext[1], total + p)
                    ext[3] = max(ext[3], best + p)
        if len(nxt) > bc.beam_width:
            ranked = sorted(nxt.items(), key=lambda kv: (-(max(kv[1][2], kv[1][3]) + bonus(kv[0])), kv[0]))
            nxt = dict(ranked[: bc.beam_width])
        beams = nxt

    hyps = []
    for prefix, (pb, pnb, _, _) in beams.items():
        acoustic = _lse(pb, pnb)
        if acoustic == _NEG_INF:
            continue  # unreachable labeling
        if fuse:
            st = lm_state(prefix)
            words = st.words + ((st.partial,) if st.partial else ())
            lm_score = st.score
            if st.partial:
                lm_score += LN10 * lm.logprob(st.partial, (BOS,) + st.words)
            lm_score += LN10 * lm.logprob(EOS, (BOS,) + words)
            score = acoustic + bc.alpha * lm_score + bc.beta * len(words)
        else:
            words = tuple(vocab.decode(prefix).split())
            lm_score = 0.0
            score = acoustic
        hyps.append(Hypothesis(vocab.decode(prefix), score, acoustic, lm_score, len(words)))
    hyps.sort(key=lambda h: (-h.score, h.text))
    return hyps[: bc.n_best or bc.beam_width]
