"""CTC loss: log-domain forward-backward with analytic gradients.

``log_probs`` are ``[T, V]`` natural-log scores. The gradient returned is with
respect to those scores treated as free variables; chaining through a
log-softmax is left to the autodiff graph.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError, InfeasibleTarget
from .tensor import Tensor, as_tensor, make_node

NEG = -1e30  # log(0) floor


@dataclass(frozen=True)
class Vocabulary:
    """Text symbols plus a CTC blank that sits after them (``blank_index == len(symbols)``)."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        symbols = tuple(self.symbols)
        object.__setattr__(self, "symbols", symbols)
        if len(set(symbols)) != len(symbols):
            raise ContractError("vocabulary symbols must be unique")
        if any(len(s) != 1 for s in symbols):
            raise ContractError("vocabulary symbols must be single characters")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(symbols)})

    @classmethod
    def english(cls) -> "Vocabulary":
        return cls(tuple(" abcdefghijklmnopqrstuvwxyz'"))

    @property
    def blank_index(self) -> int:
        return len(self.symbols)

    @property
    def size(self) -> int:
        """Number of model outputs, blank included."""
        return len(self.symbols) + 1

    def __len__(self) -> int:
        return self.size

    def encode(self, text: str, utt_id: str | None = None) -> list[int]:
        out = []
        for ch in text:
            try:
                out.append(self._index[ch])
            except KeyError:
                where = f" in utterance {utt_id!r}" if utt_id is not None else ""
                raise DataError(f"character {ch!r} not in vocabulary{where}") from None
        return out

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.symbols[i] for i in ids if i != self.blank_index)


def _logsumexp(*xs: np.ndarray) -> np.ndarray:
    m = xs[0]
    for x in xs[1:]:
        m = np.maximum(m, x)
    acc = np.zeros_like(m)
    for x in xs:
        acc += np.exp(x - m)
    return m + np.log(acc)


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def is_feasible(n_frames: int, target: Sequence[int]) -> bool:
    return n_frames >= min_frames(target)


@dataclass
class CtcLattice:
    ext: np.ndarray  # target with blanks interleaved, length 2L+1
    alpha: np.ndarray  # [T, 2L+1]
    beta: np.ndarray  # [T, 2L+1], includes emission at t
    loss_alpha: float
    loss_beta: float

    def occupancy(self, log_probs: np.ndarray) -> np.ndarray:
        """Posterior of being in each extended state at each frame, ``[T, 2L+1]``."""
        emit = log_probs[:, self.ext]
        return np.exp(self.alpha + self.beta - emit + self.loss_alpha)


def ctc_lattice(log_probs: np.ndarray, target: Sequence[int], blank: int) -> CtcLattice:
    """Fill the alpha and beta tables for a feasible target."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    target = [int(t) for t in target]
    if any(t == blank for t in target):
        raise ContractError("target contains the blank symbol")
    if any(not 0 <= t < V for t in target):
        raise ContractError(f"target symbol out of range for V={V}")
    S = 2 * len(target) + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = target
    # s-2 -> s skip allowed into a label that differs from the previous label
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    emit = lp[:, ext]

    alpha = np.full((T, S), NEG)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        s1 = np.concatenate(([NEG], prev[:-1]))
        s2 = np.where(skip, np.concatenate(([NEG, NEG], prev[:-2]))[:S], NEG)
        alpha[t] = emit[t] + _logsumexp(prev, s1, s2)

    beta = np.full((T, S), NEG)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_fwd = np.zeros(S, dtype=bool)
    skip_fwd[: S - 2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        n1 = np.concatenate((nxt[1:], [NEG]))
        n2 = np.where(skip_fwd, np.concatenate((nxt[2:], [NEG, NEG]))[:S], NEG)
        beta[t] = emit[t] + _logsumexp(nxt, n1, n2)

    end = alpha[T - 1, S - 1] if S == 1 else float(_logsumexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]))
    start = beta[0, 0] if S == 1 else float(_logsumexp(beta[0, 0], beta[0, 1]))
    return CtcLattice(ext, alpha, beta, -float(end), -float(start))


def ctc_loss(log_probs, target: Sequence[int], blank: int) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``log_probs``.

    An infeasible target (too few frames) gives ``(inf, zeros)`` and an
    :class:`InfeasibleTarget` warning.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ContractError(f"log_probs must be [T, V], got shape {lp.shape}")
    if not is_feasible(lp.shape[0], target):
        warnings.warn(InfeasibleTarget(f"{len(target)} labels need {min_frames(target)} frames, have {lp.shape[0]}"))
        return math.inf, np.zeros_like(lp)
    lat = ctc_lattice(lp, target, blank)
    occ = lat.occupancy(lp)
    grad = np.zeros_like(lp)
    for s, k in enumerate(lat.ext):
        grad[:, k] -= occ[:, s]
    return lat.loss_alpha, grad


def collapse(path: Sequence[int], blank: int) -> tuple[int, ...]:
    """Merge repeats, then drop blanks."""
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return tuple(out)


def ctc_loss_bruteforce(log_probs, target: Sequence[int], blank: int) -> float:
    """Reference loss by summing over every one of the V**T frame paths."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    target = tuple(int(t) for t in target)
    terms = [
        sum(lp[t, k] for t, k in enumerate(path))
        for path in itertools.product(range(V), repeat=T)
        if collapse(path, blank) == target
    ]
    if not terms:
        return math.inf
    m = max(terms)
    return -(m + math.log(sum(math.exp(x - m) for x in terms)))


def ctc_loss_batch(
    log_probs: Tensor,
    targets: Sequence[Sequence[int]],
    lengths: Sequence[int],
    blank: int,
) -> tuple[Tensor, int]:
    """Mean per-utterance CTC loss over the feasible utterances of a padded batch.

    ``log_probs`` is ``[B, T, V]``; frames at or beyond ``lengths[b]`` are
    ignored and receive zero gradient. Returns the loss tensor and the number
    of infeasible utterances that were skipped.
    """
    log_probs = as_tensor(log_probs)
    B, T, V = log_probs.shape
    data = log_probs.data
    grad = np.zeros(data.shape, dtype=np.float64)
    losses = []
    skipped = 0
    for b in range(B):
        n = int(lengths[b])
        if not is_feasible(n, targets[b]):
            skipped += 1
            continue
        loss, g = ctc_loss(data[b, :n], targets[b], blank)
        losses.append(loss)
        grad[b, :n] = g
    used = len(losses)
    if used == 0:
        return Tensor(np.asarray(math.inf, dtype=data.dtype)), skipped
    grad /= used
    grad = grad.astype(data.dtype)
    value = np.asarray(sum(losses) / used, dtype=data.dtype)
    return make_node(value, (log_probs,), lambda g: (grad * g,)), skipped
