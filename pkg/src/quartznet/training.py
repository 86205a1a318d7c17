"""NovoGrad, warmup + cosine schedule, batching, the CTC training loop and evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .ctc import Vocabulary, ctc_loss_batch
from .decode import BeamConfig, beam_search, greedy_decode
from .errors import ConfigError, ContractError, DataError, EmptyDataset, NumericError
from .frontend import AudioClip, AugmentSpec, augment_features, load_wav, log_mel
from .lm import NGramLM
from .metrics import char_error_rate, corpus_error_rate, word_error_rate
from .model import AcousticModel, read_checkpoint, save_checkpoint
from .tensor import no_grad

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class NovoGradState:
    beta1: float = 0.95
    beta2: float = 0.5
    eps: float = 1e-8
    weight_decay: float = 0.001
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)  # one scalar per parameter tensor

    def __post_init__(self):
        for n in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, n) < 1.0:
                raise ConfigError(f"{n} must be in [0, 1), got {getattr(self, n)}")


def novograd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], st: NovoGradState, lr: float) -> dict[str, np.ndarray]:
    """One NovoGrad update, in place on ``params``.

    Per tensor: ``v = b2*v + (1-b2)*|g|^2`` (``v = |g|^2`` on the first step),
    ``m = b1*m + g/(sqrt(v)+eps) + wd*w``, ``w -= lr*m``. Non-finite gradients
    abort the step before anything is modified.
    """
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name} at step {st.step + 1}")
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        sq = np.asarray(np.sum(np.square(g, dtype=w.dtype)), dtype=w.dtype)
        if name not in st.v:
            v = sq
        else:
            v = (st.beta2 * st.v[name] + (1 - st.beta2) * sq).astype(w.dtype)
        st.v[name] = v
        ghat = g / (np.sqrt(v) + w.dtype.type(st.eps)) + w.dtype.type(st.weight_decay) * w
        m = st.m.get(name)
        m = ghat if m is None else w.dtype.type(st.beta1) * m + ghat
        st.m[name] = m.astype(w.dtype, copy=False)
        w -= w.dtype.type(lr) * st.m[name]
    st.step += 1
    return params


@dataclass
class ScheduleConfig:
    lr_max: float
    warmup_steps: int
    total_steps: int
    lr_min: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")


def lr_at(step: int, sc: ScheduleConfig) -> float:
    """Linear warmup to ``lr_max`` then cosine annealing to ``lr_min`` at ``total_steps``."""
    if not 0 <= step <= sc.total_steps:
        raise ContractError(f"step {step} outside [0, {sc.total_steps}]")
    if step < sc.warmup_steps:
        return sc.lr_max * step / sc.warmup_steps
    progress = (step - sc.warmup_steps) / (sc.total_steps - sc.warmup_steps)
    return sc.lr_min + 0.5 * (sc.lr_max - sc.lr_min) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    text: str
    audio_filepath: str | None = None
    duration: float | None = None
    clip: AudioClip | None = None
    _features: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_entry(cls, entry) -> "Utterance":
        if isinstance(entry, Utterance):
            return entry
        return cls(
            id=str(entry.get("id", entry.get("audio_filepath"))),
            text=entry["text"],
            audio_filepath=entry.get("audio_filepath"),
            duration=entry.get("duration"),
        )

    def audio(self) -> AudioClip:
        if self.clip is None:
            if self.audio_filepath is None:
                raise DataError(f"utterance {self.id!r} has no audio")
            try:
                self.clip = load_wav(self.audio_filepath)
            except ValueError as exc:
                raise DataError(f"utterance {self.id!r}: {exc}") from None
        return self.clip

    def length_key(self) -> float:
        if self.duration is not None:
            return float(self.duration)
        return self.audio().duration

    def features(self, n_mels: int, augment: AugmentSpec | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
        if augment is None or augment.is_identity:
            if self._features is None or self._features.shape[0] != n_mels:
                self._features = log_mel(self.audio(), n_mels=n_mels).values
            return self._features
        return augment_features(self.audio(), augment, rng, n_mels).values


def as_utterances(data) -> list[Utterance]:
    return [Utterance.from_entry(e) for e in data]


@dataclass
class Batch:
    features: np.ndarray  # [B, F, T], zero padded
    lengths: np.ndarray  # frames per utterance
    targets: list[list[int]]
    texts: list[str]
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def collate(utts: Sequence[Utterance], vocab: Vocabulary, feats: Sequence[np.ndarray], dtype=np.float32) -> Batch:
    F = feats[0].shape[0]
    T = max(f.shape[1] for f in feats)
    out = np.zeros((len(feats), F, T), dtype=dtype)
    for i, f in enumerate(feats):
        out[i, :, : f.shape[1]] = f
    texts = [normalize_text(u.text) for u in utts]
    targets = [vocab.encode(t, u.id) for t, u in zip(texts, utts)]
    return Batch(out, np.array([f.shape[1] for f in feats]), targets, texts, [u.id for u in utts])


def make_batches(
    manifest,
    vocab: Vocabulary,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    augment: AugmentSpec | None = None,
    n_mels: int = 64,
    dtype=np.float32,
) -> Iterator[Batch]:
    """Duration-bucketed, zero-padded batches in a seeded per-epoch order.

    Utterances are sorted by duration and cut into consecutive batches; the
    order of those batches is a permutation drawn from ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    utts = as_utterances(manifest)
    for u in utts:
        vocab.encode(normalize_text(u.text), u.id)
    order = sorted(range(len(utts)), key=lambda i: (utts[i].length_key(), i))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    perm = np.random.default_rng([seed, epoch]).permutation(len(chunks))
    for ci in perm:
        idx = chunks[ci]
        feats = [utts[i].features(n_mels, augment, np.random.default_rng([seed, epoch, i, 1])) for i in idx]
        yield collate([utts[i] for i in idx], vocab, feats, dtype)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainRunConfig:
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    lr: float = 0.05
    warmup_steps: int = 1000
    min_lr: float = 0.0
    beta1: float = 0.95
    beta2: float = 0.5
    eps: float = 1e-8
    weight_decay: float = 0.001
    grad_clip: float | None = 1.0
    checkpoint_every: int = 0
    max_steps: int | None = None
    augment: AugmentSpec | None = None
    init_checkpoint: str | None = None
    reinit_head: bool = False

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentSpec.from_dict(self.augment)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"training: unknown keys {unknown}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"training: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class TrainResult:
    log: list[dict]
    steps: int
    skipped: int
    checkpoints: list[str]
    optimizer: NovoGradState


def _global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def train_step(
    model: AcousticModel,
    batch: Batch,
    st: NovoGradState,
    lr: float,
    grad_clip: float | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, float, int]:
    """Forward, CTC, backward, clip, NovoGrad. Returns ``(loss, grad_norm, skipped)``."""
    model.train()
    model.zero_grad()
    blank = model.cfg.vocabulary.blank_index
    log_probs, out_len = model.forward(batch.features, batch.lengths, rng)
    loss, skipped = ctc_loss_batch(log_probs, batch.targets, out_len, blank)
    if not loss.requires_grad:
        return math.inf, 0.0, skipped
    loss.backward()
    named = dict(model.named_parameters())
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in named.items()}
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {n} at step {st.step + 1}")
    norm = _global_norm(grads)
    if grad_clip is not None and norm > grad_clip:
        scale = grad_clip / norm
        grads = {n: (g * scale).astype(g.dtype) for n, g in grads.items()}
    novograd_step({n: p.data for n, p in named.items()}, grads, st, lr)
    model.zero_grad()
    return float(loss.data), norm, skipped


def _optim_tensors(st: NovoGradState) -> dict[str, np.ndarray]:
    out = {f"optim.m:{n}": a for n, a in st.m.items()}
    out.update({f"optim.v:{n}": np.asarray(a).reshape(1) for n, a in st.v.items()})
    return out


def _restore_optim(st: NovoGradState, tensors: dict[str, np.ndarray], dtype) -> None:
    for key, arr in tensors.items():
        if key.startswith("optim.m:"):
            st.m[key.split(":", 1)[1]] = arr.astype(dtype)
        elif key.startswith("optim.v:"):
            st.v[key.split(":", 1)[1]] = arr.reshape(()).astype(dtype)


def train(
    model: AcousticModel,
    run: TrainRunConfig,
    data,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place on ``data`` (manifest entries or utterances).

    Batches, augmentation and dropout draw from RNGs keyed on ``(seed, epoch)``
    and ``(seed, step)``, so a run resumed from a checkpoint replays exactly.
    Utterances whose transcript cannot fit the output frames are skipped and
    counted.
    """
    vocab = model.cfg.vocabulary
    utts = as_utterances(data)
    if not utts:
        raise EmptyDataset("no utterances to train on")
    steps_per_epoch = math.ceil(len(utts) / run.batch_size)
    total = run.epochs * steps_per_epoch if run.max_steps is None else min(run.max_steps, run.epochs * steps_per_epoch)
    st = NovoGradState(run.beta1, run.beta2, run.eps, run.weight_decay)
    start = 0
    if resume_from is not None:
        header, tensors = read_checkpoint(resume_from)
        model.load_state_dict(tensors)
        _restore_optim(st, tensors, model.dtype)
        start = st.step = int(header["extra"].get("step", 0))
    result = TrainResult([], start, 0, [], st)
    if total == 0 or start >= total:
        return result
    sched = ScheduleConfig(run.lr, min(run.warmup_steps, total - 1), total, run.min_lr)

    log_file = open(log_path, "a" if resume_from else "w") if log_path else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None

    def checkpoint(step: int, name: str) -> None:
        if ckpt_dir is None:
            return
        path = ckpt_dir / name
        save_checkpoint(model, path, {"step": step, "run": _jsonable(run.to_dict())}, _optim_tensors(st))
        result.checkpoints.append(str(path))

    batches: list[Batch] = []
    epoch_loaded = -1
    try:
        for k in range(start, total):
            epoch, pos = divmod(k, steps_per_epoch)
            if epoch != epoch_loaded:
                batches = list(
                    make_batches(utts, vocab, run.batch_size, run.seed, epoch, run.augment, model.cfg.input_features, model.dtype)
                )
                epoch_loaded = epoch
            step = k + 1
            lr = lr_at(step, sched)
            t0 = time.perf_counter()
            loss, norm, skipped = train_step(model, batches[pos], st, lr, run.grad_clip, np.random.default_rng([run.seed, step, 2]))
            result.skipped += skipped
            entry = {"step": step, "epoch": epoch, "lr": lr, "loss": loss, "grad_norm": norm, "skipped": skipped}
            result.log.append(entry)
            if log_file:
                log_file.write(json.dumps(dict(entry, ts=round(time.time(), 3), secs=round(time.perf_counter() - t0, 4))) + "\n")
            if on_step:
                on_step(entry)
            result.steps = step
            if run.checkpoint_every and step % run.checkpoint_every == 0 and step < total:
                checkpoint(step, f"step{step:07d}.qzck")
        checkpoint(result.steps, "final.qzck")
    finally:
        if log_file:
            log_file.close()
    return result


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class DecoderConfig:
    kind: str = "greedy"  # or "beam"
    beam: BeamConfig = field(default_factory=BeamConfig)
    lm: NGramLM | None = None

    def __post_init__(self):
        if self.kind not in ("greedy", "beam"):
            raise ConfigError(f"unknown decoder {self.kind!r}")


def decode_utterance(log_probs: np.ndarray, vocab: Vocabulary, decoder: DecoderConfig) -> str:
    if decoder.kind == "greedy":
        return greedy_decode(log_probs, vocab)
    return beam_search(log_probs, vocab, decoder.lm, decoder.beam)[0].text


def transcribe_features(model: AcousticModel, feats: Sequence[np.ndarray], decoder: DecoderConfig, batch_size: int = 16) -> list[str]:
    model.eval()
    vocab = model.cfg.vocabulary
    out = []
    with no_grad():
        for i in range(0, len(feats), batch_size):
            chunk = feats[i : i + batch_size]
            T = max(f.shape[1] for f in chunk)
            x = np.zeros((len(chunk), chunk[0].shape[0], T), dtype=model.dtype)
            for j, f in enumerate(chunk):
                x[j, :, : f.shape[1]] = f
            lp, lens = model.forward(x, [f.shape[1] for f in chunk])
            for j in range(len(chunk)):
                out.append(decode_utterance(lp.data[j, : lens[j]], vocab, decoder))
    return out


@dataclass
class EvalReport:
    wer: float
    cer: float
    utterances: list[dict]

    def to_dict(self) -> dict:
        return {"wer": self.wer, "cer": self.cer, "utterances": self.utterances}


def score_transcripts(ids: Sequence[str], refs: Sequence[str], hyps: Sequence[str]) -> EvalReport:
    if not refs:
        raise EmptyDataset("nothing to evaluate")
    rows = []
    for uid, ref, hyp in zip(ids, refs, hyps):
        w = word_error_rate(ref, hyp)
        rows.append(
            {
                "id": uid,
                "ref": ref,
                "hyp": hyp,
                "wer": w.rate,
                "substitutions": w.substitutions,
                "insertions": w.insertions,
                "deletions": w.deletions,
                "cer": char_error_rate(ref, hyp).rate,
            }
        )
    pairs = list(zip(refs, hyps))
    return EvalReport(corpus_error_rate(pairs, "word").rate, corpus_error_rate(pairs, "char").rate, rows)


def evaluate(model: AcousticModel, data, decoder: DecoderConfig | None = None) -> EvalReport:
    """Corpus WER/CER (pooled edits over pooled reference length) plus a per-utterance report."""
    utts = as_utterances(data)
    if not utts:
        raise EmptyDataset("evaluation manifest is empty")
    decoder = decoder or DecoderConfig()
    feats = [u.features(model.cfg.input_features) for u in utts]
    hyps = transcribe_features(model, feats, decoder)
    return score_transcripts([u.id for u in utts], [normalize_text(u.text) for u in utts], hyps)
