"""Audio I/O, log-mel features and spectrogram/waveform augmentation."""
from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, FormatError

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ContractError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    values: np.ndarray  # [F, T]
    frame_shift: float = 0.01
    mean: np.ndarray | None = None  # per-feature stats removed by normalization
    std: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(values, self.frame_shift, self.mean, self.std)


def _width_range(w) -> tuple[int, int]:
    if isinstance(w, (tuple, list)):
        lo, hi = int(w[0]), int(w[1])
    else:
        lo, hi = 0, int(w)
    if not 0 <= lo <= hi:
        raise ContractError(f"bad width range {w!r}")
    return lo, hi


@dataclass
class AugmentSpec:
    """Augmentation policy.

    Widths are either a maximum (sampled uniformly from ``0..max``) or an
    inclusive ``(min, max)`` pair.
    """

    speed_factors: tuple[float, ...] = (1.0,)
    freq_masks: int = 0
    freq_width: int | tuple[int, int] = 15
    time_masks: int = 0
    time_width: int | tuple[int, int] = 25
    cutout_rects: int = 0
    cutout_freq: int | tuple[int, int] = 10
    cutout_time: int | tuple[int, int] = 20
    seed: int = 0

    def __post_init__(self):
        self.speed_factors = tuple(float(f) for f in self.speed_factors)
        for f in self.speed_factors:
            if not 0.8 <= f <= 1.25:
                raise ContractError(f"speed factor {f} outside [0.8, 1.25]")
        for n in ("freq_masks", "time_masks", "cutout_rects"):
            if getattr(self, n) < 0:
                raise ContractError(f"{n} must be >= 0")
        for n in ("freq_width", "time_width", "cutout_freq", "cutout_time"):
            _width_range(getattr(self, n))

    @property
    def is_identity(self) -> bool:
        return self.speed_factors in ((), (1.0,)) and not (self.freq_masks or self.time_masks or self.cutout_rects)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown augment keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------


def load_wav(path: str | Path) -> AudioClip:
    """Read a mono 16-bit PCM WAV file, scaling samples by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n = w.getnframes()
            if channels != 1:
                raise FormatError(f"{path}: channels={channels}, expected mono")
            if width != 2:
                raise FormatError(f"{path}: sample_width={8 * width} bits, expected 16")
            raw = w.readframes(n)
    except wave.Error as exc:
        raise FormatError(f"{path}: {exc}") from None
    except EOFError:
        raise FormatError(f"{path}: truncated header") from None
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if len(raw) != 2 * n:
        raise FormatError(f"{path}: data chunk truncated ({len(raw) // 2} of {n} samples)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


def read_manifest(path: str | Path) -> list[dict]:
    """JSON-lines manifest; relative audio paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        missing = {"audio_filepath", "text"} - set(entry)
        if missing:
            raise DataError(f"{path}:{lineno}: missing keys {sorted(missing)}")
        audio = Path(entry["audio_filepath"])
        if not audio.is_absolute():
            audio = path.parent / audio
        entry = dict(entry, audio_filepath=str(audio))
        entry.setdefault("id", audio.stem)
        entries.append(entry)
    return entries


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges(n_mels: int, fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """``n_mels + 2`` frequencies (Hz): filter i rises from edge i, peaks at i+1, falls to i+2."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters ``[n_mels, n_fft // 2 + 1]`` on the HTK mel scale."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_edges(n_mels, fmin, fmax)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def num_frames(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


def log_mel(
    clip: AudioClip,
    win: float = 0.02,
    hop: float = 0.01,
    n_mels: int = 64,
    normalize: bool = True,
) -> FeatureMatrix:
    """Hann-windowed magnitude spectrum -> mel filterbank -> natural log -> per-feature normalization.

    Frame ``t`` is centred on sample ``t * hop + hop / 2``; edges are reflect
    padded, giving ``ceil(N / hop)`` frames.
    """
    if clip.sample_rate != SAMPLE_RATE:
        raise ContractError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    x = clip.samples
    if x.size == 0:
        raise ContractError("cannot extract features from an empty clip")
    win_n = int(round(win * clip.sample_rate))
    hop_n = int(round(hop * clip.sample_rate))
    n_fft = 1 << (win_n - 1).bit_length()
    T = num_frames(x.size, hop_n)
    left = (win_n - hop_n) // 2
    right = (T - 1) * hop_n + win_n - x.size - left
    xp = np.pad(x, (left, max(right, 0)), mode="reflect" if x.size > 1 else "edge")
    idx = np.arange(T)[:, None] * hop_n + np.arange(win_n)[None, :]
    frames = xp[idx] * np.hanning(win_n + 1)[:-1][None, :]
    mag = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    fb = mel_filterbank(n_mels, n_fft, clip.sample_rate)
    feats = np.log(np.maximum(mag @ fb.T, LOG_FLOOR)).T  # [F, T]
    if not normalize:
        return FeatureMatrix(feats, hop)
    mean = feats.mean(axis=1, keepdims=True)
    std = np.sqrt(feats.var(axis=1, keepdims=True) + LOG_FLOOR)
    return FeatureMatrix((feats - mean) / std, hop, mean[:, 0], std[:, 0])


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def speed_perturb(clip: AudioClip, factor: float) -> AudioClip:
    """Resample by linear interpolation to ``round(N / factor)`` samples (tempo and pitch scale by ``factor``)."""
    if not 0.8 <= factor <= 1.25:
        raise ContractError(f"speed factor {factor} outside [0.8, 1.25]")
    if factor == 1.0:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    n = clip.samples.size
    n_out = int(np.floor(n / factor + 0.5))
    pos = np.arange(n_out) * factor
    return AudioClip(np.interp(pos, np.arange(n), clip.samples), clip.sample_rate)


def _draw_band(rng: np.random.Generator, extent: int, width) -> tuple[int, int]:
    lo, hi = _width_range(width)
    hi = min(hi, extent)
    lo = min(lo, hi)
    w = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, extent - w + 1))
    return start, w


def spec_augment(fm: FeatureMatrix, spec: AugmentSpec, rng: np.random.Generator | None = None) -> FeatureMatrix:
    """Zero ``freq_masks`` full-length frequency bands, then ``time_masks`` full-height time bands."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    out = fm.values.copy()
    F, T = out.shape
    for _ in range(spec.freq_masks):
        f0, w = _draw_band(rng, F, spec.freq_width)
        out[f0 : f0 + w, :] = 0.0
    for _ in range(spec.time_masks):
        t0, w = _draw_band(rng, T, spec.time_width)
        out[:, t0 : t0 + w] = 0.0
    return fm.with_values(out)


def spec_cutout(fm: FeatureMatrix, spec: AugmentSpec, rng: np.random.Generator | None = None) -> FeatureMatrix:
    """Zero ``cutout_rects`` random rectangles."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    out = fm.values.copy()
    F, T = out.shape
    for _ in range(spec.cutout_rects):
        f0, fw = _draw_band(rng, F, spec.cutout_freq)
        t0, tw = _draw_band(rng, T, spec.cutout_time)
        out[f0 : f0 + fw, t0 : t0 + tw] = 0.0
    return fm.with_values(out)


def augment_features(clip: AudioClip, spec: AugmentSpec | None, rng: np.random.Generator, n_mels: int = 64) -> FeatureMatrix:
    """Full training-time pipeline: speed perturbation, features, SpecAugment, cutout."""
    if spec is None or spec.is_identity:
        return log_mel(clip, n_mels=n_mels)
    factors = spec.speed_factors or (1.0,)
    factor = factors[int(rng.integers(len(factors)))]
    fm = log_mel(speed_perturb(clip, factor), n_mels=n_mels)
    fm = spec_augment(fm, spec, rng)
    return spec_cutout(fm, spec, rng)
