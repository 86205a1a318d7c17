"""Synthetic tone corpus for smoke-testing the training loop.

Every letter is rendered as a short sine tone at a frequency sitting on its own
mel-filter centre, letters are separated by brief silences and words by
longer ones. A small model can memorize such a corpus in a few hundred steps.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .frontend import SAMPLE_RATE, AudioClip, mel_edges, write_wav

WORDS = ("red", "cat", "sun", "big", "dog", "hot", "tin", "map", "fox", "cup")


def letter_frequencies(letters: str, n_mels: int = 64, first_bin: int = 4, spacing: int = 3) -> dict[str, float]:
    centres = mel_edges(n_mels)[1:-1]
    if first_bin + spacing * (len(letters) - 1) >= n_mels:
        raise ValueError("too many letters for the mel resolution")
    return {ch: float(centres[first_bin + spacing * i]) for i, ch in enumerate(letters)}


def render(
    text: str,
    freqs: dict[str, float],
    rng: np.random.Generator,
    letter: float = 0.06,
    gap: float = 0.02,
    space: float = 0.08,
    edge: float = 0.05,
    noise: float = 1e-3,
) -> AudioClip:
    sr = SAMPLE_RATE
    parts = [np.zeros(int(edge * sr))]
    for ch in text:
        if ch == " ":
            parts.append(np.zeros(int(space * sr)))
            continue
        n = int(letter * sr)
        t = np.arange(n) / sr
        ramp = np.minimum(1.0, np.minimum(np.arange(n), np.arange(n)[::-1]) / 40.0)
        parts.append(0.5 * ramp * np.sin(2 * np.pi * freqs[ch] * t))
        parts.append(np.zeros(int(gap * sr)))
    parts.append(np.zeros(int(edge * sr)))
    x = np.concatenate(parts)
    x += noise * rng.standard_normal(x.size)
    return AudioClip(x, sr)


def make_sentences(n: int, seed: int, words=WORDS, length: int = 3) -> list[str]:
    rng = np.random.default_rng(seed)
    out: list[str] = []
    while len(out) < n:
        s = " ".join(rng.choice(words, size=length, replace=False))
        if s not in out:
            out.append(s)
    return out


def make_tone_corpus(out_dir: str | Path, n: int = 10, seed: int = 0) -> Path:
    """Write ``n`` WAV files plus ``manifest.jsonl`` into ``out_dir``; return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    letters = "".join(sorted(set("".join(WORDS))))
    freqs = letter_frequencies(letters)
    rng = np.random.default_rng([seed, 7])
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as f:
        for i, text in enumerate(make_sentences(n, seed)):
            clip = render(text, freqs, rng)
            name = f"utt{i:03d}.wav"
            write_wav(out_dir / name, clip)
            f.write(json.dumps({"audio_filepath": name, "text": text, "duration": round(clip.duration, 4)}) + "\n")
    return manifest
