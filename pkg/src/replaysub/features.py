"""Magnitude spectrograms, training crops, and cached feature files."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import soundfile as sf
from scipy.signal import get_window

SAMPLE_RATE = 16000
WIN_LENGTH = 800  # 50 ms
HOP_LENGTH = 480  # 30 ms
N_FFT = 2048
N_BINS = N_FFT // 2 + 1
CROP_FRAMES = 120

_FEATURE_MAGIC = b"RSPG"


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {self.sample_rate} Hz")
        if np.ndim(self.samples) != 1 or len(self.samples) == 0:
            raise ValueError("waveform must be a non-empty mono sequence")

    def __len__(self):
        return len(self.samples)


def read_waveform(path: str | os.PathLike) -> Waveform:
    """Load a mono 16-bit WAV or FLAC file as floats in [-1, 1)."""
    samples, rate = sf.read(str(path), dtype="float32", always_2d=False)
    if samples.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {samples.shape[1]} channels")
    return Waveform(samples, rate)


def write_waveform(path: str | os.PathLike, wave: Waveform) -> None:
    sf.write(str(path), np.asarray(wave.samples, dtype=np.float32), wave.sample_rate,
             subtype="PCM_16", format="WAV")


def num_frames(n_samples: int) -> int:
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def stft_magnitude(wave: Waveform | np.ndarray) -> np.ndarray:
    """Frame-major magnitude spectrogram of shape (T, 1025).

    50 ms Hann windows zero-padded to a 2048-point transform, 30 ms hop, no
    centering and no normalization.
    """
    samples = wave.samples if isinstance(wave, Waveform) else np.asarray(wave)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or len(samples) < WIN_LENGTH:
        raise ValueError(f"need at least {WIN_LENGTH} samples for one frame, got {len(samples)}")
    frames = np.lib.stride_tricks.sliding_window_view(samples, WIN_LENGTH)[::HOP_LENGTH]
    window = get_window("hann", WIN_LENGTH)
    spec = np.abs(np.fft.rfft(frames * window, n=N_FFT, axis=1))
    return spec.astype(np.float32)


def random_crop(spec: np.ndarray, length: int = CROP_FRAMES,
                seed: int | np.random.Generator | None = None) -> np.ndarray:
    """Contiguous ``length``-frame slice; shorter inputs are tiled cyclically."""
    n = spec.shape[0]
    if n == 0:
        raise ValueError("empty spectrogram")
    if n < length:
        return spec[np.arange(length) % n]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    start = int(rng.integers(0, n - length + 1))
    return spec[start:start + length]


def full_frames(spec: np.ndarray) -> np.ndarray:
    """Inference input: every frame, whatever the utterance length."""
    return spec


def write_feature_file(path: str | os.PathLike, utt_id: str, spec: np.ndarray) -> None:
    spec = np.ascontiguousarray(spec, dtype="<f4")
    if spec.ndim != 2:
        raise ValueError("spectrogram must be 2-D")
    name = utt_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_FEATURE_MAGIC)
        f.write(struct.pack("<I", len(name)))
        f.write(name)
        f.write(struct.pack("<II", *spec.shape))
        f.write(spec.tobytes(order="C"))


def read_feature_file(path: str | os.PathLike) -> tuple[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != _FEATURE_MAGIC:
            raise ValueError(f"{path}: not a spectrogram feature file")
        (name_len,) = struct.unpack("<I", f.read(4))
        utt_id = f.read(name_len).decode("utf-8")
        n_frames, n_bins = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != n_frames * n_bins:
        raise ValueError(f"{path}: truncated feature file")
    return utt_id, data.reshape(n_frames, n_bins).astype(np.float32)


class FeatureBank:
    """Spectrogram lookup by utterance, backed by memory and/or a cache directory."""

    def __init__(self, cache_dir: str | os.PathLike | None = None, in_memory: bool = True):
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.in_memory = in_memory
        self._memory: dict[str, np.ndarray] = {}

    def get(self, entry) -> np.ndarray:
        spec = self._memory.get(entry.utt_id)
        if spec is not None:
            return spec
        cached = self.cache_dir / f"{entry.utt_id}.spec" if self.cache_dir is not None else None
        if cached is not None and cached.exists():
            _, spec = read_feature_file(cached)
        else:
            if entry.audio_path is None:
                raise FileNotFoundError(f"{entry.utt_id}: no audio path")
            spec = stft_magnitude(read_waveform(entry.audio_path))
            if cached is not None:
                write_feature_file(cached, entry.utt_id, spec)
        if self.in_memory:
            self._memory[entry.utt_id] = spec
        return spec
