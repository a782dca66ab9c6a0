"""Deterministic toy corpus in the PA protocol format.

Every subsidiary attribute leaves its own acoustic signature on the rendered
waveform, scaled by a per-category strength:

* room size           -> fundamental-frequency band of a harmonic source
* reverberation       -> length of an exponentially decaying noise tail
* talker-to-ASV       -> overall amplitude
* attacker-to-talker  -> level of additive broadband noise (spoof only)
* replay quality      -> low-pass cutoff of the replay chain (spoof only)

Spoof trials also carry a fixed low-frequency hum, the replay artifact that
makes bona fide vs spoof learnable independently of all five attributes.
"""

from __future__ import annotations

import itertools
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from .corpus import (
    ATTACK_LEVELS,
    ENV_LEVELS,
    AttackConfig,
    EnvConfig,
    Key,
    SubsidiaryCategory,
    TrialEntry,
    format_protocol_line,
    load_corpus,
)
from .features import SAMPLE_RATE, Waveform, write_waveform

PROTOCOL_NAME = "protocol.txt"
AUDIO_DIR = "wav"

MAX_HARMONIC_HZ = 7000.0
ARTIFACT_HZ = 40.0
SOURCE_RMS = 0.1
ACTIVE_FRACTION = 0.75  # source is silent over the last quarter so reverb tails show


def _default_strengths() -> dict[str, float]:
    return {c.value: 1.0 for c in SubsidiaryCategory}


@dataclass(frozen=True)
class SynthSpec:
    n_per_cell: int = 2
    duration: float = 0.8
    attribute_strengths: dict[str, float] = field(default_factory=_default_strengths)
    seed: int = 0
    sample_rate: int = SAMPLE_RATE
    artifact_level: float = 0.3
    n_speakers: int = 4

    def __post_init__(self):
        if self.n_per_cell < 1:
            raise ValueError("n_per_cell must be positive")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"synthetic audio is rendered at {SAMPLE_RATE} Hz")
        if self.duration * self.sample_rate < 800:
            raise ValueError("duration shorter than one analysis window")
        unknown = set(self.attribute_strengths) - {c.value for c in SubsidiaryCategory}
        if unknown:
            raise ValueError(f"unknown attribute strengths: {sorted(unknown)}")

    def strength(self, category: SubsidiaryCategory) -> float:
        return float(self.attribute_strengths.get(category.value, 1.0))


# Level -> physical parameter. ``s`` is the category strength, ``lvl`` in {0, 1, 2}.
def fundamental_hz(lvl: int, s: float) -> float:
    return 150.0 * 1.5 ** (s * lvl)


def decay_time(lvl: int, s: float) -> float:
    """T60 of the reverberant tail in seconds."""
    return 0.05 * 4.0 ** (s * lvl)


def talker_gain(lvl: int, s: float) -> float:
    return 0.5 * 2.0 ** (-s * lvl)


def noise_snr_db(lvl: int, s: float) -> float:
    return 45.0 - 10.0 * s * lvl


def lowpass_cutoff_hz(lvl: int, s: float) -> float:
    return 6500.0 * 0.68 ** (s * lvl)


def trial_cells() -> list[tuple[EnvConfig, AttackConfig | None]]:
    """All (environment, replay) cells: 27 bona-fide cells then 243 spoof cells per environment."""
    cells = []
    for env_code in itertools.product(ENV_LEVELS, repeat=3):
        env = EnvConfig(*env_code)
        cells.append((env, None))
        for attack_code in itertools.product(ATTACK_LEVELS, repeat=2):
            cells.append((env, AttackConfig(*attack_code)))
    return cells


def _harmonic_source(rng: np.random.Generator, f0: float, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    n_harm = int(MAX_HARMONIC_HZ // f0)
    k = np.arange(1, n_harm + 1)
    # two random formant bumps give per-utterance spectral nuisance
    formants = rng.uniform([400.0, 1200.0], [900.0, 2800.0])
    envelope = 1.0 + 1.5 * np.exp(-0.5 * ((k[:, None] * f0 - formants) / 250.0) ** 2).sum(axis=1)
    amps = envelope * k ** -0.5
    phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    x = (amps[:, None] * np.sin(2 * np.pi * f0 * k[:, None] * t + phases[:, None])).sum(axis=0)

    # syllable-like on/off envelope over the active region, silent afterwards
    active = int(ACTIVE_FRACTION * n)
    n_syll = int(rng.integers(2, 5))
    edges = np.sort(rng.uniform(0, active, size=2 * n_syll - 2)).astype(int)
    bounds = np.concatenate([[0], edges, [active]]).reshape(-1, 2)
    bounds[-1, 0] = min(bounds[-1, 0], active - int(0.15 * sr))  # final syllable runs into the offset
    gate = np.zeros(n)
    ramp = int(0.01 * sr)
    for start, stop in bounds:
        if stop - start <= 2 * ramp:
            continue
        seg = np.ones(stop - start)
        win = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        seg[:ramp] = win
        seg[-ramp:] = win[::-1]
        gate[start:stop] = seg
    if not gate.any():
        gate[:active] = 1.0
    x = x * gate
    rms = np.sqrt(np.mean(x[:active] ** 2))
    return x * (SOURCE_RMS / rms)


def _reverb(rng: np.random.Generator, x: np.ndarray, t60: float, sr: int) -> np.ndarray:
    n_tail = int(min(1.5 * t60, 1.0) * sr)
    t = np.arange(1, n_tail + 1) / sr
    tail = rng.standard_normal(n_tail) * np.exp(-6.91 * t / t60)
    tail *= np.sqrt(0.3 / np.sum(tail ** 2))  # reverberant energy fixed, only decay length varies
    rir = np.concatenate([[1.0], tail])
    return fftconvolve(x, rir)[: len(x)]


def render_utterance(env: EnvConfig, attack: AttackConfig | None, spec: SynthSpec,
                     rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    n = int(round(spec.duration * sr))
    level = {c: (ENV_LEVELS if not c.is_replay else ATTACK_LEVELS) for c in SubsidiaryCategory}

    def lvl(category: SubsidiaryCategory, config) -> int:
        return level[category].index(getattr(config, category.value))

    f0 = fundamental_hz(lvl(SubsidiaryCategory.ROOM_SIZE, env), spec.strength(SubsidiaryCategory.ROOM_SIZE))
    x = _harmonic_source(rng, f0 * rng.uniform(0.95, 1.05), n, sr)

    if attack is not None:
        cutoff = lowpass_cutoff_hz(lvl(SubsidiaryCategory.REPLAY_QUALITY, attack),
                                   spec.strength(SubsidiaryCategory.REPLAY_QUALITY))
        x = sosfilt(butter(8, cutoff, fs=sr, output="sos"), x)
        snr = noise_snr_db(lvl(SubsidiaryCategory.ATTACKER_TO_TALKER, attack),
                           spec.strength(SubsidiaryCategory.ATTACKER_TO_TALKER))
        x = x + rng.standard_normal(n) * SOURCE_RMS * 10 ** (-snr / 20)
        t = np.arange(n) / sr
        x = x + spec.artifact_level * SOURCE_RMS * np.sqrt(2) * np.sin(2 * np.pi * ARTIFACT_HZ * t)

    t60 = decay_time(lvl(SubsidiaryCategory.REVERBERATION, env), spec.strength(SubsidiaryCategory.REVERBERATION))
    x = _reverb(rng, x, t60, sr)
    x = x * talker_gain(lvl(SubsidiaryCategory.TALKER_TO_ASV, env), spec.strength(SubsidiaryCategory.TALKER_TO_ASV))
    x = x * rng.uniform(0.94, 1.06)  # ~0.5 dB loudness jitter
    return np.clip(x, -1.0, 32767 / 32768)


def synth_corpus(spec: SynthSpec, out_dir: str | os.PathLike, split: str = "train") -> Path:
    """Render the toy corpus under ``out_dir`` and return the protocol path.

    Writes ``protocol.txt`` plus one 16-bit WAV per trial in ``wav/``. Output
    is a pure function of ``(spec, split)``.
    """
    out = Path(out_dir)
    audio_dir = out / AUDIO_DIR
    audio_dir.mkdir(parents=True, exist_ok=True)
    split_code = zlib.crc32(split.encode("utf-8"))
    prefix = f"SYN_{split[:1].upper()}"
    lines = []
    index = 0
    for env, attack in trial_cells():
        for _ in range(spec.n_per_cell):
            rng = np.random.default_rng([spec.seed, split_code, index])
            samples = render_utterance(env, attack, spec, rng)
            utt = f"{prefix}_{index:07d}"
            speaker = f"SYN_{index % spec.n_speakers + 1:04d}"
            key = Key.SPOOF if attack is not None else Key.BONA_FIDE
            write_waveform(audio_dir / f"{utt}.wav", Waveform(samples, spec.sample_rate))
            lines.append(format_protocol_line(TrialEntry(speaker, utt, env, attack, key)))
            index += 1
    protocol = out / PROTOCOL_NAME
    protocol.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return protocol


def load_synth_corpus(out_dir: str | os.PathLike) -> list[TrialEntry]:
    out = Path(out_dir)
    return load_corpus(out / PROTOCOL_NAME, out / AUDIO_DIR)


# -- oracle features: hand-crafted measurements used to sanity check the corpus


def _band_energy(power: np.ndarray, freqs: np.ndarray, lo: float, hi: float) -> float:
    return float(power[(freqs >= lo) & (freqs < hi)].sum()) + 1e-20


def oracle_features(samples: np.ndarray, sr: int = SAMPLE_RATE) -> dict[str, float]:
    """Direct signal measurements, one group per attribute."""
    x = np.asarray(samples, dtype=np.float64)
    n = len(x)
    offset = int(ACTIVE_FRACTION * n)
    active = x[:offset]

    spectrum = np.abs(np.fft.rfft(active, n=8 * sr))
    freqs = np.fft.rfftfreq(8 * sr, 1 / sr)
    power = spectrum ** 2

    # biased autocorrelation favours the true period over its multiples
    acf = np.fft.irfft(np.abs(np.fft.rfft(active, n=2 * len(active))) ** 2)[:len(active)]
    lags = np.arange(int(sr / 450), int(sr / 100) + 1)
    f0 = sr / lags[int(np.argmax(acf[lags]))]

    # tail energy in the source band less the white-noise floor, which is read off
    # 7.3-8 kHz over the whole utterance (the source has no harmonics there); the
    # artifact hum sits below the band
    full = np.abs(np.fft.rfft(x)) ** 2
    full_f = np.fft.rfftfreq(n, 1 / sr)
    floor_density = full[(full_f >= 7300) & (full_f < 8000)].mean() / n

    def band_power(segment: np.ndarray) -> float:
        p = np.abs(np.fft.rfft(segment)) ** 2 / len(segment)
        f = np.fft.rfftfreq(len(segment), 1 / sr)
        band = (f >= 100) & (f < 7000)
        return max(p[band].sum() - floor_density * band.sum(), 0.0)

    ref = band_power(x[offset - int(0.1 * sr):offset]) + 1e-20
    tail = max(band_power(x[offset + int(0.02 * sr):offset + int(0.12 * sr)]), 1e-5 * ref)

    mid = _band_energy(power, freqs, 500, 2500)
    return {
        "log_f0": float(np.log(f0)),
        "tail_db": float(10 * np.log10(tail / ref)),
        "log_rms": float(0.5 * np.log(np.mean(active ** 2) + 1e-20)),
        "noise_db": float(10 * np.log10(_band_energy(power, freqs, 7300, 8000) / power.sum())),
        "band_4k_db": float(10 * np.log10(_band_energy(power, freqs, 3600, 4200) / mid)),
        "band_6k_db": float(10 * np.log10(_band_energy(power, freqs, 5000, 6200) / mid)),
    }
