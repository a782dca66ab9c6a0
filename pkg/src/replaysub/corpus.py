"""ASVspoof 2019 PA protocol handling and class-balanced epoch planning.

Protocol lines carry five whitespace-separated fields::

    PA_0079 PA_T_0000001 aab - bonafide
    PA_0079 PA_T_0000002 aaa CB spoof

The third field encodes the acoustic environment (room size, reverberation,
talker-to-ASV distance) one character per attribute, levels ``a``/``b``/``c``.
The fourth encodes the replay configuration (attacker-to-talker distance,
replay device quality) with levels ``A``/``B``/``C``, or ``-`` for bona fide.
"""

from __future__ import annotations

import enum
import logging
import os
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ENV_LEVELS = "abc"
ATTACK_LEVELS = "ABC"

# bona-fide / spoof counts per subset of the official PA release
OFFICIAL_COUNTS = {
    "train": (5400, 48600),
    "dev": (5400, 24300),
    "eval": (18090, 119367),
}

AUDIO_SUFFIXES = (".flac", ".wav")


class ProtocolError(ValueError):
    """A protocol line or file could not be decoded."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class Key(enum.Enum):
    BONA_FIDE = "bonafide"
    SPOOF = "spoof"

    @property
    def index(self) -> int:
        """Primary-task class index (bona fide = 0)."""
        return 0 if self is Key.BONA_FIDE else 1


class Scheme(enum.Enum):
    CAN = "can"
    MTL = "mtl"
    MODIFIED_MTL = "modified_mtl"


class CategoryKind(enum.Enum):
    ENVIRONMENT = "environment"
    REPLAY = "replay"


class SubsidiaryCategory(enum.Enum):
    ROOM_SIZE = "room_size"
    REVERBERATION = "reverberation"
    TALKER_TO_ASV = "talker_to_asv"
    ATTACKER_TO_TALKER = "attacker_to_talker"
    REPLAY_QUALITY = "replay_quality"

    @property
    def kind(self) -> CategoryKind:
        if self in (SubsidiaryCategory.ATTACKER_TO_TALKER, SubsidiaryCategory.REPLAY_QUALITY):
            return CategoryKind.REPLAY
        return CategoryKind.ENVIRONMENT

    @property
    def is_replay(self) -> bool:
        return self.kind is CategoryKind.REPLAY

    @property
    def n_levels(self) -> int:
        return 3

    @classmethod
    def parse(cls, name: str) -> "SubsidiaryCategory":
        try:
            return cls(name.strip().lower().replace("-", "_"))
        except ValueError:
            valid = ", ".join(c.value for c in cls)
            raise ValueError(f"unknown subsidiary category {name!r} (expected one of {valid})") from None


@dataclass(frozen=True)
class EnvConfig:
    room_size: str
    reverberation: str
    talker_to_asv: str

    def __post_init__(self):
        for value in (self.room_size, self.reverberation, self.talker_to_asv):
            if value not in ENV_LEVELS:
                raise ValueError(f"environment level must be one of {ENV_LEVELS!r}, got {value!r}")

    @classmethod
    def decode(cls, code: str) -> "EnvConfig":
        if len(code) != 3:
            raise ValueError(f"environment code must have 3 characters, got {code!r}")
        return cls(*code)

    def encode(self) -> str:
        return self.room_size + self.reverberation + self.talker_to_asv


@dataclass(frozen=True)
class AttackConfig:
    attacker_to_talker: str
    replay_quality: str

    def __post_init__(self):
        for value in (self.attacker_to_talker, self.replay_quality):
            if value not in ATTACK_LEVELS:
                raise ValueError(f"replay level must be one of {ATTACK_LEVELS!r}, got {value!r}")

    @classmethod
    def decode(cls, code: str) -> "AttackConfig":
        if len(code) != 2:
            raise ValueError(f"replay code must have 2 characters, got {code!r}")
        return cls(*code)

    def encode(self) -> str:
        return self.attacker_to_talker + self.replay_quality


@dataclass(frozen=True)
class TrialEntry:
    speaker_id: str
    utt_id: str
    env: EnvConfig
    attack: AttackConfig | None
    key: Key
    audio_path: Path | None = None

    def __post_init__(self):
        if self.key is Key.SPOOF and self.attack is None:
            raise ValueError(f"{self.utt_id}: spoof entry without replay configuration")
        if self.key is Key.BONA_FIDE and self.attack is not None:
            raise ValueError(f"{self.utt_id}: bona-fide entry with replay configuration")

    @property
    def is_bona_fide(self) -> bool:
        return self.key is Key.BONA_FIDE

    def level(self, category: SubsidiaryCategory) -> str | None:
        """Raw level character for ``category``; None for replay levels of bona fide."""
        if category.is_replay:
            return None if self.attack is None else getattr(self.attack, category.value)
        return getattr(self.env, category.value)


def parse_protocol_line(line: str, lineno: int | None = None) -> TrialEntry:
    fields = line.split()
    if len(fields) != 5:
        raise ProtocolError(f"expected 5 fields, got {len(fields)}", lineno)
    speaker, utt, env_code, attack_code, key_code = fields
    try:
        key = Key(key_code)
    except ValueError:
        raise ProtocolError(f"unknown key {key_code!r}", lineno) from None
    try:
        env = EnvConfig.decode(env_code)
        attack = None if attack_code == "-" else AttackConfig.decode(attack_code)
    except ValueError as exc:
        raise ProtocolError(str(exc), lineno) from None
    if key is Key.BONA_FIDE and attack is not None:
        raise ProtocolError(f"bona-fide trial {utt} carries replay configuration {attack_code}", lineno)
    if key is Key.SPOOF and attack is None:
        raise ProtocolError(f"spoof trial {utt} has no replay configuration", lineno)
    return TrialEntry(speaker, utt, env, attack, key)


def format_protocol_line(entry: TrialEntry) -> str:
    attack = "-" if entry.attack is None else entry.attack.encode()
    return f"{entry.speaker_id} {entry.utt_id} {entry.env.encode()} {attack} {entry.key.value}"


def read_protocol(protocol_path: str | os.PathLike) -> list[TrialEntry]:
    """Parse every non-blank line of a protocol file (audio paths unresolved)."""
    path = Path(protocol_path)
    if not path.is_file():
        raise FileNotFoundError(f"protocol file not found: {path}")
    entries = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                entries.append(parse_protocol_line(line, lineno))
    if not entries:
        raise ProtocolError(f"no trials in {path}")
    return entries


def _resolve_audio(audio_root: Path, utt_id: str) -> Path:
    for suffix in AUDIO_SUFFIXES:
        candidate = audio_root / f"{utt_id}{suffix}"
        if candidate.exists():
            return candidate
    # official releases ship FLAC; resolution is deferred to read time
    return audio_root / f"{utt_id}{AUDIO_SUFFIXES[0]}"


def load_corpus(protocol_path: str | os.PathLike, audio_root: str | os.PathLike) -> list[TrialEntry]:
    root = Path(audio_root)
    if not root.is_dir():
        raise FileNotFoundError(f"audio root is not a directory: {root}")
    entries = [
        TrialEntry(e.speaker_id, e.utt_id, e.env, e.attack, e.key, _resolve_audio(root, e.utt_id))
        for e in read_protocol(protocol_path)
    ]
    counts = corpus_counts(entries)
    logger.info("loaded %d trials from %s (%d bona fide, %d spoof)",
                len(entries), protocol_path, counts[Key.BONA_FIDE], counts[Key.SPOOF])
    return entries


def corpus_counts(entries: Iterable[TrialEntry]) -> dict[Key, int]:
    counts = Counter(e.key for e in entries)
    return {Key.BONA_FIDE: counts[Key.BONA_FIDE], Key.SPOOF: counts[Key.SPOOF]}


def matches_official_subset(entries: Sequence[TrialEntry], subset: str) -> bool:
    counts = corpus_counts(entries)
    return (counts[Key.BONA_FIDE], counts[Key.SPOOF]) == OFFICIAL_COUNTS[subset]


@dataclass(frozen=True)
class EpochPlan:
    entries: tuple[TrialEntry, ...]
    seed: int | tuple[int, ...]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def balanced_epoch_plan(entries: Sequence[TrialEntry], seed: int | Sequence[int]) -> EpochPlan:
    """All bona-fide trials plus an equally sized random spoof subset, shuffled.

    The plan depends only on the set of entries and the seed, not on the input
    order. Pass ``(master_seed, epoch)`` to draw a fresh spoof subset per epoch.
    When there are fewer spoof than bona-fide trials, spoof trials are drawn
    with replacement and a warning is emitted.
    """
    ordered = sorted(entries, key=lambda e: e.utt_id)
    bona = [e for e in ordered if e.key is Key.BONA_FIDE]
    spoof = [e for e in ordered if e.key is Key.SPOOF]
    if not bona or not spoof:
        raise ValueError("balanced sampling needs at least one bona-fide and one spoof trial")
    seed_key = seed if isinstance(seed, int) else tuple(int(s) for s in seed)
    rng = np.random.default_rng(seed)
    replace = len(spoof) < len(bona)
    if replace:
        warnings.warn(
            f"only {len(spoof)} spoof trials for {len(bona)} bona-fide; sampling spoof with replacement",
            RuntimeWarning,
            stacklevel=2,
        )
    picked = rng.choice(len(spoof), size=len(bona), replace=replace)
    plan = bona + [spoof[i] for i in picked]
    order = rng.permutation(len(plan))
    return EpochPlan(tuple(plan[i] for i in order), seed_key)


def subsidiary_label(entry: TrialEntry, category: SubsidiaryCategory, scheme: Scheme) -> int | None:
    """Class index of ``entry`` for a subsidiary head.

    Environment categories map to the level index under every scheme. Replay
    categories depend on the scheme: CAN heads have no bona-fide node (None),
    MTL heads append a bona-fide node at index 3, and the merged output layer
    of the modified scheme reserves index 0 for bona fide.
    """
    if not category.is_replay:
        return ENV_LEVELS.index(getattr(entry.env, category.value))
    if entry.attack is None:
        if scheme is Scheme.CAN:
            return None
        if scheme is Scheme.MTL:
            return category.n_levels
        return 0
    level = ATTACK_LEVELS.index(getattr(entry.attack, category.value))
    return level + 1 if scheme is Scheme.MODIFIED_MTL else level


def subsidiary_width(category: SubsidiaryCategory, scheme: Scheme) -> int:
    """Output width of the subsidiary (or merged) layer for ``category``."""
    if scheme is Scheme.CAN or not category.is_replay:
        return category.n_levels
    return category.n_levels + 1
