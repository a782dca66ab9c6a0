"""Training regimes: baseline, cosine-adversarial (three phases), MTL, merged-output MTL."""

from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import Scheme, SubsidiaryCategory, TrialEntry, balanced_epoch_plan, subsidiary_label
from .features import CROP_FRAMES, FeatureBank, random_crop
from .network import (
    EncoderConfig,
    RingLoss,
    SpoofDetector,
    cce_loss,
    cosine_orthogonality_loss,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "phase", "loss_primary", "loss_subsidiary", "loss_ring", "loss_orth")


class Mode(enum.Enum):
    BASELINE = "baseline"
    CAN = "can"
    MTL = "mtl"
    MODIFIED_MTL = "modified_mtl"

    @property
    def scheme(self) -> Scheme | None:
        return None if self is Mode.BASELINE else Scheme(self.value)


class NumericalError(FloatingPointError):
    """A loss became NaN or infinite."""


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 32

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ValueError(f"invalid optimizer settings: {self}")


@dataclass(frozen=True)
class PhaseSchedule:
    proportions: tuple[int, int, int] = (3, 1, 1)

    def __post_init__(self):
        if len(self.proportions) != 3 or any(int(p) != p or p < 1 for p in self.proportions):
            raise ValueError("phase proportions must be three positive integers")

    @property
    def period(self) -> int:
        return sum(self.proportions)


def phase_for_epoch(epoch: int, schedule: PhaseSchedule = PhaseSchedule()) -> int:
    if epoch < 0:
        raise ValueError("epoch index must be non-negative")
    r = epoch % schedule.period
    p1, p2, _ = schedule.proportions
    if r < p1:
        return 1
    return 2 if r < p1 + p2 else 3


@dataclass(frozen=True)
class FreezeMask:
    encoder_frozen: bool
    primary_frozen: bool
    subsidiary_frozen: bool

    @classmethod
    def for_phase(cls, phase: int) -> "FreezeMask":
        return {
            1: cls(False, False, True),
            2: cls(True, True, False),
            3: cls(False, True, True),
        }[phase]


TRAIN_ALL = FreezeMask(False, False, False)


def apply_freeze(model: SpoofDetector, mask: FreezeMask) -> None:
    """Switch gradients and batch-norm statistics off for the frozen parts."""
    parts = ((model.encoder, mask.encoder_frozen), (model.primary, mask.primary_frozen),
             (model.subsidiary, mask.subsidiary_frozen))
    for module, frozen in parts:
        if module is None:
            continue
        module.train(not frozen)
        for p in module.parameters():
            p.requires_grad_(not frozen)
            if frozen:
                p.grad = None


@dataclass(frozen=True)
class MtlConfig:
    category: SubsidiaryCategory
    lambda_pri: float = 1.0
    lambda_sub: float = 0.5
    ring_enabled: bool = False

    def __post_init__(self):
        if self.lambda_pri < 0 or self.lambda_sub < 0:
            raise ValueError("task weights must be non-negative")


def mtl_objective(loss_pri, loss_sub, lambda_pri: float = 1.0, lambda_sub: float = 0.5):
    return lambda_pri * loss_pri + lambda_sub * loss_sub


@dataclass
class Batch:
    x: torch.Tensor           # (B, T, bins)
    key: torch.Tensor         # primary labels, bona fide = 0
    sub: torch.Tensor | None  # subsidiary labels for the active scheme
    utt_ids: tuple[str, ...] = ()

    def __len__(self):
        return self.x.shape[0]

    def select(self, mask: torch.Tensor) -> "Batch":
        ids = tuple(u for u, m in zip(self.utt_ids, mask.tolist()) if m) if self.utt_ids else ()
        return Batch(self.x[mask], self.key[mask], None if self.sub is None else self.sub[mask], ids)


@dataclass
class LossReport:
    step: int
    phase: int
    loss_primary: float = 0.0
    loss_subsidiary: float = 0.0
    loss_ring: float = 0.0
    loss_orth: float = 0.0
    total: float = 0.0

    def row(self) -> list[str]:
        return [str(self.step), str(self.phase)] + [f"{getattr(self, c):.8g}" for c in LOSS_COLUMNS[2:]]


def _item(t: torch.Tensor) -> float:
    return float(t.detach())


def _check_finite(loss: torch.Tensor, what: str, step: int):
    if not torch.isfinite(loss):
        raise NumericalError(f"{what} loss is {_item(loss)} at step {step}")


class Trainer:
    """Owns a detector, its ring loss and optimizer, and performs single steps.

    Every step method first puts the model in the freeze state of its regime.
    A change of freeze state rebuilds the optimizer, so newly unfrozen
    parameters start from fresh moment estimates.
    """

    def __init__(self, model: SpoofDetector, opt: OptimizerConfig = OptimizerConfig(),
                 ring_enabled: bool = False, ring_weight: float = 1.0,
                 lambda_pri: float = 1.0, lambda_sub: float = 0.5, orth_weight: float = 1.0):
        self.model = model
        self.opt_cfg = opt
        self.ring = RingLoss(ring_weight) if ring_enabled else None
        self.lambda_pri = lambda_pri
        self.lambda_sub = lambda_sub
        self.orth_weight = orth_weight
        self.optimizer: torch.optim.Optimizer | None = None
        self.mask: FreezeMask | None = None
        self.step_count = 0

    def enter(self, mask: FreezeMask) -> None:
        if mask == self.mask:
            return
        apply_freeze(self.model, mask)
        self.mask = mask
        decay = [p for p in self.model.parameters() if p.requires_grad]
        groups = [{"params": decay, "weight_decay": self.opt_cfg.weight_decay}]
        if self.ring is not None and not mask.encoder_frozen:
            groups.append({"params": [self.ring.radius], "weight_decay": 0.0})
        self.ring_trainable = self.ring is not None and not mask.encoder_frozen
        if self.ring is not None:
            self.ring.radius.requires_grad_(self.ring_trainable)
        self.optimizer = torch.optim.Adam(groups, lr=self.opt_cfg.learning_rate, amsgrad=True)

    def _ring_term(self, codes):
        if self.ring is None:
            return torch.zeros((), dtype=codes.dtype)
        return self.ring(codes)

    def _update(self, loss: torch.Tensor, report: LossReport) -> LossReport:
        _check_finite(loss, "total", self.step_count)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step_count += 1
        report.total = _item(loss)
        return report

    def step_baseline(self, batch: Batch, phase: int = 1) -> LossReport:
        self.enter(FreezeMask.for_phase(1) if self.model.subsidiary is not None else TRAIN_ALL)
        out = self.model(batch.x)
        l_pri = cce_loss(out.primary_logits, batch.key)
        l_ring = self._ring_term(out.code)
        report = LossReport(self.step_count, phase, _item(l_pri), loss_ring=_item(l_ring))
        return self._update(l_pri + l_ring, report)

    def step_can_phase2(self, batch: Batch, train_encoder: bool = False) -> LossReport:
        """Fit the subsidiary model on (by default frozen) codes."""
        mask = FreezeMask.for_phase(2)
        if train_encoder:
            mask = dataclasses.replace(mask, encoder_frozen=False)
        self.enter(mask)
        if batch.sub is None:
            raise ValueError("phase-2 batch has no subsidiary labels")
        labeled = batch.sub >= 0
        if not bool(labeled.any()):
            raise ValueError("no labeled trials left in phase-2 batch")
        batch = batch.select(labeled)
        if train_encoder:
            code = self.model.encoder(batch.x)
        else:
            with torch.no_grad():
                code = self.model.encoder(batch.x)
        l_sub = cce_loss(self.model.subsidiary(code), batch.sub)
        return self._update(l_sub, LossReport(self.step_count, 2, loss_subsidiary=_item(l_sub)))

    def step_can_phase3(self, batch: Batch) -> LossReport:
        """Encoder update towards codes orthogonal to the frozen subsidiary basis."""
        self.enter(FreezeMask.for_phase(3))
        basis = self.model.subsidiary.basis.detach()
        code = self.model.encoder(batch.x)
        l_pri = cce_loss(self.model.primary(code), batch.key)
        l_orth = cosine_orthogonality_loss(code, basis)
        l_ring = self._ring_term(code)
        report = LossReport(self.step_count, 3, _item(l_pri), loss_ring=_item(l_ring), loss_orth=_item(l_orth))
        return self._update(l_pri + self.orth_weight * l_orth + l_ring, report)

    def step_mtl(self, batch: Batch) -> LossReport:
        self.enter(TRAIN_ALL)
        out = self.model(batch.x)
        l_pri = cce_loss(out.primary_logits, batch.key)
        l_sub = cce_loss(out.subsidiary_logits, batch.sub)
        l_ring = self._ring_term(out.code)
        loss = mtl_objective(l_pri, l_sub, self.lambda_pri, self.lambda_sub) + l_ring
        report = LossReport(self.step_count, 1, _item(l_pri), _item(l_sub), _item(l_ring))
        return self._update(loss, report)

    def step_modified_mtl(self, batch: Batch) -> LossReport:
        self.enter(TRAIN_ALL)
        out = self.model(batch.x)
        l_merged = cce_loss(out.primary_logits, batch.sub)
        l_ring = self._ring_term(out.code)
        report = LossReport(self.step_count, 1, _item(l_merged), loss_ring=_item(l_ring))
        return self._update(l_merged + l_ring, report)


# -- data -----------------------------------------------------------------------


def make_batches(entries: Sequence[TrialEntry], bank: FeatureBank, batch_size: int,
                 crop_frames: int, rng: np.random.Generator,
                 category: SubsidiaryCategory | None = None, scheme: Scheme | None = None) -> list[Batch]:
    """Crop every entry once and group into batches, keeping the given order.

    Unlabeled trials (bona fide under the CAN scheme for replay categories)
    get subsidiary label -1.
    """
    batches = []
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        x = np.stack([random_crop(bank.get(e), crop_frames, rng) for e in chunk])
        key = torch.tensor([e.key.index for e in chunk], dtype=torch.long)
        sub = None
        if category is not None:
            labels = [subsidiary_label(e, category, scheme) for e in chunk]
            sub = torch.tensor([-1 if v is None else v for v in labels], dtype=torch.long)
        batches.append(Batch(torch.from_numpy(x), key, sub, tuple(e.utt_id for e in chunk)))
    return batches


# -- orchestration ------------------------------------------------------------


@dataclass
class TrainConfig:
    mode: Mode = Mode.BASELINE
    category: SubsidiaryCategory | None = None
    ring: bool = False
    epochs: int = 10
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    crop_frames: int = CROP_FRAMES
    schedule: PhaseSchedule = field(default_factory=PhaseSchedule)
    lambda_pri: float = 1.0
    lambda_sub: float = 0.5
    orth_weight: float = 1.0
    phase2_train_encoder: bool = False
    keep_checkpoints: str = "all"

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if isinstance(self.category, str):
            self.category = SubsidiaryCategory.parse(self.category)
        validate_mode(self.mode, self.category)
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.keep_checkpoints not in ("all", "last"):
            raise ValueError("keep_checkpoints must be 'all' or 'last'")


def validate_mode(mode: Mode, category: SubsidiaryCategory | None) -> None:
    if mode is Mode.BASELINE and category is not None:
        raise ValueError("baseline training takes no subsidiary category")
    if mode is not Mode.BASELINE and category is None:
        raise ValueError(f"mode {mode.value} needs a subsidiary category")
    if mode is Mode.MODIFIED_MTL and not category.is_replay:
        raise ValueError(f"merged-output MTL is defined for replay categories only, not {category.value}")


@dataclass
class TrainResult:
    model: SpoofDetector
    reports: list[LossReport]
    phases: list[int]
    checkpoints: list[Path]
    loss_csv: Path | None


def write_loss_csv(path: str | os.PathLike, reports: Sequence[LossReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        w.writerows(r.row() for r in reports)


def read_loss_csv(path: str | os.PathLike) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def build_model(cfg: TrainConfig) -> SpoofDetector:
    torch.manual_seed(cfg.seed)
    return SpoofDetector(cfg.encoder, cfg.mode.scheme, cfg.category)


def run_training(cfg: TrainConfig, entries: Sequence[TrialEntry], bank: FeatureBank | None = None,
                 out_dir: str | os.PathLike | None = None,
                 on_epoch_end: Callable[[int, int, SpoofDetector], None] | None = None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs, each on a fresh balanced plan with fresh crops.

    With ``out_dir`` set, a checkpoint is written after every epoch and the
    loss curve CSV is rewritten, so an interrupted run leaves usable artifacts.
    ``on_epoch_end(epoch, phase, model)`` is called after each epoch.
    """
    bank = bank or FeatureBank()
    model = build_model(cfg)
    trainer = Trainer(model, cfg.optimizer, cfg.ring, 1.0, cfg.lambda_pri, cfg.lambda_sub, cfg.orth_weight)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    scheme = cfg.mode.scheme
    reports: list[LossReport] = []
    phases: list[int] = []
    checkpoints: list[Path] = []
    bs = cfg.optimizer.batch_size
    for epoch in range(cfg.epochs):
        plan = balanced_epoch_plan(entries, (cfg.seed, epoch))
        rng = np.random.default_rng([cfg.seed, epoch, 1])
        phase = phase_for_epoch(epoch, cfg.schedule) if cfg.mode is Mode.CAN else 1
        phases.append(phase)
        plan_entries = list(plan.entries)
        if phase == 2:
            plan_entries = [e for e in plan_entries if subsidiary_label(e, cfg.category, scheme) is not None]
        batches = make_batches(plan_entries, bank, bs, cfg.crop_frames, rng, cfg.category, scheme)
        for batch in batches:
            if cfg.mode is Mode.BASELINE or (cfg.mode is Mode.CAN and phase == 1):
                rep = trainer.step_baseline(batch, phase)
            elif cfg.mode is Mode.CAN and phase == 2:
                rep = trainer.step_can_phase2(batch, cfg.phase2_train_encoder)
            elif cfg.mode is Mode.CAN:
                rep = trainer.step_can_phase3(batch)
            elif cfg.mode is Mode.MTL:
                rep = trainer.step_mtl(batch)
            else:
                rep = trainer.step_modified_mtl(batch)
            reports.append(rep)
        epoch_reports = reports[-len(batches):]
        logger.info("epoch %d phase %d: primary %.4f subsidiary %.4f orth %.4f", epoch, phase,
                    np.mean([r.loss_primary for r in epoch_reports]),
                    np.mean([r.loss_subsidiary for r in epoch_reports]),
                    np.mean([r.loss_orth for r in epoch_reports]))
        if out is not None:
            ckpt = out / "checkpoints" / f"epoch_{epoch:03d}.pt"
            save_checkpoint(ckpt, model, trainer.ring, trainer.optimizer, epoch, cfg.seed,
                            {"phase": phase, "mode": cfg.mode.value})
            if cfg.keep_checkpoints == "last" and checkpoints:
                checkpoints[-1].unlink(missing_ok=True)
                checkpoints.pop()
            checkpoints.append(ckpt)
            write_loss_csv(out / "losses.csv", reports)
        if on_epoch_end is not None:
            on_epoch_end(epoch, phase, model)
    model.eval()
    return TrainResult(model, reports, phases, checkpoints, out / "losses.csv" if out is not None else None)


def steps_per_epoch(n_bona_fide: int, batch_size: int) -> int:
    return math.ceil(2 * n_bona_fide / batch_size)
