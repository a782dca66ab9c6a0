"""Encoder, primary/subsidiary heads, loss primitives and checkpoints.

The end-to-end detector is split into an encoder that maps a magnitude
spectrogram to a 64-d code and a primary head doing bona fide / spoof
classification on that code. Subsidiary heads read the same code.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Scheme, SubsidiaryCategory, subsidiary_width
from .features import N_BINS

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    conv1_filters: int = 16
    stage_filters: int = 128
    n_stages: int = 3
    blocks_per_stage: int = 3
    kernel: tuple[int, int] = (3, 7)
    downsample_stride: tuple[int, int] = (2, 4)
    gru_units: int = 512
    code_dim: int = 64
    lrelu_slope: float = 0.01
    n_bins: int = N_BINS

    @classmethod
    def toy(cls) -> "EncoderConfig":
        """Narrow variant for CPU-scale experiments; same topology and code size."""
        return cls(conv1_filters=8, stage_filters=16, gru_units=64)

    @property
    def min_frames(self) -> int:
        return 2 ** self.n_stages

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EncoderConfig":
        d = dict(d)
        for k in ("kernel", "downsample_stride"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _same_padding(kernel: tuple[int, int]) -> tuple[int, int]:
    return kernel[0] // 2, kernel[1] // 2


class PreActBlock(nn.Module):
    """BN -> LReLU -> conv -> BN -> LReLU -> conv, plus a shortcut.

    ``first=True`` drops the leading BN and activation (the stem already
    applies them). The shortcut is a strided 1x1 projection whenever the
    block changes resolution or width, otherwise the identity.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel, stride, slope: float, first: bool = False):
        super().__init__()
        self.first = first
        self.slope = slope
        pad = _same_padding(kernel)
        self.bn1 = None if first else nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=pad, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, kernel, stride=1, padding=pad, bias=False)
        needs_proj = in_ch != out_ch or tuple(stride) != (1, 1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False) if needs_proj else None

    def forward(self, x):
        out = x if self.first else F.leaky_relu(self.bn1(x), self.slope)
        out = self.conv1(out)
        out = self.conv2(F.leaky_relu(self.bn2(out), self.slope))
        return out + (x if self.shortcut is None else self.shortcut(x))


class Encoder(nn.Module):
    """Spectrogram (B, T, 1025) -> code (B, code_dim)."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.conv1 = nn.Conv2d(1, cfg.conv1_filters, cfg.kernel, padding=_same_padding(cfg.kernel), bias=False)
        self.bn1 = nn.BatchNorm2d(cfg.conv1_filters)
        blocks = []
        in_ch = cfg.conv1_filters
        for stage in range(cfg.n_stages):
            for b in range(cfg.blocks_per_stage):
                stride = cfg.downsample_stride if b == 0 else (1, 1)
                blocks.append(PreActBlock(in_ch, cfg.stage_filters, cfg.kernel, stride,
                                          cfg.lrelu_slope, first=(stage == 0 and b == 0)))
                in_ch = cfg.stage_filters
        self.blocks = nn.Sequential(*blocks)
        self.gru = nn.GRU(cfg.stage_filters, cfg.gru_units, batch_first=True)
        self.code = nn.Linear(cfg.gru_units, cfg.code_dim)

    def _check(self, x: torch.Tensor):
        if x.dim() != 3:
            raise ValueError(f"expected (batch, frames, bins), got shape {tuple(x.shape)}")
        if x.shape[2] != self.cfg.n_bins:
            raise ValueError(f"expected {self.cfg.n_bins} frequency bins, got {x.shape[2]}")
        if x.shape[1] < self.cfg.min_frames:
            raise ValueError(f"need at least {self.cfg.min_frames} frames, got {x.shape[1]}")

    def features(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """Every intermediate, channels last: blocks (B, T', F', C), pooled (B, T', C)."""
        self._check(x)
        h = F.leaky_relu(self.bn1(self.conv1(x.unsqueeze(1))), self.cfg.lrelu_slope)
        h = self.blocks(h)                      # (B, C, T', F')
        pooled = h.mean(dim=3).transpose(1, 2)  # (B, T', C)
        _, last = self.gru(pooled)
        code = self.code(last[-1])
        return {"blocks": h.permute(0, 2, 3, 1), "pooled": pooled, "gru": last[-1], "code": code}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)["code"]


class SubsidiaryHead(nn.Module):
    """Classifier on the code.

    ``variant="can"`` is the adversarial model with two 128-unit hidden
    layers; ``variant="mtl"`` is a single output layer.
    """

    def __init__(self, variant: str, n_out: int, code_dim: int = 64, hidden: int = 128, slope: float = 0.01):
        super().__init__()
        if variant not in ("can", "mtl"):
            raise ValueError(f"unknown subsidiary head variant {variant!r}")
        self.variant = variant
        self.slope = slope
        if variant == "can":
            self.layers = nn.ModuleList([nn.Linear(code_dim, hidden), nn.Linear(hidden, hidden),
                                         nn.Linear(hidden, n_out)])
        else:
            self.layers = nn.ModuleList([nn.Linear(code_dim, n_out)])

    @property
    def n_out(self) -> int:
        return self.layers[-1].out_features

    @property
    def basis(self) -> torch.Tensor:
        """Rows of the first layer's weight matrix: the directions the head reads the code along."""
        return self.layers[0].weight

    def forward(self, code):
        h = code
        for layer in self.layers[:-1]:
            h = F.leaky_relu(layer(h), self.slope)
        return self.layers[-1](h)


@dataclass
class NetworkOutput:
    code: torch.Tensor
    primary_logits: torch.Tensor | None
    subsidiary_logits: torch.Tensor | None = None


class SpoofDetector(nn.Module):
    """Encoder plus the heads required by a training scheme.

    ``scheme=None`` is the plain end-to-end detector. For ``MODIFIED_MTL`` the
    primary head is replaced by a single merged layer whose node 0 stands for
    bona fide; its logits are returned as ``primary_logits``.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), scheme: Scheme | None = None,
                 category: SubsidiaryCategory | None = None):
        super().__init__()
        if (scheme is None) != (category is None):
            raise ValueError("a subsidiary category is required exactly when a scheme is given")
        if scheme is Scheme.MODIFIED_MTL and not category.is_replay:
            raise ValueError("the merged output layer is defined for replay categories only")
        self.cfg = cfg
        self.scheme = scheme
        self.category = category
        self.encoder = Encoder(cfg)
        if scheme is Scheme.MODIFIED_MTL:
            self.primary = nn.Linear(cfg.code_dim, subsidiary_width(category, scheme))
        else:
            self.primary = nn.Linear(cfg.code_dim, 2)
        self.subsidiary = None
        if scheme in (Scheme.CAN, Scheme.MTL):
            self.subsidiary = SubsidiaryHead(scheme.value, subsidiary_width(category, scheme),
                                             cfg.code_dim, slope=cfg.lrelu_slope)

    def forward(self, x) -> NetworkOutput:
        code = self.encoder(x)
        sub = self.subsidiary(code) if self.subsidiary is not None else None
        return NetworkOutput(code, self.primary(code), sub)

    def fingerprint(self) -> str:
        desc = {
            "encoder": self.cfg.to_dict(),
            "scheme": None if self.scheme is None else self.scheme.value,
            "category": None if self.category is None else self.category.value,
            "params": [(k, list(v.shape)) for k, v in self.state_dict().items()],
        }
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]


# -- losses -------------------------------------------------------------------


def cce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Categorical cross-entropy, averaged over the batch."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(f"label outside [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, labels)


def ring_loss(codes: torch.Tensor, radius: torch.Tensor | float, weight: float = 1.0) -> torch.Tensor:
    """weight / (2m) * sum_i (||code_i|| - radius)^2 over a batch of m codes."""
    norms = torch.linalg.vector_norm(codes, dim=1)
    return weight * ((norms - radius) ** 2).sum() / (2 * codes.shape[0])


class RingLoss(nn.Module):
    """Ring loss with a learnable radius.

    The radius starts at the mean code norm of the first batch it sees.
    """

    def __init__(self, weight: float = 1.0):
        super().__init__()
        if weight < 0:
            raise ValueError("ring loss weight must be non-negative")
        self.weight = weight
        self.radius = nn.Parameter(torch.tensor(1.0))
        self.register_buffer("initialized", torch.tensor(False))

    def forward(self, codes):
        if not bool(self.initialized):
            with torch.no_grad():
                self.radius.fill_(float(torch.linalg.vector_norm(codes, dim=1).mean().clamp_min(1e-3)))
                self.initialized.fill_(True)
        return ring_loss(codes, self.radius, self.weight)


def cosine_orthogonality_loss(codes: torch.Tensor, basis: torch.Tensor) -> torch.Tensor:
    """Mean squared cosine between every code and every basis row.

    Zero codes contribute 0. A zero basis row is an error: the subsidiary
    model it came from is degenerate.
    """
    row_norms = torch.linalg.vector_norm(basis, dim=1)
    if bool((row_norms == 0).any()):
        raise ValueError("basis contains a zero row")
    code_norms = torch.linalg.vector_norm(codes, dim=1, keepdim=True)
    unit_codes = torch.where(code_norms > 0, codes / code_norms.clamp_min(1e-30), torch.zeros_like(codes))
    cos = unit_codes @ (basis / row_norms[:, None]).T
    return (cos ** 2).mean()


def mean_abs_cosine(codes: torch.Tensor, basis: torch.Tensor) -> float:
    with torch.no_grad():
        c = F.normalize(codes, dim=1)
        b = F.normalize(basis, dim=1)
        return float((c @ b.T).abs().mean())


# -- checkpoints --------------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | os.PathLike, model: SpoofDetector, ring: RingLoss | None = None,
                    optimizer: torch.optim.Optimizer | None = None, epoch: int = 0, seed: int = 0,
                    extra: dict[str, Any] | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "fingerprint": model.fingerprint(),
        "architecture": {
            "encoder": model.cfg.to_dict(),
            "scheme": None if model.scheme is None else model.scheme.value,
            "category": None if model.category is None else model.category.value,
        },
        "parameters": model.state_dict(),
        "ring": None if ring is None else {"radius": ring.radius.item(), "weight": ring.weight,
                                           "initialized": bool(ring.initialized)},
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "epoch": epoch,
        "seed": seed,
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> dict[str, Any]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def model_from_checkpoint(path: str | os.PathLike) -> tuple[SpoofDetector, dict[str, Any]]:
    """Rebuild the detector a checkpoint was saved from and load its weights."""
    payload = read_checkpoint(path)
    arch = payload["architecture"]
    scheme = None if arch["scheme"] is None else Scheme(arch["scheme"])
    category = None if arch["category"] is None else SubsidiaryCategory(arch["category"])
    model = SpoofDetector(EncoderConfig.from_dict(arch["encoder"]), scheme, category)
    load_parameters(model, payload)
    model.eval()
    return model, payload


def load_parameters(model: SpoofDetector, payload: dict[str, Any]) -> None:
    if payload["fingerprint"] != model.fingerprint():
        raise CheckpointError(
            f"architecture fingerprint mismatch: checkpoint {payload['fingerprint']}, model {model.fingerprint()}")
    model.load_state_dict(payload["parameters"])
