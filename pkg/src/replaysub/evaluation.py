"""Trial scoring, equal error rate, frozen-encoder probes and result files."""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Key, Scheme, SubsidiaryCategory, TrialEntry, subsidiary_label, subsidiary_width
from .features import FeatureBank, full_frames
from .network import SpoofDetector, SubsidiaryHead, cce_loss, model_from_checkpoint
from .training import OptimizerConfig, read_loss_csv


@dataclass(frozen=True)
class TrialScore:
    utt_id: str
    score: float


@dataclass(frozen=True)
class EvalResult:
    eer: float
    threshold: float
    n_target: int
    n_nontarget: int


@dataclass
class ProbeResult:
    category: SubsidiaryCategory
    loss_curve: list[float]
    final_accuracy: float
    chance_level: float
    heldout_loss: float = float("nan")
    n_train: int = 0
    n_heldout: int = 0

    def plateau(self, fraction: float = 0.1) -> float:
        """Mean loss over the last ``fraction`` of the curve."""
        k = max(1, int(len(self.loss_curve) * fraction))
        return float(np.mean(self.loss_curve[-k:]))


def _as_model(model_or_path) -> SpoofDetector:
    if isinstance(model_or_path, SpoofDetector):
        return model_or_path
    model, _ = model_from_checkpoint(model_or_path)
    return model


def score_from_logits(logits: torch.Tensor, merged_output: bool) -> torch.Tensor:
    """Bona-fide score per row: raw node 0 for a merged output layer, log-softmax otherwise."""
    if merged_output:
        return logits[..., 0]
    return F.log_softmax(logits, dim=-1)[..., 0]


def _grouped_forward(model: SpoofDetector, specs: Sequence[np.ndarray], batch_size: int):
    """Run the encoder over whole utterances, batching equal lengths together."""
    by_len = defaultdict(list)
    for i, s in enumerate(specs):
        by_len[s.shape[0]].append(i)
    codes = [None] * len(specs)
    logits = [None] * len(specs)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for idx in by_len.values():
                for start in range(0, len(idx), batch_size):
                    chunk = idx[start:start + batch_size]
                    x = torch.from_numpy(np.stack([full_frames(specs[i]) for i in chunk]))
                    out = model(x)
                    for j, i in enumerate(chunk):
                        codes[i] = out.code[j]
                        logits[i] = out.primary_logits[j]
    finally:
        model.train(was_training)
    return torch.stack(codes), torch.stack(logits)


def score_utterance(model_or_path, spec: np.ndarray, scheme: Scheme | None = None,
                    utt_id: str = "") -> TrialScore:
    model = _as_model(model_or_path)
    merged = scheme is Scheme.MODIFIED_MTL
    if merged and model.scheme is not Scheme.MODIFIED_MTL:
        raise ValueError("merged-output scoring needs a model trained with the merged output layer")
    expected = subsidiary_width(model.category, scheme) if merged else 2
    if model.primary.out_features != expected:
        raise ValueError(f"output width {model.primary.out_features} does not fit scheme "
                         f"{None if scheme is None else scheme.value}")
    _, logits = _grouped_forward(model, [spec], 1)
    return TrialScore(utt_id, float(score_from_logits(logits[0], merged)))


def score_corpus(model_or_path, entries: Sequence[TrialEntry], bank: FeatureBank,
                 batch_size: int = 32) -> list[TrialScore]:
    model = _as_model(model_or_path)
    merged = model.scheme is Scheme.MODIFIED_MTL
    _, logits = _grouped_forward(model, [bank.get(e) for e in entries], batch_size)
    scores = score_from_logits(logits, merged).tolist()
    return [TrialScore(e.utt_id, s) for e, s in zip(entries, scores)]


def extract_codes(model_or_path, entries: Sequence[TrialEntry], bank: FeatureBank,
                  batch_size: int = 32) -> np.ndarray:
    model = _as_model(model_or_path)
    codes, _ = _grouped_forward(model, [bank.get(e) for e in entries], batch_size)
    return codes.numpy()


def compute_eer(scores: Sequence[float], is_bona_fide: Sequence[bool]) -> EvalResult:
    """Equal error rate with higher scores meaning bona fide.

    Operating points are evaluated at -inf, +inf and the midpoints between
    consecutive distinct scores, with FAR(t) the fraction of spoof trials
    scoring >= t and FRR(t) the fraction of bona-fide trials scoring < t. The
    EER is read at the FAR/FRR crossing by linear interpolation between the
    two operating points that bracket it.
    """
    s = np.asarray(scores, dtype=np.float64)
    bona = np.asarray(is_bona_fide, dtype=bool)
    if s.shape != bona.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_t, n_n = int(bona.sum()), int((~bona).sum())
    if n_t == 0 or n_n == 0:
        raise ValueError("EER needs at least one bona-fide and one spoof trial")

    uniq = np.unique(s)
    thresholds = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2, [np.inf]])
    tgt = np.sort(s[bona])
    non = np.sort(s[~bona])
    frr = np.searchsorted(tgt, thresholds, side="left") / n_t
    far = 1.0 - np.searchsorted(non, thresholds, side="left") / n_n
    diff = far - frr
    i = int(np.argmax(diff <= 0))
    if diff[i] == 0:
        return EvalResult(float(far[i]), float(thresholds[i]), n_t, n_n)
    alpha = diff[i - 1] / (diff[i - 1] - diff[i])
    eer = far[i - 1] + alpha * (far[i] - far[i - 1])
    lo, hi = thresholds[i - 1], thresholds[i]
    if np.isfinite(lo) and np.isfinite(hi):
        thr = lo + alpha * (hi - lo)
    else:
        thr = hi if np.isfinite(hi) else lo
    return EvalResult(float(eer), float(thr), n_t, n_n)


def eer_for_trials(scores: Iterable[TrialScore], entries: Sequence[TrialEntry]) -> EvalResult:
    keys = {e.utt_id: e.key for e in entries}
    vals, labels = [], []
    for ts in scores:
        if ts.utt_id not in keys:
            raise KeyError(f"scored utterance {ts.utt_id} is not in the protocol")
        vals.append(ts.score)
        labels.append(keys[ts.utt_id] is Key.BONA_FIDE)
    return compute_eer(vals, labels)


def _stratified_split(labels: np.ndarray, heldout_fraction: float, rng: np.random.Generator):
    train, held = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = max(1, int(round(len(idx) * heldout_fraction)))
        held.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(np.array(train)), np.sort(np.array(held))


def train_probe(codes: np.ndarray, labels: np.ndarray, category: SubsidiaryCategory, n_steps: int,
                seed: int = 0, heldout_fraction: float = 0.25,
                opt: OptimizerConfig = OptimizerConfig()) -> ProbeResult:
    """Fit a fresh adversarial-style subsidiary head on fixed codes.

    The head is re-initialised from ``seed`` each call so results are
    comparable across encoders. Loss is recorded per training step; accuracy
    and loss are reported on a stratified held-out split.
    """
    codes = np.asarray(codes, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = category.n_levels
    if len(labels) < 2 * n_classes or len(np.unique(labels)) < 2:
        raise ValueError(f"not enough labeled trials to probe {category.value}")
    rng = np.random.default_rng(seed)
    train_idx, held_idx = _stratified_split(labels, heldout_fraction, rng)
    x_tr, y_tr = torch.from_numpy(codes[train_idx]), torch.from_numpy(labels[train_idx])
    x_he, y_he = torch.from_numpy(codes[held_idx]), torch.from_numpy(labels[held_idx])

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        head = SubsidiaryHead("can", n_classes, codes.shape[1])
    optim = torch.optim.Adam(head.parameters(), lr=opt.learning_rate, weight_decay=opt.weight_decay,
                             amsgrad=True)
    curve = []
    order = rng.permutation(len(train_idx))
    pos = 0
    for _ in range(n_steps):
        if pos + opt.batch_size > len(order):
            order, pos = rng.permutation(len(train_idx)), 0
        mb = order[pos:pos + opt.batch_size]
        pos += opt.batch_size
        loss = cce_loss(head(x_tr[mb]), y_tr[mb])
        optim.zero_grad()
        loss.backward()
        optim.step()
        curve.append(float(loss.detach()))
    with torch.no_grad():
        logits = head(x_he)
        acc = float((logits.argmax(dim=1) == y_he).float().mean())
        held_loss = float(cce_loss(logits, y_he))
    return ProbeResult(category, curve, acc, 1.0 / n_classes, held_loss, len(train_idx), len(held_idx))


def probe_subsidiary(model_or_path, entries: Sequence[TrialEntry], bank: FeatureBank,
                     category: SubsidiaryCategory, n_steps: int = 500, seed: int = 0,
                     heldout_fraction: float = 0.25) -> ProbeResult:
    """How much of ``category`` a fresh classifier can read from frozen codes.

    Replay categories are probed on spoof trials only, since bona fide has no
    replay configuration.
    """
    labeled = [(e, subsidiary_label(e, category, Scheme.CAN)) for e in entries]
    labeled = [(e, y) for e, y in labeled if y is not None]
    if not labeled:
        raise ValueError(f"no trials carry a {category.value} label")
    codes = extract_codes(model_or_path, [e for e, _ in labeled], bank)
    return train_probe(codes, np.array([y for _, y in labeled]), category, n_steps, seed, heldout_fraction)


# -- files --------------------------------------------------------------------


def write_scores(path: str | os.PathLike, scores: Iterable[TrialScore]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ts in scores:
            f.write(f"{ts.utt_id} {ts.score:.6f}\n")


def read_scores(path: str | os.PathLike) -> list[TrialScore]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected '<utt_id> <score>'")
            out.append(TrialScore(parts[0], float(parts[1])))
    return out


def write_eer_report(path: str | os.PathLike, result: EvalResult, **context) -> None:
    report = {"eer": result.eer, "eer_percent": 100 * result.eer, "threshold": result.threshold,
              "n_bona_fide": result.n_target, "n_spoof": result.n_nontarget, **context}
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_probe_report(path: str | os.PathLike, result: ProbeResult) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,loss\n")
        for i, loss in enumerate(result.loss_curve):
            f.write(f"{i},{loss:.8g}\n")
        f.write(f"# category={result.category.value} final_accuracy={result.final_accuracy:.6f} "
                f"chance={result.chance_level:.6f} heldout_loss={result.heldout_loss:.6f} "
                f"plateau={result.plateau():.6f} n_train={result.n_train} n_heldout={result.n_heldout}\n")


def plot_curves(loss_csv: str | os.PathLike, path: str | os.PathLike) -> None:
    """Primary and subsidiary loss against step, with CAN phases shaded."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_loss_csv(loss_csv)
    if not rows:
        raise ValueError(f"{loss_csv}: no loss rows")
    steps = np.array([r["step"] for r in rows])
    phase = np.array([r["phase"] for r in rows])
    fig, ax = plt.subplots(figsize=(8, 3.5))
    colors = {1: "#ffffff", 2: "#e8f0ff", 3: "#fff0e0"}
    start = 0
    for i in range(1, len(rows) + 1):
        if i == len(rows) or phase[i] != phase[start]:
            ax.axvspan(steps[start], steps[i - 1] + 1, color=colors.get(int(phase[start]), "#ffffff"), lw=0)
            start = i
    for col, label in (("loss_primary", "primary"), ("loss_subsidiary", "subsidiary"), ("loss_orth", "orthogonality")):
        y = np.array([r[col] for r in rows])
        mask = y != 0
        if mask.any():
            ax.plot(steps[mask], y[mask], ".", ms=2, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
