"""Command-line experiment runner.

Every command reads and writes plain files. Training is driven by an INI
config (one ``[section]`` per concern) and ``key=value`` overrides::

    replaysub synth --out toy
    replaysub train --config exp.ini mode=mtl category=reverberation ring=on
    replaysub score --checkpoint run/checkpoints/epoch_009.pt --protocol toy/dev/protocol.txt --out dev.scores
    replaysub eer --scores dev.scores --protocol toy/dev/protocol.txt

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .corpus import (
    OFFICIAL_COUNTS,
    Key,
    ProtocolError,
    SubsidiaryCategory,
    corpus_counts,
    format_protocol_line,
    load_corpus,
    matches_official_subset,
)
from .features import FeatureBank
from .network import CheckpointError, EncoderConfig
from .synth import AUDIO_DIR, SynthSpec, synth_corpus
from .training import Mode, NumericalError, OptimizerConfig, PhaseSchedule, TrainConfig, run_training

logger = logging.getLogger("replaysub")

DATA_ROOT_ENV = "REPLAYSUB_DATA_ROOT"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

DEFAULT_CONFIG = """
[corpus]
train_protocol =
dev_protocol =
audio_root =
dev_audio_root =
feature_cache =

[train]
mode = baseline
category =
ring = off
epochs = 10
seed = 0
crop_frames = 120
output_dir = runs/experiment
keep_checkpoints = all
phase2_train_encoder = off

[optimizer]
learning_rate = 0.0005
weight_decay = 0.0001
batch_size = 32

[encoder]
preset = full

[mtl]
lambda_pri = 1.0
lambda_sub = 0.5

[can]
phases = 3:1:1
orth_weight = 1.0
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0", ""):
        return False
    raise UsageError(f"expected on/off, got {value!r}")


def load_config(path: str | None, overrides: list[str]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.read_string(DEFAULT_CONFIG)
    if path is not None:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cp.read(path, encoding="utf-8")
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override must look like key=value or section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, _, option = key.strip().rpartition(".")
        section = section or "train"
        if not cp.has_section(section):
            raise UsageError(f"unknown config section {section!r}")
        cp.set(section, option, value.strip())
    return cp


def encoder_from_config(cp: configparser.ConfigParser) -> EncoderConfig:
    sec = cp["encoder"]
    preset = sec.get("preset", "full").strip()
    if preset not in ("full", "toy"):
        raise UsageError(f"encoder preset must be full or toy, got {preset!r}")
    base = EncoderConfig.toy() if preset == "toy" else EncoderConfig()
    fields = base.to_dict()
    for name in ("conv1_filters", "stage_filters", "gru_units", "code_dim"):
        if name in sec:
            fields[name] = sec.getint(name)
    if "lrelu_slope" in sec:
        fields["lrelu_slope"] = sec.getfloat("lrelu_slope")
    return EncoderConfig.from_dict(fields)


def train_config_from(cp: configparser.ConfigParser) -> TrainConfig:
    t = cp["train"]
    category = t.get("category", "").strip() or None
    phases = tuple(int(p) for p in cp["can"].get("phases", "3:1:1").split(":"))
    try:
        return TrainConfig(
            mode=Mode(t.get("mode").strip()),
            category=None if category is None else SubsidiaryCategory.parse(category),
            ring=_bool(t.get("ring", "off")),
            epochs=t.getint("epochs"),
            seed=t.getint("seed"),
            optimizer=OptimizerConfig(cp["optimizer"].getfloat("learning_rate"),
                                      cp["optimizer"].getfloat("weight_decay"),
                                      cp["optimizer"].getint("batch_size")),
            encoder=encoder_from_config(cp),
            crop_frames=t.getint("crop_frames"),
            schedule=PhaseSchedule(phases),
            lambda_pri=cp["mtl"].getfloat("lambda_pri"),
            lambda_sub=cp["mtl"].getfloat("lambda_sub"),
            orth_weight=cp["can"].getfloat("orth_weight"),
            phase2_train_encoder=_bool(t.get("phase2_train_encoder", "off")),
            keep_checkpoints=t.get("keep_checkpoints", "all").strip(),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def config_text(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def write_manifest(out_dir: Path, command: str, config: dict | str, seed: int | None) -> Path:
    text = config if isinstance(config, str) else json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "version": __version__,
        "config_sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
        "seed": seed,
        "config": config,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _audio_root(arg: str | None, protocol: str) -> str:
    if not Path(protocol).is_file():
        raise FileNotFoundError(f"protocol file not found: {protocol}")
    if arg:
        return arg
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return env
    sibling = Path(protocol).parent / AUDIO_DIR
    if sibling.is_dir():
        return str(sibling)
    raise UsageError(f"no audio root: pass --audio-root or set {DATA_ROOT_ENV}")


# -- commands -----------------------------------------------------------------


def cmd_prepare(args) -> int:
    entries = load_corpus(args.protocol, _audio_root(args.audio_root, args.protocol))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "index.tsv", "w", encoding="utf-8") as f:
        for e in entries:
            f.write(f"{format_protocol_line(e)}\t{e.audio_path}\n")
    counts = corpus_counts(entries)
    official = [s for s in OFFICIAL_COUNTS if matches_official_subset(entries, s)]
    summary = {"n_bona_fide": counts[Key.BONA_FIDE], "n_spoof": counts[Key.SPOOF],
               "official_subset": official[0] if official else None}
    if args.cache_features:
        bank = FeatureBank(out / "features", in_memory=False)
        for e in entries:
            bank.get(e)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "prepare", {"protocol": args.protocol, "audio_root": str(entries[0].audio_path.parent)}, None)
    print(f"{len(entries)} trials: {summary['n_bona_fide']} bona fide, {summary['n_spoof']} spoof")
    return EXIT_OK


def cmd_synth(args) -> int:
    strengths = {c.value: 1.0 for c in SubsidiaryCategory}
    for item in args.strength or []:
        name, _, value = item.partition("=")
        strengths[SubsidiaryCategory.parse(name).value] = float(value)
    out = Path(args.out)
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    for split in splits:
        n = args.n_per_cell if split == splits[0] else args.dev_n_per_cell
        spec = SynthSpec(n_per_cell=n, duration=args.duration, attribute_strengths=strengths, seed=args.seed)
        protocol = synth_corpus(spec, out / split, split)
        print(f"{split}: {protocol}")
    write_manifest(out, "synth", {"splits": splits, "n_per_cell": args.n_per_cell, "dev_n_per_cell":
                                  args.dev_n_per_cell, "duration": args.duration, "strengths": strengths}, args.seed)
    return EXIT_OK


def cmd_train(args) -> int:
    cp = load_config(args.config, args.overrides)
    cfg = train_config_from(cp)
    corpus = cp["corpus"]
    protocol = corpus.get("train_protocol", "").strip()
    if not protocol:
        raise UsageError("no training protocol: set corpus.train_protocol")
    entries = load_corpus(protocol, _audio_root(corpus.get("audio_root", "").strip() or None, protocol))
    out = Path(cp["train"].get("output_dir").strip())
    out.mkdir(parents=True, exist_ok=True)
    text = config_text(cp)
    (out / "config.ini").write_text(text, encoding="utf-8")
    write_manifest(out, "train", text, cfg.seed)
    cache = corpus.get("feature_cache", "").strip() or None
    bank = FeatureBank(cache)
    result = run_training(cfg, entries, bank, out)
    print(f"trained {cfg.epochs} epochs ({len(result.reports)} steps); checkpoints in {out / 'checkpoints'}")

    dev = corpus.get("dev_protocol", "").strip()
    if dev:
        from .evaluation import eer_for_trials, score_corpus, write_eer_report, write_scores

        dev_entries = load_corpus(dev, _audio_root(corpus.get("dev_audio_root", "").strip() or None, dev))
        scores = score_corpus(result.model, dev_entries, bank)
        write_scores(out / "dev.scores", scores)
        res = eer_for_trials(scores, dev_entries)
        write_eer_report(out / "dev_eer.json", res, checkpoint=str(result.checkpoints[-1]))
        print(f"dev EER {100 * res.eer:.2f}%")
    return EXIT_OK


def cmd_score(args) -> int:
    from .evaluation import score_corpus, write_scores

    entries = load_corpus(args.protocol, _audio_root(args.audio_root, args.protocol))
    scores = score_corpus(args.checkpoint, entries, FeatureBank(args.feature_cache))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_scores(args.out, scores)
    write_manifest(Path(args.out).parent, "score", {"checkpoint": args.checkpoint, "protocol": args.protocol}, None)
    print(f"wrote {len(scores)} scores to {args.out}")
    return EXIT_OK


def cmd_eer(args) -> int:
    from .corpus import read_protocol
    from .evaluation import eer_for_trials, read_scores, write_eer_report

    res = eer_for_trials(read_scores(args.scores), read_protocol(args.protocol))
    if args.out:
        write_eer_report(args.out, res, scores=args.scores, protocol=args.protocol)
    print(f"EER {100 * res.eer:.4f}% at threshold {res.threshold:.6f} "
          f"({res.n_target} bona fide, {res.n_nontarget} spoof)")
    return EXIT_OK


def cmd_probe(args) -> int:
    from .evaluation import probe_subsidiary, write_probe_report

    entries = load_corpus(args.protocol, _audio_root(args.audio_root, args.protocol))
    category = SubsidiaryCategory.parse(args.category)
    res = probe_subsidiary(args.checkpoint, entries, FeatureBank(args.feature_cache), category,
                           args.steps, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_probe_report(args.out, res)
    print(f"{category.value}: held-out accuracy {res.final_accuracy:.3f} (chance {res.chance_level:.3f}), "
          f"loss plateau {res.plateau():.4f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .evaluation import plot_curves

    plot_curves(args.csv, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="replaysub", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="index a protocol and its audio")
    s.add_argument("--protocol", required=True)
    s.add_argument("--audio-root")
    s.add_argument("--out", required=True)
    s.add_argument("--cache-features", action="store_true", help="also write per-utterance spectrogram files")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synth", help="render a toy corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--splits", default="train,dev")
    s.add_argument("--n-per-cell", type=int, default=5)
    s.add_argument("--dev-n-per-cell", type=int, default=2)
    s.add_argument("--duration", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--strength", action="append", metavar="CATEGORY=VALUE")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a detector")
    s.add_argument("--config")
    s.add_argument("overrides", nargs="*", metavar="[section.]key=value")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score every trial of a protocol")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--protocol", required=True)
    s.add_argument("--audio-root")
    s.add_argument("--feature-cache")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eer", help="equal error rate of a score file")
    s.add_argument("--scores", required=True)
    s.add_argument("--protocol", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eer)

    s = sub.add_parser("probe", help="fit a subsidiary classifier on frozen codes")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--protocol", required=True)
    s.add_argument("--audio-root")
    s.add_argument("--feature-cache")
    s.add_argument("--category", required=True)
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("plot", help="render a loss-curve CSV")
    s.add_argument("--csv", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"replaysub: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"replaysub: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"replaysub: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, ProtocolError, CheckpointError, KeyError, OSError, ValueError) as exc:
        print(f"replaysub: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
