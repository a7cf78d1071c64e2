"""Command-line entry point: ``torsd <subcommand> [flags]``.

Exit codes: 0 success, 1 configuration, 2 data, 3 divergence, 4 checkpoint/IO,
5 a check ran but failed (gradcheck tolerance, sample-check property).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import (
    OptimConfig,
    TorsdConfig,
    check_config,
    configs_from_mapping,
    load_config,
    parse_assignments,
)
from .data import Normalizer, check_partition, load_dataset, make_batch, make_synthetic_dataset, sample_epoch_triplets
from .errors import (
    CheckpointError,
    ConfigSyntaxError,
    ConfigValidationError,
    DatasetError,
    DivergenceError,
    InvalidImageError,
    SamplingInfeasibleError,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_IO, EXIT_CHECK_FAILED = 0, 1, 2, 3, 4, 5
GRADCHECK_TOLERANCE = 1e-4

log = logging.getLogger("torsd")


class ConfigFileMissing(ConfigSyntaxError):
    pass


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def resolve_configs(args, defaults=None) -> tuple[TorsdConfig, OptimConfig]:
    """Config file (or defaults), then ``--set`` overrides, then ``--seed``; validated."""
    if getattr(args, "config", None):
        if not Path(args.config).is_file():
            raise ConfigFileMissing(f"{args.config}: no such config file")
        base = load_config(args.config)
    else:
        base = defaults or (TorsdConfig(), OptimConfig())
    overrides = parse_assignments(args.set or [], source="--set")
    cfg, opt = configs_from_mapping(overrides, base=base, source="--set")
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    check_config(cfg, opt)
    return cfg, opt


def _normalizer(manifest) -> Normalizer:
    return Normalizer(manifest.norm_mean, manifest.norm_std)


def _require_ckpt(path) -> Path:
    path = Path(path)
    if not (path / "manifest.txt").is_file():
        raise CheckpointError(f"{path}: not a checkpoint directory (no manifest.txt)")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .trainer import train

    cfg, opt = resolve_configs(args)
    data = load_dataset(args.data)
    eval_data = load_dataset(args.eval_data) if args.eval_data else None
    resume = _require_ckpt(args.ckpt) if args.ckpt else None
    result = train(data, cfg, opt, args.out, eval_dataset=eval_data, backbone=args.backbone,
                   ckpt_every=args.ckpt_every, resume_from=resume)
    if result.history:
        print(f"epoch {result.state.epoch}: {result.history[-1]}")
    print(f"checkpoint: {result.final_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate

    path = _require_ckpt(args.ckpt)
    model, manifest = ckpt.load_model(path)
    data = load_dataset(args.data)
    report = evaluate(model, data, _normalizer(manifest))
    print(report)
    out = Path(args.out) if args.out else path
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["accuracy", "loss"] + [f"class_{c}" for c in range(len(report.per_class))])
        writer.writerow([repr(report.accuracy), repr(report.loss)] + [repr(a) for a in report.per_class])
    return EXIT_OK


def cmd_export(args) -> int:
    path = _require_ckpt(args.ckpt)
    out = ckpt.export_stripped(path, args.out)
    print(f"stripped checkpoint: {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import embed_2d, emit_report, extract_depth_features, sse_ssb, Separability

    path = _require_ckpt(args.ckpt)
    model, manifest = ckpt.load_model(path)
    data = load_dataset(args.data)
    if args.max_samples and len(data) > args.max_samples:
        pick = np.random.default_rng(args.seed or 0).choice(len(data), args.max_samples, replace=False)
        data = data.subset(np.sort(pick))
    k = model.k if hasattr(model, "k") else model.backbone.k
    depths = args.depth or list(range(1, k + 1))
    rows, embeddings = [], {}
    for depth in depths:
        feats = extract_depth_features(model, data, depth, _normalizer(manifest))
        rows.append(Separability(depth, *sse_ssb(feats)))
        embeddings[depth] = (embed_2d(feats, seed=args.seed or 0), feats.labels)
        print(f"depth {depth}: SSE={rows[-1].sse:.6g} SSB={rows[-1].ssb:.6g} ratio={rows[-1].ratio:.6g}")
    emit_report(rows, embeddings, args.out, plots=not args.no_plots)
    return EXIT_OK


def tiny_gradcheck_case(cfg: TorsdConfig):
    """A sub-10k-parameter bundle and a single-triplet batch of 16x16 images."""
    from .backbone import build_toy_cnn
    from .relation import build_model

    model = build_model(build_toy_cnn(2, width=4, input_shape=(3, 16, 16), seed=cfg.seed), cfg)
    data = make_synthetic_dataset(2, 3, size=16, seed=cfg.seed)
    partition = sample_epoch_triplets(data, np.random.default_rng(cfg.seed))
    return model, make_batch(partition.triplets[:1], data)


def cmd_gradcheck(args) -> int:
    from .analysis import gradcheck

    # a narrow embedding keeps the default bundle under 10k parameters
    cfg, _ = resolve_configs(args, defaults=(TorsdConfig(embed_dim=8), OptimConfig()))
    model, batch = tiny_gradcheck_case(cfg)
    report = gradcheck(model, cfg, batch)
    ok = True
    for group, err in report.items():
        passed = err < GRADCHECK_TOLERANCE
        ok &= passed
        print(f"{group:12s} {err:.3e} {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_sample_check(args) -> int:
    data = load_dataset(args.data)
    seed = args.seed or 0
    failures = 0
    for epoch in range(args.epochs):
        partition = sample_epoch_triplets(data, np.random.default_rng(seed ^ epoch))
        problems = check_partition(partition, data.labels, len(data))
        failures += bool(problems)
        for p in problems:
            print(f"epoch {epoch}: {p}")
    print(f"{args.epochs - failures}/{args.epochs} epochs satisfy every partition property "
          f"({len(partition)} triplets, {partition.n_dropped} dropped)")
    return EXIT_OK if failures == 0 else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _add_config_flags(p):
    p.add_argument("--config", help="key=value config file; defaults apply when omitted")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable), e.g. --set enable_ac=false")
    p.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="torsd", description="Triplet relation self-distillation training tools.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a bundle on a dataset")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="training set: image directory with index.txt or packed file")
    p.add_argument("--eval-data", help="evaluation set (defaults to the training set)")
    p.add_argument("--out", required=True, help="output directory for logs and checkpoints")
    p.add_argument("--ckpt", help="resume from this checkpoint directory")
    p.add_argument("--backbone", default="toy_cnn", help="toy_cnn, toy_cnn_wN or resnet18")
    p.add_argument("--ckpt-every", type=_positive_int, default=10, help="checkpoint cadence in epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint directory (full or stripped)")
    p.add_argument("--data", required=True, help="evaluation set")
    p.add_argument("--out", help="where to write eval.csv (defaults to the checkpoint directory)")
    p.add_argument("--seed", type=int, help="accepted for symmetry; evaluation is deterministic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="per-depth SSE/SSB, 2-D embeddings and plots")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset to embed")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--depth", type=int, action="append", help="depth to analyse (repeatable; default all)")
    p.add_argument("--seed", type=int, help="embedding and subsampling seed")
    p.add_argument("--max-samples", type=int, default=2000, help="subsample larger datasets to this size")
    p.add_argument("--no-plots", action="store_true", help="write CSVs only")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export", help="write a backbone-only checkpoint")
    p.add_argument("--ckpt", required=True, help="source checkpoint directory")
    p.add_argument("--out", required=True, help="destination directory")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference check of the total loss on a tiny bundle")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sample-check", help="verify triplet partitions over seeded epochs")
    p.add_argument("--data", required=True, help="dataset to partition")
    p.add_argument("--seed", type=int, help="base seed; epoch e uses seed xor e")
    p.add_argument("--epochs", type=_positive_int, default=100, help="number of epochs to check")
    p.set_defaults(func=cmd_sample_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigSyntaxError, ConfigValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, SamplingInfeasibleError, InvalidImageError) as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
