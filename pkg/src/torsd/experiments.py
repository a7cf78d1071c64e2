"""Desk-scale experiments: baseline vs full training, and the ablation rows.

These are small enough for a CPU: a toy CNN on a synthetic 4-class image
set of at most 2000 images.
"""

from __future__ import annotations

import csv
import dataclasses
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import separability_report
from .config import OptimConfig, TorsdConfig
from .data import LabeledDataset, Normalizer, make_synthetic_dataset
from .losses import COMPONENTS
from .trainer import train

# rows of the ablation table, as toggle sets
ABLATIONS = {
    "BL": dict(enable_rn=False, enable_ac=False, enable_ld=False, enable_handcrafted_rd=False),
    "+RD": dict(enable_rn=False, enable_ac=False, enable_ld=False, enable_handcrafted_rd=True),
    "+RN": dict(enable_rn=True, enable_ac=False, enable_ld=False, enable_handcrafted_rd=False),
    "+RN+AC": dict(enable_rn=True, enable_ac=True, enable_ld=False, enable_handcrafted_rd=False),
    "+LD": dict(enable_rn=False, enable_ac=False, enable_ld=True, enable_handcrafted_rd=False),
    "full": dict(enable_rn=True, enable_ac=True, enable_ld=True, enable_handcrafted_rd=False),
}

DESK_OPTIM = OptimConfig(peak_lr=0.1, momentum=0.9, weight_decay=0.0005, epochs=30, batch_size=48)


@dataclass(frozen=True)
class DeskData:
    train: LabeledDataset
    test: LabeledDataset


def desk_data(num_classes: int = 4, train_per_class: int = 60, test_per_class: int = 440,
              noise: float = 1.0, seed: int = 0) -> DeskData:
    """A small, noisy training split and a large test split, 2000 images in total."""
    full = make_synthetic_dataset(num_classes, train_per_class + test_per_class, noise=noise, seed=seed)
    train_idx, test_idx = [], []
    for c in range(num_classes):
        idx = np.flatnonzero(full.labels == c)
        train_idx.extend(idx[:train_per_class])
        test_idx.extend(idx[train_per_class:])
    return DeskData(full.subset(sorted(train_idx)), full.subset(sorted(test_idx)))


@dataclass
class RunOutcome:
    name: str
    seed: int
    accuracy: float
    ratios: list[float]
    last_losses: dict[str, float]
    active: tuple[str, ...]  # loss components that were nonzero at some step


def run_config(name: str, cfg: TorsdConfig, opt: OptimConfig, data: DeskData, out_dir=None,
               width: int = 8) -> RunOutcome:
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(out_dir) if out_dir is not None else Path(tmp)
        result = train(data.train, cfg, opt, out, eval_dataset=data.test, backbone=f"toy_cnn_w{width}",
                       ckpt_every=opt.epochs)
        normalizer = Normalizer(result.manifest.norm_mean, result.manifest.norm_std)
        ratios = [row.ratio for row in separability_report(result.state.model, data.test, normalizer)]
        last, active = _read_metrics(out / "metrics.csv")
    return RunOutcome(name, cfg.seed, result.history[-1].accuracy, ratios, last, active)


def _read_metrics(path: Path) -> tuple[dict[str, float], tuple[str, ...]]:
    with open(path) as fh:
        rows = [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
    active = tuple(c for c in COMPONENTS if any(row[c] != 0.0 for row in rows))
    return rows[-1], active


def baseline_vs_full(seeds=(0, 1, 2), opt: OptimConfig = DESK_OPTIM, data: DeskData | None = None,
                     base: TorsdConfig | None = None) -> dict[str, list[RunOutcome]]:
    data = data or desk_data()
    base = base or TorsdConfig()
    out = {"BL": [], "full": []}
    for seed in seeds:
        for name in out:
            cfg = dataclasses.replace(base, seed=seed, **ABLATIONS[name])
            out[name].append(run_config(name, cfg, opt, data))
    return out


def ablation_rows(seed: int = 0, opt: OptimConfig = DESK_OPTIM, data: DeskData | None = None,
                  base: TorsdConfig | None = None) -> dict[str, RunOutcome]:
    data = data or desk_data()
    base = base or TorsdConfig()
    return {
        name: run_config(name, dataclasses.replace(base, seed=seed, **toggles), opt, data)
        for name, toggles in ABLATIONS.items()
    }
