"""Training loop: triplet epochs, momentum SGD, one-cycle schedule, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .backbone import build_backbone, strip_for_inference
from .config import (
    DIV_FACTOR,
    FINAL_DIV_FACTOR,
    WARMUP_FRACTION,
    OptimConfig,
    RunManifest,
    TorsdConfig,
    check_config,
)
from .data import (
    LabeledDataset,
    Normalizer,
    TripletBatch,
    assemble_batches,
    augment,
    num_batches,
    sample_epoch_triplets,
)
from .errors import ArgumentError, DivergenceError
from .losses import COMPONENTS, LossBreakdown, compute_losses
from .relation import TorsdModel, build_model

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "lr", *COMPONENTS, "total"]


def _cosine(start: float, end: float, pct: float) -> float:
    return end + (start - end) / 2.0 * (math.cos(math.pi * pct) + 1.0)


def one_cycle_lr(step: int, total_steps: int, peak_lr: float) -> float:
    """Cosine one-cycle: peak/25 -> peak over the first 30% of steps, then -> peak/1e4."""
    if total_steps < 1 or not 0 <= step < total_steps:
        raise ArgumentError(f"step {step} outside [0, {total_steps})")
    initial = peak_lr / DIV_FACTOR
    final = peak_lr / FINAL_DIV_FACTOR
    warm_end = WARMUP_FRACTION * total_steps
    if step <= warm_end:
        return _cosine(initial, peak_lr, step / warm_end)
    return _cosine(peak_lr, final, (step - warm_end) / (total_steps - 1 - warm_end))


def learning_rate(opt: OptimConfig, step: int, total_steps: int) -> float:
    if opt.scheduler == "constant":
        return opt.peak_lr
    return one_cycle_lr(step, total_steps, opt.peak_lr)


def epoch_seed(seed: int, epoch: int) -> int:
    return seed ^ epoch


@dataclass
class TrainState:
    model: TorsdModel
    optimizer: torch.optim.Optimizer
    epoch: int = 0  # completed epochs
    step: int = 0  # completed optimiser steps

    def optimizer_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, param in self.model.named_parameters():
            buf = self.optimizer.state.get(param, {}).get("momentum_buffer")
            if buf is not None:
                out[f"optim.{name}"] = buf
        return out

    def load_optimizer_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for name, param in self.model.named_parameters():
            key = f"optim.{name}"
            if key in tensors:
                self.optimizer.state[param]["momentum_buffer"] = tensors[key].to(param.dtype).clone()


@dataclass
class EvalReport:
    accuracy: float
    per_class: list[float]
    loss: float
    counts: list[int] = field(default_factory=list)

    def __str__(self):
        per = " ".join(f"{a:.4f}" for a in self.per_class)
        return f"top1={self.accuracy:.4f} loss={self.loss:.4f} per_class=[{per}]"


def make_optimizer(model: torch.nn.Module, opt: OptimConfig) -> torch.optim.SGD:
    # one group: weight decay applies to every trainable parameter
    return torch.optim.SGD(model.parameters(), lr=opt.peak_lr, momentum=opt.momentum, weight_decay=opt.weight_decay)


def new_state(model: TorsdModel, opt: OptimConfig) -> TrainState:
    return TrainState(model=model, optimizer=make_optimizer(model, opt))


def train_step(state: TrainState, batch: TripletBatch, cfg: TorsdConfig, lr: float,
               grad_clip: float = 0.0) -> LossBreakdown:
    """One forward/backward/update; raises DivergenceError on a non-finite loss."""
    state.model.train()
    breakdown, _ = compute_losses(state.model, batch, cfg)
    if not breakdown.is_finite():
        raise DivergenceError(breakdown, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), grad_clip)
    state.optimizer.step()
    state.step += 1
    return breakdown


def epoch_batches(dataset: LabeledDataset, opt: OptimConfig, seed: int, epoch: int,
                  normalizer: Normalizer | None, augment_images: bool = True) -> Iterable[TripletBatch]:
    es = epoch_seed(seed, epoch)
    partition = sample_epoch_triplets(dataset, np.random.default_rng(es))
    aug_rng = np.random.default_rng([es, 1])

    def transform(img):
        return augment(img, augment_images, aug_rng, normalizer)

    return assemble_batches(partition.triplets, dataset, opt.batch_size, transform)


@torch.no_grad()
def evaluate(bundle, dataset: LabeledDataset, normalizer: Normalizer | None = None,
             batch_size: int = 256) -> EvalReport:
    """Top-1 accuracy through the stripped inference path."""
    if len(dataset) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    model = strip_for_inference(bundle)
    model.eval()
    dtype = model.fc.weight.dtype
    correct = np.zeros(dataset.num_classes, dtype=np.int64)
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    loss_sum = 0.0
    for start in range(0, len(dataset), batch_size):
        imgs = dataset.images[start : start + batch_size]
        if normalizer is not None:
            imgs = normalizer(imgs)
        x = torch.from_numpy(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2))).to(dtype)
        y = torch.from_numpy(dataset.labels[start : start + batch_size])
        logits = model(x)
        loss_sum += float(F.cross_entropy(logits, y, reduction="sum"))
        hits = (logits.argmax(dim=1) == y).numpy()
        np.add.at(correct, y.numpy()[hits], 1)
    per_class = [float(c / n) if n else float("nan") for c, n in zip(correct, counts)]
    return EvalReport(
        accuracy=float(correct.sum() / len(dataset)),
        per_class=per_class,
        loss=loss_sum / len(dataset),
        counts=counts.tolist(),
    )


def _write_row(path: Path, header, row) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(header)
        writer.writerow(row)


def _fmt(v: float) -> str:
    return repr(float(v))


def save_train_checkpoint(path, state: TrainState, manifest: RunManifest) -> Path:
    tensors = dict(state.model.state_dict())
    tensors.update(state.optimizer_tensors())
    return ckpt.save_checkpoint(path, manifest, tensors, {"epoch": state.epoch, "step": state.step})


def build_bundle(cfg: TorsdConfig, num_classes: int, input_shape, backbone: str = "toy_cnn") -> TorsdModel:
    return build_model(build_backbone(backbone, num_classes, input_shape, seed=cfg.seed), cfg)


@dataclass
class TrainResult:
    state: TrainState
    manifest: RunManifest
    final_checkpoint: Path
    history: list[EvalReport]


def train(
    dataset: LabeledDataset,
    cfg: TorsdConfig,
    opt: OptimConfig,
    out_dir,
    eval_dataset: LabeledDataset | None = None,
    backbone: str = "toy_cnn",
    ckpt_every: int = 10,
    resume_from=None,
    augment_images: bool = True,
) -> TrainResult:
    """Run ``opt.epochs`` epochs, re-partitioning the triplets every epoch.

    Writes ``metrics.csv`` (one row per step), ``eval.csv`` (one row per
    epoch), ``manifest.txt`` and ``ckpt_epoch_{e}/`` directories under
    ``out_dir``. On divergence the last written checkpoint is kept and the
    error propagates.
    """
    check_config(cfg, opt)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    eval_dataset = eval_dataset if eval_dataset is not None else dataset

    if resume_from is not None:
        model, manifest = ckpt.load_model(resume_from)
        normalizer = Normalizer(manifest.norm_mean, manifest.norm_std)
        state = new_state(model, opt)
        state.load_optimizer_tensors(ckpt.load_tensors(resume_from))
        counters = ckpt.load_state(resume_from)
        state.epoch, state.step = counters.get("epoch", 0), counters.get("step", 0)
    else:
        normalizer = Normalizer.fit(dataset.images)
        model = build_bundle(cfg, dataset.num_classes, dataset.image_shape, backbone)
        manifest = RunManifest(
            cfg=cfg,
            opt=opt,
            dataset=dataset.name,
            backbone=model.backbone.name,
            num_classes=dataset.num_classes,
            input_shape=dataset.image_shape,
            norm_mean=normalizer.mean,
            norm_std=normalizer.std,
        )
        state = new_state(model, opt)
    (out_dir / "manifest.txt").write_text(manifest.to_text(), encoding="utf-8")

    # the maximal triplet count depends only on class sizes, so it is fixed
    triplets_per_epoch = len(sample_epoch_triplets(dataset, np.random.default_rng(cfg.seed)))
    steps_per_epoch = num_batches(triplets_per_epoch, opt.batch_size)
    total_steps = opt.epochs * steps_per_epoch
    metrics_path = out_dir / "metrics.csv"
    eval_path = out_dir / "eval.csv"
    history = []
    last_ckpt = None

    for epoch in range(state.epoch, opt.epochs):
        for batch in epoch_batches(dataset, opt, cfg.seed, epoch, normalizer, augment_images):
            lr = learning_rate(opt, state.step, total_steps)
            breakdown = train_step(state, batch, cfg, lr, opt.grad_clip)
            values = breakdown.as_floats()
            _write_row(metrics_path, METRICS_HEADER,
                       [state.step, _fmt(lr)] + [_fmt(values[c]) for c in COMPONENTS] + [_fmt(values["total"])])
        state.epoch = epoch + 1
        report = evaluate(state.model, eval_dataset, normalizer)
        history.append(report)
        _write_row(eval_path, ["epoch", "accuracy", "loss"] + [f"class_{c}" for c in range(len(report.per_class))],
                   [state.epoch, _fmt(report.accuracy), _fmt(report.loss)] + [_fmt(a) for a in report.per_class])
        log.info("epoch %d/%d %s", state.epoch, opt.epochs, report)
        if state.epoch % ckpt_every == 0 or state.epoch == opt.epochs:
            last_ckpt = save_train_checkpoint(out_dir / f"ckpt_epoch_{state.epoch}", state, manifest)

    if last_ckpt is None:
        last_ckpt = save_train_checkpoint(out_dir / f"ckpt_epoch_{state.epoch}", state, manifest)
    return TrainResult(state, manifest, last_ckpt, history)
