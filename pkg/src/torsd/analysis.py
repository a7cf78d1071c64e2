"""Feature-space separability, 2-D embeddings and finite-difference gradient checks."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .backbone import strip_for_inference
from .data import LabeledDataset, Normalizer
from .errors import ArgumentError, DegenerateError
from .losses import compute_losses
from .relation import head_groups


@dataclass
class DepthFeatureSet:
    depth: int
    features: np.ndarray  # N x C_i, global-average-pooled
    labels: np.ndarray

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ArgumentError("feature/label count mismatch")


@dataclass(frozen=True)
class Separability:
    depth: int
    sse: float
    ssb: float
    ratio: float


@torch.no_grad()
def extract_depth_features(bundle, dataset: LabeledDataset, depth: int,
                           normalizer: Normalizer | None = None, batch_size: int = 256) -> DepthFeatureSet:
    backbone = strip_for_inference(bundle)
    if not 1 <= depth <= backbone.k:
        raise ArgumentError(f"depth {depth} outside [1, {backbone.k}]")
    backbone.eval()
    dtype = backbone.fc.weight.dtype
    chunks = []
    for start in range(0, len(dataset), batch_size):
        imgs = dataset.images[start : start + batch_size]
        if normalizer is not None:
            imgs = normalizer(imgs)
        x = torch.from_numpy(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2))).to(dtype)
        taps, _ = backbone.forward_features(x)
        chunks.append(taps[depth - 1].mean(dim=(-2, -1)).double().numpy())
    return DepthFeatureSet(depth, np.concatenate(chunks), dataset.labels.copy())


def sse_ssb(features: DepthFeatureSet | np.ndarray, labels=None) -> tuple[float, float, float]:
    """Within-class and count-weighted between-class sums of squares.

    Every call checks SSE + SSB against the total scatter.
    """
    if isinstance(features, DepthFeatureSet):
        x, y = features.features, features.labels
    else:
        x, y = features, labels
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim == 1:
        x = x[:, None]
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateError("need at least two classes present; between-class scatter would be 0")
    mu = x.mean(axis=0)
    sse = ssb = 0.0
    for c in classes:
        xc = x[y == c]
        mc = xc.mean(axis=0)
        sse += float(((xc - mc) ** 2).sum())
        ssb += len(xc) * float(((mc - mu) ** 2).sum())
    total = float(((x - mu) ** 2).sum())
    if not math.isclose(sse + ssb, total, rel_tol=1e-6, abs_tol=1e-12):
        raise ArithmeticError(f"scatter decomposition failed: {sse} + {ssb} != {total}")
    ratio = sse / ssb if ssb > 0 else float("nan")
    return sse, ssb, ratio


def separability_report(bundle, dataset: LabeledDataset, normalizer: Normalizer | None = None) -> list[Separability]:
    k = strip_for_inference(bundle).k
    rows = []
    for depth in range(1, k + 1):
        sse, ssb, ratio = sse_ssb(extract_depth_features(bundle, dataset, depth, normalizer))
        rows.append(Separability(depth, sse, ssb, ratio))
    return rows


def embed_2d(features: DepthFeatureSet, seed: int = 0, perplexity: float = 30.0, max_iter: int = 1000) -> np.ndarray:
    from sklearn.manifold import TSNE

    n = len(features.features)
    if n < 5:
        raise ArgumentError(f"t-SNE needs at least 5 samples, got {n}")
    tsne = TSNE(
        n_components=2,
        perplexity=min(perplexity, (n - 1) / 3.0),
        max_iter=max_iter,
        init="pca",
        random_state=seed,
    )
    return tsne.fit_transform(np.asarray(features.features, dtype=np.float64))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def finite_difference_grad(fn: Callable[[], torch.Tensor], param: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``param``."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + eps
            up = float(fn())
            flat[j] = orig - eps
            down = float(fn())
            flat[j] = orig
            gflat[j] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max|a - n| / max(max|a|, max|n|) over a whole parameter group."""
    diff = float((analytic - numeric).abs().max())
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()))
    if not math.isfinite(diff) or not math.isfinite(scale):
        return float("nan")
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / scale


class _Objective(torch.nn.Module):
    def __init__(self, model, loss_fn):
        super().__init__()
        self.model = model
        self.loss_fn = loss_fn

    def forward(self, batch, teachers):
        return self.loss_fn(self.model, batch, teachers)[0].total


def batched_finite_difference(objective: torch.nn.Module, name: str, params: dict, args,
                              eps: float = 1e-6, chunk: int = 1024) -> torch.Tensor:
    """Central differences w.r.t. ``params[name]``, one vmapped call per chunk of coordinates."""
    from torch.func import functional_call, vmap

    base = params[name]
    n = base.numel()

    def at(value):
        return functional_call(objective, {**params, name: value}, args)

    out = []
    for start in range(0, n, chunk):
        idx = torch.arange(start, min(start + chunk, n))
        basis = torch.zeros(len(idx), n, dtype=base.dtype)
        basis[torch.arange(len(idx)), idx] = eps
        basis = basis.view(len(idx), *base.shape)
        up = vmap(at)(base + basis)
        down = vmap(at)(base - basis)
        out.append((up - down) / (2 * eps))
    return torch.cat(out).view(base.shape)


def gradcheck(model, cfg, batch, eps: float = 1e-6, loss_fn=None) -> dict[str, float]:
    """Compare autograd gradients of the total loss with central differences.

    Runs on a float64 copy of ``model`` whose batch-norm layers stop tracking
    running statistics (train-mode outputs never read them). Teacher values
    (deepest-depth targets) are pinned at the unperturbed point, which is
    exactly the function whose gradient the detached objective defines.
    Returns one relative error per parameter group (``backbone``, ``rn.i``,
    ``aux.i``, ``logit_rib``), normalised by the largest gradient entry in the
    group; non-finite gradients are reported as NaN.
    """
    model = copy.deepcopy(model).double()
    model.train()
    for m in model.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            m.track_running_stats = False
    batch = type(batch)(batch.images.double(), batch.y_o, batch.y_p, batch.y_n)
    loss_fn = loss_fn or (lambda m, b, teachers=None: compute_losses(m, b, cfg, teachers))

    breakdown, teachers = loss_fn(model, batch)
    model.zero_grad(set_to_none=True)
    breakdown.total.backward()

    objective = _Objective(model, loss_fn)
    params = {f"model.{k}": v.detach() for k, v in model.named_parameters()}
    names = {id(p): f"model.{k}" for k, p in model.named_parameters()}

    report = {}
    for group, group_params in head_groups(model).items():
        analytic, numeric = [], []
        for p in group_params:
            grad = p.grad if p.grad is not None else torch.zeros_like(p)
            analytic.append(grad.flatten())
            if not torch.all(torch.isfinite(grad)):
                numeric.append(torch.full_like(analytic[-1], float("nan")))
                continue
            with torch.no_grad():
                fd = batched_finite_difference(objective, names[id(p)], params, (batch, teachers), eps)
            numeric.append(fd.flatten())
        if not analytic:
            report[group] = 0.0
            continue
        report[group] = relative_error(torch.cat(analytic), torch.cat(numeric))
    return report


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

SEPARABILITY_HEADER = ["depth", "SSE", "SSB", "ratio"]
EMBEDDING_HEADER = ["x", "y", "label"]


def _fmt(v) -> str:
    return repr(float(v))


def emit_report(
    separability: Sequence[Separability],
    embeddings: Mapping[int, tuple[np.ndarray, np.ndarray]],
    out_dir,
    eval_history: Sequence | None = None,
    plots: bool = True,
) -> list[Path]:
    """Write separability.csv, embeddings_depth{i}.csv and static plots."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = out_dir / "separability.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SEPARABILITY_HEADER)
        for row in separability:
            writer.writerow([row.depth, _fmt(row.sse), _fmt(row.ssb), _fmt(row.ratio)])
    written.append(path)

    for depth, (points, labels) in sorted(embeddings.items()):
        path = out_dir / f"embeddings_depth{depth}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(EMBEDDING_HEADER)
            for (x, y), label in zip(points, labels):
                writer.writerow([_fmt(x), _fmt(y), int(label)])
        written.append(path)

    if eval_history:
        path = out_dir / "eval_history.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "accuracy", "loss"])
            for epoch, report in enumerate(eval_history, 1):
                writer.writerow([epoch, _fmt(report.accuracy), _fmt(report.loss)])
        written.append(path)

    if plots:
        written += _plot(separability, embeddings, out_dir)
    return written


def _plot(separability, embeddings, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for depth, (points, labels) in sorted(embeddings.items()):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(points[:, 0], points[:, 1], c=labels, s=6, cmap="tab10")
        ax.set_title(f"depth {depth}")
        ax.set_xticks([])
        ax.set_yticks([])
        path = out_dir / f"scatter_depth{depth}.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    if separability:
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([r.depth for r in separability], [r.ratio for r in separability], marker="o")
        ax.set_xlabel("depth")
        ax.set_ylabel("SSE/SSB")
        path = out_dir / "ratio_vs_depth.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written
