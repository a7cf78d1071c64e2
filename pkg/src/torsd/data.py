"""Structured (anchor, positive, negative) input.

Each epoch the training set is partitioned into triplets so that every image
is used at most once. Batches are laid out triple-major,
``[a0, p0, n0, a1, p1, n1, ...]``, so role views are strided slices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np
import torch

from .errors import (
    ConfigValidationError,
    DatasetError,
    InvalidImageError,
    SamplingInfeasibleError,
)


@dataclass
class LabeledDataset:
    images: np.ndarray  # N x H x W x C, float32
    labels: np.ndarray  # N, int64
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be N x H x W x C, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.num_classes < 1:
            raise DatasetError("num_classes must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        """(C, H, W) as seen by the network."""
        _, h, w, c = self.images.shape
        return (c, h, w)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.num_classes, self.name)


class TripletIndex(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass
class TripletPartition:
    triplets: list[TripletIndex]
    dropped: list[int]

    def __len__(self):
        return len(self.triplets)

    def __iter__(self):
        return iter(self.triplets)

    def __getitem__(self, i):
        return self.triplets[i]

    @property
    def n_dropped(self) -> int:
        return len(self.dropped)


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------
#
# A partition with T triplets takes p_c same-class pairs and q_c negatives
# from class c. It exists iff sum(p) = sum(q) = T, 2 p_c + q_c <= n_c and
# p_c + q_c <= T for every class (the last condition is Hall's condition for
# giving every pair a negative from another class).


def _slot_capacities(counts: np.ndarray, T: int):
    """Per-class slot units u_c = p_c + q_c split by marginal pairing gain.

    f_c(u) = min(u, n_c - u) is the most pairs class c can provide when it
    fills u slots; it is concave, so filling +1 units first, then 0, then -1
    maximises sum f_c(u_c) for a fixed total.
    """
    cap = np.minimum(counts, T)
    plus = np.minimum(counts // 2, T)
    zero = np.where((plus < T) & (counts % 2 == 1), 1, 0)
    zero = np.minimum(zero, cap - plus)
    minus = cap - plus - zero
    return plus, zero, minus


def _is_feasible(counts: np.ndarray, T: int) -> bool:
    if T == 0:
        return True
    plus, zero, minus = _slot_capacities(counts, T)
    need = 2 * T
    a = min(need, int(plus.sum()))
    rest = need - a
    rest -= min(rest, int(zero.sum()))
    m = min(rest, int(minus.sum()))
    if rest > m:
        return False
    return a - m >= T


def max_triplets(counts) -> int:
    """Largest number of disjoint valid triplets for the given class sizes."""
    counts = np.asarray(counts, dtype=np.int64)
    upper = min(int(counts.sum()) // 3, int((counts // 2).sum()))
    for T in range(upper, 0, -1):
        if _is_feasible(counts, T):
            return T
    return 0


def _draw_units(capacity: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Take k units from per-class capacities uniformly at random."""
    if k <= 0:
        return np.zeros_like(capacity)
    pool = np.repeat(np.arange(len(capacity)), capacity)
    chosen = rng.choice(pool, size=k, replace=False)
    return np.bincount(chosen, minlength=len(capacity))


def _allocate(counts: np.ndarray, T: int, rng: np.random.Generator):
    plus, zero, minus = _slot_capacities(counts, T)
    need = 2 * T
    u = np.zeros_like(counts)
    for capacity in (plus, zero, minus):
        take = min(need, int(capacity.sum()))
        u += _draw_units(capacity, take, rng)
        need -= take
    assert need == 0
    pair_cap = np.minimum(u, counts - u)
    p = _draw_units(pair_cap, T, rng)
    q = u - p
    return p, q


def _match_classes(p: np.ndarray, q: np.ndarray, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Assign every pair a negative from a different class.

    Repeatedly serve the class with the largest outstanding demand p_c + q_c.
    While p_c + q_c <= T_remaining holds for all classes (true initially) the
    step below preserves it, so the loop never gets stuck.
    """
    p, q = p.copy(), q.copy()
    out = []
    jitter = rng.random(len(p))  # random tie-breaking
    while p.sum() > 0:
        load = p + q
        c = int(np.lexsort((jitter, load))[-1])
        if p[c] > 0:
            eligible = np.flatnonzero(q > 0)
            eligible = eligible[eligible != c]
            d = int(eligible[np.lexsort((jitter[eligible], load[eligible]))[-1]])
            out.append((c, d))
            p[c] -= 1
            q[d] -= 1
        else:
            eligible = np.flatnonzero(p > 0)
            eligible = eligible[eligible != c]
            d = int(eligible[np.lexsort((jitter[eligible], load[eligible]))[-1]])
            out.append((d, c))
            p[d] -= 1
            q[c] -= 1
    return out


def sample_epoch_triplets(dataset: LabeledDataset, rng: np.random.Generator) -> TripletPartition:
    """Partition the dataset into disjoint (anchor, positive, negative) triplets.

    The number of triplets is the maximum achievable for the class sizes;
    images that cannot be placed are returned in ``dropped``.
    """
    labels = np.asarray(dataset.labels)
    n = len(labels)
    if n < 3:
        raise SamplingInfeasibleError(f"need at least 3 images, got {n}")
    counts = np.bincount(labels, minlength=dataset.num_classes)
    if np.count_nonzero(counts) < 2:
        raise SamplingInfeasibleError("all images share one class; no valid negative exists")
    T = max_triplets(counts)
    if T == 0:
        raise SamplingInfeasibleError("no class has two images; no valid positive exists")

    p, q = _allocate(counts, T, rng)
    members = [rng.permutation(np.flatnonzero(labels == c)) for c in range(len(counts))]
    pair_pool, neg_pool, dropped = [], [], []
    for c, idx in enumerate(members):
        pairs = idx[: 2 * p[c]].reshape(-1, 2)
        pair_pool.append(list(map(tuple, pairs.tolist())))
        neg_pool.append(idx[2 * p[c] : 2 * p[c] + q[c]].tolist())
        dropped.extend(idx[2 * p[c] + q[c] :].tolist())

    triplets = []
    for pc, nc in _match_classes(p, q, rng):
        a, pos = pair_pool[pc].pop()
        triplets.append(TripletIndex(int(a), int(pos), int(neg_pool[nc].pop())))
    order = rng.permutation(len(triplets))
    return TripletPartition([triplets[i] for i in order], sorted(int(i) for i in dropped))


def check_partition(partition: TripletPartition, labels, n_images: int) -> list[str]:
    """Return every violated partition/label property (empty when all hold)."""
    labels = np.asarray(labels)
    problems = []
    used = [i for t in partition.triplets for i in t]
    if len(set(used)) != len(used):
        problems.append("an index appears in more than one slot")
    if set(used) & set(partition.dropped):
        problems.append("an index is both used and dropped")
    if len(used) + partition.n_dropped != n_images:
        problems.append(f"used {len(used)} + dropped {partition.n_dropped} != {n_images}")
    for t in partition.triplets:
        if len({t.anchor, t.positive, t.negative}) != 3:
            problems.append(f"repeated index in {t}")
        if labels[t.anchor] != labels[t.positive]:
            problems.append(f"positive label differs in {t}")
        if labels[t.anchor] == labels[t.negative]:
            problems.append(f"negative label equals anchor label in {t}")
    return problems


# ---------------------------------------------------------------------------
# normalisation and augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Normalizer:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def fit(cls, images: np.ndarray) -> "Normalizer":
        images = np.asarray(images, dtype=np.float64)
        mean = images.mean(axis=(0, 1, 2))
        std = images.std(axis=(0, 1, 2))
        std = np.where(std > 0, std, 1.0)
        return cls(tuple(float(v) for v in mean), tuple(float(v) for v in std))

    def __call__(self, image: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float32)
        std = np.asarray(self.std, dtype=np.float32)
        return ((image - mean) / std).astype(np.float32)


def cutout(image: np.ndarray, size: int, center: tuple[int, int]) -> np.ndarray:
    """Zero a size x size square centred at ``center`` (clipped at the border)."""
    h, w = image.shape[:2]
    cy, cx = center
    y0, y1 = max(cy - size // 2, 0), min(cy - size // 2 + size, h)
    x0, x1 = max(cx - size // 2, 0), min(cx - size // 2 + size, w)
    out = image.copy()
    out[y0:y1, x0:x1] = 0
    return out


def augment(
    image: np.ndarray,
    training: bool,
    rng: np.random.Generator | None = None,
    normalizer: Normalizer | None = None,
) -> np.ndarray:
    """Normalise, then (training only) random crop, horizontal flip and cutout."""
    image = np.asarray(image, dtype=np.float32)
    if not np.all(np.isfinite(image)):
        raise InvalidImageError("image contains non-finite pixels")
    if normalizer is not None:
        image = normalizer(image)
    if not training:
        return image.copy()
    if rng is None:
        raise ValueError("training augmentation needs an rng")

    h, w = image.shape[:2]
    pad = max(h // 8, 1)
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    image = padded[dy : dy + h, dx : dx + w]
    if rng.random() < 0.5:
        image = image[:, ::-1]
    hole = max(h // 4, 1)
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    return np.ascontiguousarray(cutout(image, hole, (cy, cx)))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TripletBatch:
    images: torch.Tensor  # 3T x C x H x W, triple-major
    y_o: torch.Tensor
    y_p: torch.Tensor
    y_n: torch.Tensor

    @property
    def num_triplets(self) -> int:
        return len(self.y_o)

    @property
    def labels(self) -> torch.Tensor:
        """Per-image labels in the same triple-major order as ``images``."""
        return torch.stack([self.y_o, self.y_p, self.y_n], dim=1).reshape(-1)


def make_batch(
    triplets: Sequence[TripletIndex],
    dataset: LabeledDataset,
    transform: Callable[[np.ndarray], np.ndarray] | None = None,
) -> TripletBatch:
    flat = [i for t in triplets for i in t]
    images = [dataset.images[i] for i in flat]
    if transform is not None:
        images = [transform(img) for img in images]
    array = np.stack(images).transpose(0, 3, 1, 2)
    labels = torch.as_tensor(dataset.labels[np.asarray(flat, dtype=np.int64)].reshape(-1, 3))
    return TripletBatch(
        torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32)),
        labels[:, 0].clone(),
        labels[:, 1].clone(),
        labels[:, 2].clone(),
    )


def assemble_batches(
    triplets: Sequence[TripletIndex],
    dataset: LabeledDataset,
    batch_size: int,
    transform: Callable[[np.ndarray], np.ndarray] | None = None,
) -> Iterator[TripletBatch]:
    if batch_size < 3 or batch_size % 3:
        raise ConfigValidationError("batch_size", f"must be a positive multiple of 3, got {batch_size}")
    per_batch = batch_size // 3
    triplets = list(triplets)
    for start in range(0, len(triplets), per_batch):
        yield make_batch(triplets[start : start + per_batch], dataset, transform)


def num_batches(num_triplets: int, batch_size: int) -> int:
    per_batch = batch_size // 3
    return -(-num_triplets // per_batch)


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------

INDEX_FILE = "index.txt"
_PACKED_HEADER = struct.Struct("<5I")


def save_packed(path, dataset: LabeledDataset) -> None:
    """Packed binary: header (count, H, W, C, num_classes) as uint32 LE, then per
    sample H*W*C uint8 pixels (values in [0, 1] scaled to 0..255) and a uint32 label."""
    n, h, w, c = dataset.images.shape
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8).reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(_PACKED_HEADER.pack(n, h, w, c, dataset.num_classes))
        label_bytes = dataset.labels.astype("<u4")
        for i in range(n):
            fh.write(pixels[i].tobytes())
            fh.write(label_bytes[i].tobytes())


def load_packed(path) -> LabeledDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PACKED_HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    n, h, w, c, num_classes = _PACKED_HEADER.unpack_from(raw)
    record = h * w * c + 4
    body = raw[_PACKED_HEADER.size :]
    if len(body) != n * record:
        raise DatasetError(f"{path}: expected {n * record} payload bytes, found {len(body)}")
    table = np.frombuffer(body, dtype=np.uint8).reshape(n, record)
    images = table[:, : h * w * c].reshape(n, h, w, c).astype(np.float32) / 255.0
    labels = table[:, h * w * c :].copy().view("<u4").reshape(n).astype(np.int64)
    return LabeledDataset(images, labels, num_classes, name=path.name)


def save_image_dir(root, dataset: LabeledDataset) -> None:
    """Write one PNG per sample plus ``index.txt`` (relative path, label)."""
    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
        rel = f"images/{i:06d}.png"
        pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels.squeeze(-1) if pixels.shape[-1] == 1 else pixels).save(root / rel)
        lines.append(f"{rel} {int(label)}")
    (root / INDEX_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_image_dir(root, num_classes: int | None = None) -> LabeledDataset:
    from PIL import Image

    root = Path(root)
    index = root / INDEX_FILE
    if not index.is_file():
        raise DatasetError(f"{root}: missing {INDEX_FILE}")
    images, labels = [], []
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rel, label = line.rsplit(None, 1)
            labels.append(int(label))
        except ValueError:
            raise DatasetError(f"{index}:{lineno}: expected '<path> <label>'") from None
        try:
            with Image.open(root / rel) as im:
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except OSError as exc:
            raise DatasetError(f"{root / rel}: {exc}") from None
        images.append(arr[..., None] if arr.ndim == 2 else arr)
    if not images:
        raise DatasetError(f"{index}: no samples")
    if num_classes is None:
        num_classes = max(labels) + 1
    return LabeledDataset(np.stack(images), np.asarray(labels), num_classes, name=root.name)


def load_dataset(path) -> LabeledDataset:
    """Load either an image directory with ``index.txt`` or a packed binary file."""
    path = Path(path)
    if path.is_dir():
        return load_image_dir(path)
    if path.is_file():
        return load_packed(path)
    raise DatasetError(f"{path}: no such dataset")


# ---------------------------------------------------------------------------
# synthetic data for desk-scale runs
# ---------------------------------------------------------------------------


def make_synthetic_dataset(
    num_classes: int = 4,
    per_class: int = 100,
    size: int = 32,
    noise: float = 0.35,
    seed: int = 0,
    channels: int = 3,
) -> LabeledDataset:
    """Class-dependent oriented gratings and colour tints under heavy noise.

    Each class has a prototype (orientation, frequency, tint); samples jitter
    the prototype, randomly shift its phase and add pixel noise, so the task
    is learnable but not trivially separable.
    """
    rng = np.random.default_rng(seed)
    proto_rng = np.random.default_rng(12345)
    angles = np.linspace(0, np.pi, num_classes, endpoint=False) + proto_rng.uniform(0, 0.2)
    freqs = proto_rng.uniform(2.0, 4.0, size=num_classes)
    tints = proto_rng.uniform(-0.15, 0.15, size=(num_classes, channels))
    yy, xx = np.mgrid[0:size, 0:size] / size

    images, labels = [], []
    for c in range(num_classes):
        for _ in range(per_class):
            angle = angles[c] + rng.normal(0, 0.25)
            freq = freqs[c] * rng.uniform(0.8, 1.2)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
            img = 0.5 + 0.25 * wave[..., None] + tints[c] + rng.normal(0, noise, size=(size, size, channels))
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(c)
    order = rng.permutation(len(labels))
    return LabeledDataset(
        np.asarray(images, dtype=np.float32)[order],
        np.asarray(labels)[order],
        num_classes,
        name=f"synthetic-{num_classes}c-{per_class}x-s{seed}",
    )
