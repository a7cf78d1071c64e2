from functools import lru_cache
from itertools import permutations

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from torsd.data import (
    LabeledDataset,
    Normalizer,
    TripletIndex,
    assemble_batches,
    augment,
    check_partition,
    cutout,
    load_dataset,
    make_synthetic_dataset,
    max_triplets,
    sample_epoch_triplets,
    save_image_dir,
    save_packed,
)
from torsd.errors import ConfigValidationError, InvalidImageError, SamplingInfeasibleError


def dataset_from_labels(labels, num_classes=None, size=4):
    labels = np.asarray(labels)
    num_classes = num_classes or int(labels.max()) + 1
    images = np.random.default_rng(0).random((len(labels), size, size, 3)).astype(np.float32)
    return LabeledDataset(images, labels, num_classes)


@lru_cache(maxsize=None)
def dp_max_triplets(counts):
    """Exhaustive oracle: best over every choice of (pair class, negative class)."""
    best = 0
    for c, nc in enumerate(counts):
        if nc < 2:
            continue
        for d, nd in enumerate(counts):
            if d == c or nd < 1:
                continue
            rest = list(counts)
            rest[c] -= 2
            rest[d] -= 1
            best = max(best, 1 + dp_max_triplets(tuple(rest)))
    return best


def test_six_images_two_classes_every_output_valid():
    ds = dataset_from_labels([0, 0, 0, 1, 1, 1])
    for seed in range(50):
        part = sample_epoch_triplets(ds, np.random.default_rng(seed))
        assert len(part) == 2 and part.n_dropped == 0
        assert sorted(i for t in part for i in t) == list(range(6))
        assert check_partition(part, ds.labels, 6) == []
        # one (A, A, B) and one (B, B, A)
        assert sorted(int(ds.labels[t.anchor]) for t in part) == [0, 1]


def test_enumerated_partitions_of_six_all_satisfy_properties():
    """Every valid 2-triplet partition of A={0,1,2}, B={3,4,5} passes the checker,
    and every sampler output is one of them."""
    labels = np.array([0, 0, 0, 1, 1, 1])
    valid = set()
    for perm in permutations(range(6)):
        trip = [TripletIndex(*perm[:3]), TripletIndex(*perm[3:])]
        ok = all(labels[t.anchor] == labels[t.positive] != labels[t.negative] for t in trip)
        if ok:
            valid.add(frozenset(trip))
    assert valid
    from torsd.data import TripletPartition

    for trip in valid:
        assert check_partition(TripletPartition(list(trip), []), labels, 6) == []
    ds = dataset_from_labels(labels)
    for seed in range(30):
        assert frozenset(sample_epoch_triplets(ds, np.random.default_rng(seed)).triplets) in valid


def test_seven_images_drops_one():
    ds = dataset_from_labels([0, 0, 0, 0, 1, 1, 1])
    part = sample_epoch_triplets(ds, np.random.default_rng(0))
    assert len(part) == 2
    assert part.n_dropped == 1
    assert check_partition(part, ds.labels, 7) == []


def test_single_class_infeasible():
    with pytest.raises(SamplingInfeasibleError):
        sample_epoch_triplets(dataset_from_labels([0, 0, 0, 0], num_classes=2), np.random.default_rng(0))


def test_too_few_images():
    with pytest.raises(SamplingInfeasibleError):
        sample_epoch_triplets(dataset_from_labels([0, 1]), np.random.default_rng(0))


def test_three_singleton_classes_infeasible():
    with pytest.raises(SamplingInfeasibleError):
        sample_epoch_triplets(dataset_from_labels([0, 1, 2]), np.random.default_rng(0))


def test_case_where_naive_greedy_fails():
    # 3 x 3: taking negatives from the largest class strands everything after two triplets
    ds = dataset_from_labels([0, 0, 0, 1, 1, 1, 2, 2, 2])
    part = sample_epoch_triplets(ds, np.random.default_rng(0))
    assert len(part) == 3 and part.n_dropped == 0


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 7), min_size=2, max_size=5))
def test_max_triplets_matches_exhaustive_oracle(counts):
    assert max_triplets(counts) == dp_max_triplets(tuple(counts))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=2, max_size=6).filter(lambda c: sum(c) >= 3),
       st.integers(0, 2**32 - 1))
def test_partition_properties(counts, seed):
    labels = np.repeat(np.arange(len(counts)), counts)
    ds = dataset_from_labels(labels, num_classes=len(counts))
    try:
        part = sample_epoch_triplets(ds, np.random.default_rng(seed))
    except SamplingInfeasibleError:
        assert dp_max_triplets(tuple(counts)) == 0
        return
    assert check_partition(part, labels, len(labels)) == []
    assert len(part) == dp_max_triplets(tuple(counts))
    assert 3 * len(part) + part.n_dropped == len(labels)


def test_seed_determinism():
    ds = make_synthetic_dataset(5, 23, size=8, seed=1)
    a = sample_epoch_triplets(ds, np.random.default_rng(42))
    b = sample_epoch_triplets(ds, np.random.default_rng(42))
    assert a.triplets == b.triplets and a.dropped == b.dropped


def test_epochs_differ():
    ds = make_synthetic_dataset(5, 23, size=8, seed=1)
    a = sample_epoch_triplets(ds, np.random.default_rng(1))
    b = sample_epoch_triplets(ds, np.random.default_rng(2))
    assert set(a.triplets) != set(b.triplets)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def test_eval_path_returns_normalised_input():
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    assert np.array_equal(augment(img, False), img)
    norm = Normalizer((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
    assert np.array_equal(augment(img, False, normalizer=norm), norm(img))


def test_training_augment_seeded():
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    a = augment(img, True, np.random.default_rng(3))
    b = augment(img, True, np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert a.shape == img.shape


def test_cutout_interior_hole_zeroes_64_pixels():
    img = np.ones((32, 32, 3), dtype=np.float32)
    out = cutout(img, 8, (16, 16))
    zero_pixels = np.all(out == 0, axis=-1).sum()
    assert zero_pixels == 64
    # input untouched
    assert img.min() == 1


def test_cutout_clipped_at_border():
    out = cutout(np.ones((32, 32, 1), dtype=np.float32), 8, (0, 0))
    assert (out == 0).sum() == 16


def test_nonfinite_image_rejected():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    img[0, 0, 0] = np.nan
    with pytest.raises(InvalidImageError):
        augment(img, False)


def test_normalizer_fit_zero_mean_unit_std():
    ds = make_synthetic_dataset(3, 10, size=8, seed=0)
    norm = Normalizer.fit(ds.images)
    z = norm(ds.images)
    assert np.allclose(z.mean(axis=(0, 1, 2)), 0, atol=1e-5)
    assert np.allclose(z.std(axis=(0, 1, 2)), 1, atol=1e-4)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def _triplets(ds, n):
    # any n triplets with valid labels; batching does not inspect them
    return [TripletIndex(3 * i % len(ds), (3 * i + 1) % len(ds), (3 * i + 2) % len(ds)) for i in range(n)]


def test_43_triplets_one_batch_of_129():
    ds = make_synthetic_dataset(3, 50, size=8, seed=0)
    batches = list(assemble_batches(_triplets(ds, 43), ds, 129))
    assert [b.images.shape[0] for b in batches] == [129]


def test_45_triplets_remainder_batch():
    ds = make_synthetic_dataset(3, 50, size=8, seed=0)
    batches = list(assemble_batches(_triplets(ds, 45), ds, 129))
    assert [b.images.shape[0] for b in batches] == [129, 6]


def test_batch_size_must_be_multiple_of_three():
    ds = make_synthetic_dataset(3, 5, size=8, seed=0)
    with pytest.raises(ConfigValidationError, match="multiple of 3"):
        list(assemble_batches(_triplets(ds, 2), ds, 4))


def test_batch_layout_is_triple_major():
    ds = make_synthetic_dataset(3, 10, size=8, seed=0)
    part = sample_epoch_triplets(ds, np.random.default_rng(0))
    (batch, *_) = assemble_batches(part.triplets, ds, 9)
    for j, t in enumerate(part.triplets[:3]):
        for role, idx in enumerate(t):
            expect = torch.from_numpy(ds.images[idx].transpose(2, 0, 1))
            assert torch.equal(batch.images[3 * j + role], expect)
    assert torch.equal(batch.y_o, batch.y_p)
    assert torch.all(batch.y_o != batch.y_n)
    assert batch.labels.tolist() == [int(ds.labels[i]) for t in part.triplets[:3] for i in t]


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------


def test_packed_round_trip(tmp_path):
    ds = make_synthetic_dataset(3, 4, size=8, seed=0)
    path = tmp_path / "data.bin"
    save_packed(path, ds)
    header = np.frombuffer(path.read_bytes()[:20], dtype="<u4")
    assert header.tolist() == [12, 8, 8, 3, 3]
    back = load_dataset(path)
    assert np.array_equal(back.labels, ds.labels)
    assert np.abs(back.images - ds.images).max() <= 0.5 / 255 + 1e-6


def test_image_dir_round_trip(tmp_path):
    ds = make_synthetic_dataset(2, 3, size=8, seed=0)
    save_image_dir(tmp_path / "d", ds)
    lines = (tmp_path / "d" / "index.txt").read_text().splitlines()
    assert len(lines) == 6 and lines[0].split()[1] == str(ds.labels[0])
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(back.labels, ds.labels)
    assert np.abs(back.images - ds.images).max() <= 0.5 / 255 + 1e-6
