import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsfr.data import DataFormatError, Dataset, generate_synthetic, load_raw, mark_public, partition, save_raw


def test_empty_dataset_allowed():
    assert len(generate_synthetic(0)) == 0


@pytest.mark.parametrize("kind", ["gradients", "gaussians", "checker"])
def test_pixels_in_range_and_deterministic(kind):
    a = generate_synthetic(20, (2, 6, 5), kind, seed=3)
    assert a.images.shape == (20, 2, 6, 5)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert np.array_equal(a.images, generate_synthetic(20, (2, 6, 5), kind, seed=3).images)
    assert not np.array_equal(a.images, generate_synthetic(20, (2, 6, 5), kind, seed=4).images)


def test_unknown_kind():
    with pytest.raises(ValueError):
        generate_synthetic(2, kind="noise")


def test_partition_examples():
    ds = generate_synthetic(10, seed=1)
    assert np.array_equal(partition(ds, 1)[0].images, ds.images[np.random.default_rng(
        np.random.SeedSequence(0, spawn_key=(0x5EED,))).permutation(10)])
    assert sorted(len(p) for p in partition(ds, 3)) == [3, 3, 4]


def _rows(images):
    return sorted(map(bytes, images.reshape(len(images), -1)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.integers(1, 8), st.sampled_from(["iid-equal", "size-skewed"]), st.integers(0, 99))
def test_partition_disjoint_union(n, K, scheme, seed):
    if scheme == "size-skewed" and n < K:
        return
    ds = generate_synthetic(n, (1, 2, 2), "gaussians", seed)
    parts = partition(ds, K, scheme, seed)
    assert len(parts) == K
    assert _rows(np.concatenate([p.images for p in parts])) == _rows(ds.images)
    sizes = [len(p) for p in parts]
    if scheme == "iid-equal":
        assert max(sizes) - min(sizes) <= 1
    else:
        assert min(sizes) >= 1


def test_mark_public():
    ds = generate_synthetic(9, seed=0)
    assert mark_public(ds, 1.0).tolist() == list(range(9))
    assert len(mark_public(ds, 1e-6)) == 1
    a = mark_public(ds, 0.5, seed=2)
    assert len(a) == math.ceil(4.5) and np.array_equal(a, mark_public(ds, 0.5, seed=2))
    assert np.all(np.diff(a) > 0) and a.max() < 9


def test_raw_roundtrip_and_errors(tmp_path):
    ds = generate_synthetic(4, (1, 3, 3), "checker", 2)
    f = tmp_path / "x.fsfi"
    save_raw(f, ds)
    back = load_raw(f)
    assert np.array_equal(back.images, ds.images.astype(np.float32).astype(np.float64))
    raw = f.read_bytes()
    f.write_bytes(raw[:-2])
    with pytest.raises(DataFormatError):
        load_raw(f)
    f.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DataFormatError):
        load_raw(f)
    bad = bytearray(raw)
    bad[20:24] = np.array([1.5], dtype="<f4").tobytes()
    f.write_bytes(bytes(bad))
    with pytest.raises(DataFormatError, match="outside"):
        load_raw(f)


def test_dataset_rejects_bad_rank():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 3)))
