"""Synthetic image sets, client partitions, public subsets and the FSFI raw format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RAW_MAGIC = b"FSFI"
KINDS = ("gradients", "gaussians", "checker")


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, C, H, W), values in [0, 1]
    name: str = ""

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float64)
        if imgs.ndim != 4:
            raise ValueError(f"images must be (n, C, H, W), got {imgs.shape}")
        imgs.setflags(write=False)
        object.__setattr__(self, "images", imgs)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.name if name is None else name)


def _grid(H, W):
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    return yy, xx


def generate_synthetic(n: int, shape=(1, 8, 8), kind: str = "gaussians", seed: int = 0) -> Dataset:
    """``gaussians``: 1-3 random blobs; ``gradients``: random linear ramps; ``checker``: random-phase checkerboards."""
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
    C, H, W = shape
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xDA7A,)))
    yy, xx = _grid(H, W)
    out = np.empty((n, C, H, W))
    for i in range(n):
        for c in range(C):
            if kind == "gaussians":
                img = np.zeros((H, W))
                for _ in range(rng.integers(1, 4)):
                    cy, cx = rng.uniform(0, 1, 2)
                    s = rng.uniform(0.12, 0.35)
                    amp = rng.uniform(0.4, 1.0)
                    img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
                img = np.clip(img, 0.0, 1.0)
            elif kind == "gradients":
                ang = rng.uniform(0, 2 * np.pi)
                ramp = np.cos(ang) * xx + np.sin(ang) * yy
                ramp -= ramp.min()
                span = ramp.max()
                ramp = ramp / span if span > 0 else ramp
                lo, hi = np.sort(rng.uniform(0, 1, 2))
                img = lo + (hi - lo) * ramp
            else:
                period = rng.integers(2, max(3, min(H, W) // 2 + 1))
                py, px = rng.integers(0, period, 2)
                cells = ((np.arange(H)[:, None] + py) // period + (np.arange(W)[None, :] + px) // period) % 2
                lo, hi = np.sort(rng.uniform(0, 1, 2))
                img = np.where(cells == 1, hi, lo)
            out[i, c] = img
    return Dataset(out, f"synthetic-{kind}")


def partition(dataset: Dataset, K: int, scheme: str = "iid-equal", seed: int = 0) -> list[Dataset]:
    """Disjoint split into ``K`` client datasets covering the whole set."""
    n = len(dataset)
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x5EED,)))
    perm = rng.permutation(n)
    if scheme == "iid-equal":
        sizes = [n // K + (1 if k < n % K else 0) for k in range(K)]
    elif scheme == "size-skewed":
        if n < K:
            raise ValueError("size-skewed partition needs at least one image per client")
        share = rng.dirichlet(np.ones(K)) * (n - K)
        base = np.floor(share).astype(int)
        rest = (n - K) - base.sum()
        base[np.argsort(-(share - base), kind="stable")[:rest]] += 1
        sizes = list(base + 1)
    else:
        raise ValueError(f"unknown partition scheme {scheme!r}")
    parts, start = [], 0
    for k, size in enumerate(sizes):
        parts.append(dataset.subset(perm[start : start + size], f"{dataset.name}/client{k}"))
        start += size
    return parts


def mark_public(client_data: Dataset, fraction: float, seed: int = 0) -> np.ndarray:
    """Sorted indices of a uniformly drawn public subset of size ``ceil(fraction * n)``."""
    n = len(client_data)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("public fraction must be in (0, 1]")
    size = min(n, math.ceil(round(fraction * n, 9)))
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x9B11C,)))
    return np.sort(rng.choice(n, size=size, replace=False))


def save_raw(path, dataset: Dataset) -> None:
    n = len(dataset)
    C, H, W = dataset.shape if n else (0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<4I", n, C, H, W))
        fh.write(dataset.images.astype("<f4").tobytes())


def load_raw(path) -> Dataset:
    """Read ``FSFI`` + u32 count + u32 C,H,W + f32 little-endian pixels in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:4] != RAW_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 20:
        raise DataFormatError(f"{path}: truncated header")
    n, C, H, W = struct.unpack_from("<4I", raw, 4)
    expected = 20 + 4 * n * C * H * W
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    px = np.frombuffer(raw, dtype="<f4", offset=20).astype(np.float64)
    if px.size and (not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0):
        raise DataFormatError(f"{path}: pixel values outside [0, 1]")
    return Dataset(px.reshape(n, C, H, W), Path(path).stem)
