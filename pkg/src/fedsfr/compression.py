"""Uplink compression with error feedback.

``compress`` keeps the ``ceil(fraction * len)`` largest-magnitude entries of
every layer and QSGD-quantizes the kept values (2-norm scale per layer,
stochastic rounding, so the quantizer is unbiased). The residual
``g - g_bar`` becomes the client's error memory for the next round.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import LayerMap


def kept_count(fraction: float, length: int) -> int:
    """``ceil(fraction * length)``, robust to float noise such as 0.1 * 30."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    return min(length, math.ceil(round(fraction * length, 9)))


def top_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Sorted indices of the ``k`` largest ``|values|``; ties keep the lower index."""
    order = np.argsort(-np.abs(values), kind="stable")
    return np.sort(order[:k])


def top_s_sparsify(v: np.ndarray, layers: LayerMap, fraction: float) -> np.ndarray:
    """Global (flat) indices kept by per-layer top-S."""
    v = np.asarray(v, dtype=np.float64)
    kept = [s.offset + top_indices(v[s.offset : s.offset + s.length], kept_count(fraction, s.length)) for s in layers]
    return np.concatenate(kept) if kept else np.zeros(0, dtype=np.int64)


def qsgd_quantize(v: np.ndarray, bits: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Signed integer levels in ``[-s, s]`` (``s = 2**bits - 1``) and the 2-norm scale."""
    if bits < 1:
        raise ValueError("bits must be >= 1")
    v = np.asarray(v, dtype=np.float64)
    scale = float(np.linalg.norm(v))
    if scale == 0.0:
        return np.zeros(v.shape, dtype=np.int64), 0.0
    s = float(2**bits - 1)
    r = np.abs(v) / scale * s
    lower = np.floor(r)
    up = rng.random(v.shape) < (r - lower)
    levels = (lower + up).astype(np.int64)
    return np.sign(v).astype(np.int64) * levels, scale


def qsgd_dequantize(levels: np.ndarray, scale: float, bits: int) -> np.ndarray:
    return np.asarray(levels, dtype=np.float64) * (scale / float(2**bits - 1))


@dataclass(frozen=True)
class LayerUpdate:
    name: str
    indices: np.ndarray  # layer-local, strictly increasing
    values: np.ndarray  # dequantized values at ``indices``
    levels: np.ndarray | None = None
    scale: float = 1.0


@dataclass(frozen=True)
class CompressedUpdate:
    layers: tuple[LayerUpdate, ...]
    bits: int | None = None

    @property
    def total_kept(self) -> int:
        return sum(len(l.indices) for l in self.layers)

    def dense(self, layer_map: LayerMap) -> np.ndarray:
        out = np.zeros(layer_map.D)
        spans = {s.name: s for s in layer_map}
        for lu in self.layers:
            out[spans[lu.name].offset + lu.indices] = lu.values
        return out

    def to_bytes(self) -> bytes:
        """Per layer: u16 name length, name, u32 count, u32 indices, f64 scale, i8 levels."""
        chunks = []
        for lu in self.layers:
            if lu.levels is None or (len(lu.levels) and np.abs(lu.levels).max() > 127):
                raise ValueError(f"layer {lu.name!r} has no i8-representable levels")
            name = lu.name.encode()
            chunks.append(struct.pack("<H", len(name)) + name)
            chunks.append(struct.pack("<I", len(lu.indices)))
            chunks.append(np.asarray(lu.indices, dtype="<u4").tobytes())
            chunks.append(struct.pack("<d", lu.scale))
            chunks.append(np.asarray(lu.levels, dtype="i1").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes, bits: int) -> "CompressedUpdate":
        layers, pos = [], 0
        try:
            while pos < len(data):
                (nlen,) = struct.unpack_from("<H", data, pos)
                pos += 2
                name = data[pos : pos + nlen].decode()
                pos += nlen
                (count,) = struct.unpack_from("<I", data, pos)
                pos += 4
                idx = np.frombuffer(data, dtype="<u4", count=count, offset=pos).astype(np.int64)
                pos += 4 * count
                (scale,) = struct.unpack_from("<d", data, pos)
                pos += 8
                levels = np.frombuffer(data, dtype="i1", count=count, offset=pos).astype(np.int64)
                pos += count
                layers.append(LayerUpdate(name, idx, qsgd_dequantize(levels, scale, bits), levels, scale))
        except (struct.error, ValueError) as exc:
            raise ValueError(f"truncated compressed update: {exc}") from None
        return cls(tuple(layers), bits)


def compress(
    g: np.ndarray,
    layers: LayerMap,
    fraction: float,
    bits: int | None,
    rng: np.random.Generator,
) -> CompressedUpdate:
    """Per-layer top-S, then QSGD on the kept values (``bits=None`` skips quantization)."""
    g = np.asarray(g, dtype=np.float64)
    out = []
    for s in layers:
        seg = g[s.offset : s.offset + s.length]
        idx = top_indices(seg, kept_count(fraction, s.length))
        kept = seg[idx]
        if bits is None:
            out.append(LayerUpdate(s.name, idx, kept.copy()))
            continue
        levels, scale = qsgd_quantize(kept, bits, rng)
        out.append(LayerUpdate(s.name, idx, qsgd_dequantize(levels, scale, bits), levels, scale))
    return CompressedUpdate(tuple(out), bits)


def update_error_memory(m: np.ndarray, g: np.ndarray, g_bar: np.ndarray) -> np.ndarray:
    """New memory ``g - g_bar``; ``g`` already contains the old memory ``m``."""
    if np.shape(m) != np.shape(g) or np.shape(g) != np.shape(g_bar):
        raise ValueError("memory, update and compressed update must share a shape")
    return np.asarray(g, dtype=np.float64) - np.asarray(g_bar, dtype=np.float64)


def uniform_scalar_quantize(Y: np.ndarray, bits: int) -> tuple[np.ndarray, float, float]:
    """Levels in ``[0, 2**bits - 1]`` over the batch's own ``[min, max]`` range."""
    Y = np.asarray(Y, dtype=np.float64)
    lo, hi = float(Y.min()), float(Y.max())
    if hi == lo:
        return np.zeros(Y.shape, dtype=np.int64), lo, hi
    s = 2**bits - 1
    levels = np.floor((Y - lo) / (hi - lo) * s + 0.5).astype(np.int64)
    return levels, lo, hi


def uniform_scalar_dequantize(levels: np.ndarray, lo: float, hi: float, bits: int) -> np.ndarray:
    if hi == lo:
        return np.full(np.shape(levels), lo)
    return lo + np.asarray(levels, dtype=np.float64) / (2**bits - 1) * (hi - lo)


def make_compressor(layers: LayerMap, fraction: float, bits: int | None) -> Callable:
    """Dense ``x -> Compress(x)`` callable for :func:`estimate_contraction`."""

    def compressor(x, rng):
        return compress(x, layers, fraction, bits, rng).dense(layers)

    return compressor


def estimate_contraction(compressor: Callable, D: int, trials: int, rng: np.random.Generator) -> float:
    """``1 - mean ||x - C(x)||^2 / ||x||^2`` over standard Gaussian ``x``."""
    ratios = np.empty(trials)
    for t in range(trials):
        x = rng.standard_normal(D)
        err = x - compressor(x, rng)
        ratios[t] = err @ err / (x @ x)
    return float(1.0 - ratios.mean())
