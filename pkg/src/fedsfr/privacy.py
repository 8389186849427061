"""Laplace / oneshot mechanisms and per-round epsilon accounting.

Model-upload clients privatize the whole clipped update: noisy top-S index
selection per layer, then Laplace noise on the selected values.
Feature-upload clients apply the same two mechanisms to the encoder part of
the update only; the features they later extract are post-processing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compression import CompressedUpdate, LayerUpdate, kept_count, top_indices
from .model import LayerMap

MODEL_UPLOAD = "model-upload"
FEATURE_UPLOAD = "feature-upload"


@dataclass(frozen=True)
class DpConfig:
    sigma1: float = 1e-3
    sigma2: float = 1e-3
    clip_Q: float = 1.0
    enabled: bool = False

    def __post_init__(self):
        if self.enabled and (self.sigma1 <= 0 or self.sigma2 <= 0):
            raise ValueError("Laplace scales must be positive when DP is enabled")
        if self.clip_Q <= 0:
            raise ValueError("clip_Q must be positive")


def laplace_noise(scale: float, length: int, rng: np.random.Generator) -> np.ndarray:
    if scale < 0:
        raise ValueError("Laplace scale must be non-negative")
    if scale == 0:
        return np.zeros(length)
    return rng.laplace(0.0, scale, size=length)


def clip_l1(g: np.ndarray, Q: float) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.abs(g).sum())
    if norm <= Q:
        return g.copy()
    return g * (Q / norm)


def oneshot_select(v: np.ndarray, S: int, sigma1: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of the ``S`` largest ``|v + Lap(sigma1)|`` (sorted; ties to lower index)."""
    v = np.asarray(v, dtype=np.float64)
    if S >= len(v):
        return np.arange(len(v))
    return top_indices(v + laplace_noise(sigma1, len(v), rng), S)


def _privatize(g, layers: LayerMap, fraction, dp: DpConfig, rng) -> tuple[CompressedUpdate, CompressedUpdate]:
    g = clip_l1(g, dp.clip_Q)
    noisy, clean = [], []
    for s in layers:
        seg = g[s.offset : s.offset + s.length]
        k = kept_count(fraction, s.length)
        if dp.enabled:
            idx = oneshot_select(seg, k, dp.sigma1, rng)
            vals = seg[idx] + laplace_noise(dp.sigma2, len(idx), rng)
        else:
            idx = top_indices(seg, k)
            vals = seg[idx].copy()
        noisy.append(LayerUpdate(s.name, idx, vals))
        clean.append(LayerUpdate(s.name, idx, seg[idx].copy()))
    return CompressedUpdate(tuple(noisy)), CompressedUpdate(tuple(clean))


def privatize_update(
    g: np.ndarray, layers: LayerMap, fraction: float, dp: DpConfig, rng: np.random.Generator
) -> CompressedUpdate:
    """Clip to ``Q`` in 1-norm, oneshot-select per layer, add ``Lap(sigma2)`` to kept values."""
    return _privatize(g, layers, fraction, dp, rng)[0]


def privatize_update_with_residual(g, layers, fraction, dp, rng) -> tuple[CompressedUpdate, np.ndarray]:
    """As :func:`privatize_update`, plus the noise-free compression residual for error feedback."""
    noisy, clean = _privatize(g, layers, fraction, dp, rng)
    return noisy, np.asarray(g, dtype=np.float64) - clean.dense(layers)


def privatize_encoder(
    g_theta: np.ndarray, encoder_layers: LayerMap, fraction: float, dp: DpConfig, rng: np.random.Generator
) -> np.ndarray:
    """Dense privatized encoder update (``encoder_layers`` is the theta prefix of the layout)."""
    g_theta = np.asarray(g_theta, dtype=np.float64)
    if g_theta.shape != (encoder_layers.D,):
        raise ValueError(f"encoder update must have length {encoder_layers.D}")
    return privatize_update(g_theta, encoder_layers, fraction, dp, rng).dense(encoder_layers)


def epsilon_budget(option: str, S: float, Q: float, D: float, sigma1: float, sigma2: float) -> float:
    """Per-round epsilon of one client for the given upload option.

    model-upload:   eps = 4SQ/(D s1) + 2SQ/(D s2) = 2SQ(s1 + 2 s2) / (D s1 s2)
    feature-upload: sensitivities halve (encoder only), giving half of the above.
    """
    if min(S, Q, D, sigma1, sigma2) <= 0:
        raise ValueError("all epsilon inputs must be positive")
    eps_select = 4.0 * S * Q / (D * sigma1)
    eps_values = 2.0 * S * Q / (D * sigma2)
    if option == MODEL_UPLOAD:
        return eps_select + eps_values
    if option == FEATURE_UPLOAD:
        return (eps_select + eps_values) / 2.0
    raise ValueError(f"unknown upload option {option!r}")


def cumulative_epsilon(per_round: list[float]) -> float:
    """Basic sequential composition over rounds."""
    return float(sum(per_round))
