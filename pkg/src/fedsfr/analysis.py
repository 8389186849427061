"""Numeric diagnostics: alignment ratio, error-memory bound, FR surrogate, improvement ratio."""

from __future__ import annotations

import numpy as np

from . import model as jm


def assumption1_ratio(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b||^2 / (||a||^2 + ||b||^2)``; lies in [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = float(a @ a + b @ b)
    if den == 0.0:
        raise ValueError("alignment ratio undefined when both vectors are zero")
    d = a - b
    return min(2.0, max(0.0, float(d @ d) / den))


def lemma3_bound(nu: float, eta0: float, E_c: int, G_hat: float) -> float:
    """Closed-form error-memory bound ``4(1 - nu)/nu^2 * eta0^2 * E_c^2 * G^2``.

    ``G_hat`` is an empirical stand-in for the gradient bound, so the
    comparison against observed memories is a measurement, not a proof.
    """
    if not 0.0 < nu <= 1.0:
        raise ValueError(f"contraction constant must be in (0, 1], got {nu}")
    return 4.0 * (1.0 - nu) / nu**2 * eta0**2 * E_c**2 * G_hat**2


def fr_surrogate_diag(params, images: np.ndarray, scale: float, trials: int, rng: np.random.Generator):
    """Perturb images, re-encode, and relate feature error to image error.

    ``params`` is either :class:`ModelParams` or a callable encoder
    ``X (B, pixels) -> Y (B, N*d)``. Each trial draws its own random magnitude
    in ``(0, scale]`` so the pairs span a range. Returns ``(mean ratio,
    Pearson correlation)``; both are ``nan`` when ``scale == 0`` (every error
    is zero).
    """
    X = np.asarray(images, dtype=np.float64)
    X = X.reshape(len(X), -1)
    if callable(params):
        enc = params
    else:
        cfg = params.config

        def enc(batch):
            return jm.encode(params, batch.reshape((len(batch),) + cfg.image_shape)).reshape(len(batch), -1)

    Y = enc(X)
    if scale == 0.0:
        return float("nan"), float("nan")
    picks = rng.integers(0, len(X), size=trials)
    mags = scale * rng.uniform(0.0, 1.0, size=trials)
    noise = rng.standard_normal((trials, X.shape[1])) * mags[:, None]
    dY = enc(X[picks] + noise) - Y[picks]
    ex = np.einsum("ij,ij->i", noise, noise)
    ey = np.einsum("ij,ij->i", dY, dY)
    ratio = float(ey.mean() / ex.mean())
    corr = float(np.corrcoef(ex, ey)[0, 1]) if trials > 1 and ex.std() > 0 and ey.std() > 0 else float("nan")
    return ratio, corr


def improvement_ratio(trace) -> float:
    """Fraction of ``(before, after)`` pairs with ``after < before``; rounds without FR are skipped."""
    pairs = [(b, a) for b, a in trace if b is not None and a is not None]
    if not pairs:
        return float("nan")
    return sum(a < b for b, a in pairs) / len(pairs)


def trace_improvement_ratio(metrics: list[dict]) -> float:
    return improvement_ratio([(m.get("fr_mse_before"), m.get("fr_mse_after")) for m in metrics])
