"""Digital link: VQ indices -> QAM symbols -> AWGN -> minimum-distance detection.

Indices are 0-based throughout (codeword ``j`` is ``codebook[j]``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import nearest_codeword


def _gray_inverse(g: int) -> int:
    n = 0
    while g:
        n ^= g
        g >>= 1
    return n


@dataclass(frozen=True)
class Constellation:
    """``M`` points in the complex plane, stored as a complex vector."""

    points: np.ndarray
    power: float = 1.0

    @property
    def M(self) -> int:
        return len(self.points)

    def as_real(self) -> np.ndarray:
        """2 x M real view (in-phase row, quadrature row)."""
        return np.vstack([self.points.real, self.points.imag])

    @classmethod
    def qam(cls, M: int = 16, power: float = 1.0, gray: bool = True) -> "Constellation":
        """Square QAM normalised to average power ``power``.

        With ``gray`` the index ``i`` lands on the grid cell whose row and
        column carry the Gray labels ``i // L`` and ``i % L`` (L = sqrt(M)), so
        neighbouring cells differ in one index bit. Otherwise plain row-major.
        """
        L = math.isqrt(M)
        if L * L != M or L < 2:
            raise ValueError(f"square QAM needs M in {{4, 16, 64, ...}}, got {M}")
        levels = np.arange(L) * 2.0 - (L - 1)
        pts = np.empty(M, dtype=complex)
        for i in range(M):
            r, c = divmod(i, L)
            if gray:
                r, c = _gray_inverse(r), _gray_inverse(c)
            pts[i] = levels[c] + 1j * levels[L - 1 - r]
        pts *= math.sqrt(power / np.mean(np.abs(pts) ** 2))
        return cls(pts, float(power))


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = 20.0
    power: float = 1.0

    @property
    def noise_var(self) -> float:
        """Total complex noise variance per symbol, P / 10^(snr/10)."""
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        return self.power / 10.0 ** (self.snr_db / 10.0)


def vq_quantize(codebook: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Nearest-codeword index per row of ``Y`` (lowest index on ties)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    codebook = np.asarray(codebook, dtype=np.float64)
    if Y.shape[1] != codebook.shape[1]:
        raise ValueError(f"feature dim {Y.shape[1]} != codeword dim {codebook.shape[1]}")
    return nearest_codeword(codebook, Y)[0]


def modulate(const: Constellation, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.int64)
    if z.size and (z.min() < 0 or z.max() >= const.M):
        raise IndexError(f"codeword index out of range [0, {const.M})")
    return const.points[z]


def awgn(symbols: np.ndarray, config: ChannelConfig, rng: np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise of total variance sigma^2 per symbol."""
    var = config.noise_var
    symbols = np.asarray(symbols, dtype=complex)
    if var == 0.0:
        return symbols.copy()
    std = math.sqrt(var / 2.0)
    noise = rng.normal(0.0, std, size=(2,) + symbols.shape)
    return symbols + noise[0] + 1j * noise[1]


def detect(const: Constellation, received: np.ndarray) -> np.ndarray:
    """Minimum-distance detection; midway points go to the lower index."""
    received = np.asarray(received, dtype=complex).ravel()
    rows = np.column_stack([received.real, received.imag])
    return nearest_codeword(const.as_real().T, rows)[0]


def transmit_indices(
    z: np.ndarray, const: Constellation, config: ChannelConfig, rng: np.random.Generator | None
) -> np.ndarray:
    """Send indices over the link and return the detected indices."""
    if config.noise_var == 0.0:
        return np.asarray(z).copy()
    return detect(const, awgn(modulate(const, z), config, rng))


def transmit(
    codebook: np.ndarray,
    const: Constellation,
    Y: np.ndarray,
    config: ChannelConfig,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full Tx/Rx chain. Returns ``(Y_hat, z_hat, z)``."""
    z = vq_quantize(codebook, Y)
    z_hat = transmit_indices(z, const, config, rng)
    return np.asarray(codebook)[z_hat], z_hat, z


def make_channel(const: Constellation, config: ChannelConfig):
    """Channel callable for :meth:`Graph.vq_lookup`."""

    def channel(z, rng):
        return transmit_indices(z, const, config, rng)

    return channel
