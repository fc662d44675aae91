"""2-D DFT, symmetric high-pass band, and frequency-gated purification."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SpectralConsistencyError(RuntimeError):
    """Inverse transform left a non-negligible imaginary residue."""


@dataclass(frozen=True)
class HighPassSpec:
    d: int = 16
    tau: float = 0.05

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"band divisor must be >= 1, got {self.d}")
        if self.tau < 0:
            raise ValueError(f"soft threshold must be >= 0, got {self.tau}")


def dft2_forward(x: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2-D DFT over the last two axes."""
    return np.fft.fft2(np.asarray(x, dtype=np.float64))


def dft2_inverse(spec: np.ndarray) -> np.ndarray:
    """Inverse 2-D DFT (carries the 1/(HW) normalization). Complex output."""
    return np.fft.ifft2(spec)


def _centered_index(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.where(k <= n // 2, k, k - n)


def highpass_mask(h: int, w: int, d: int) -> np.ndarray:
    """Binary mask in wrapped (unshifted) frequency layout.

    Bin (u, v) is zeroed iff |f_y| <= floor(h / 2d) and |f_x| <= floor(w / 2d),
    where f is the signed frequency index. The rule is even in f, so the mask
    is conjugate-symmetric and preserves real signals.
    """
    if d < 1:
        raise ValueError(f"band divisor must be >= 1, got {d}")
    ry = h // (2 * d)
    rx = w // (2 * d)
    fy = np.abs(_centered_index(h))[:, None]
    fx = np.abs(_centered_index(w))[None, :]
    low = (fy <= ry) & (fx <= rx)
    return np.where(low, 0.0, 1.0)


def highpass(x: np.ndarray, d: int, residue_tol: float = 1e-6) -> np.ndarray:
    """Real part of IDFT(DFT(x) * mask), applied over the last two axes."""
    x = np.asarray(x, dtype=np.float64)
    mask = highpass_mask(x.shape[-2], x.shape[-1], d)
    out = dft2_inverse(dft2_forward(x) * mask)
    residue = np.abs(out.imag).max() if out.size else 0.0
    if residue > residue_tol:
        raise SpectralConsistencyError(f"imaginary residue {residue:.3g} after inverse DFT")
    return out.real


def lowpass(x: np.ndarray, d: int) -> np.ndarray:
    """Complement of :func:`highpass`; the two sum back to ``x``."""
    x = np.asarray(x, dtype=np.float64)
    mask = 1.0 - highpass_mask(x.shape[-2], x.shape[-1], d)
    return dft2_inverse(dft2_forward(x) * mask).real


def soft_threshold(x: np.ndarray, tau: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def freq_gate(dh: np.ndarray, spec: HighPassSpec = HighPassSpec()) -> np.ndarray:
    """High-pass each channel, then soft-threshold. Input ``... x H x W``."""
    return soft_threshold(highpass(dh, spec.d), spec.tau)


def freq_gate_adjoint(dh: np.ndarray, spec: HighPassSpec, g: np.ndarray,
                      straight_through: bool = False) -> np.ndarray:
    """Vector-Jacobian product of :func:`freq_gate`.

    The high-pass operator is a real symmetric projection, so it is its own
    adjoint. The soft threshold has derivative 1 outside the dead zone and 0
    inside; with ``straight_through`` the dead zone passes gradients as if it
    were the identity (needed to train from a zero-initialized projection).
    """
    if not straight_through:
        hi = highpass(dh, spec.d)
        g = g * (np.abs(hi) > spec.tau)
    return highpass(g, spec.d)
