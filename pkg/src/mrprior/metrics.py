"""Image quality metrics on magnitude images.

Complex inputs are reduced by modulus first; real inputs are used as given. PSNR uses the reference peak;
SSIM uses an 11x11 Gaussian window (sd 1.5), K1 = 0.01, K2 = 0.03 and
dynamic range ``max(ref)``, averaged over the window-valid interior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

__all__ = ["psnr", "ssim", "MetricsReport", "compare"]


def _pair(ref, test):
    ref, test = np.asarray(ref), np.asarray(test)
    # complex images are compared by magnitude; real ones as given
    if np.iscomplexobj(ref):
        ref = np.abs(ref)
    if np.iscomplexobj(test):
        test = np.abs(test)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    return ref.astype(np.float64), test.astype(np.float64)


def psnr(ref, test) -> float:
    """``20 log10(max(ref) / RMSE)``; ``inf`` for identical inputs."""
    ref, test = _pair(ref, test)
    peak = ref.max()
    if not peak > 0:
        raise ValueError("reference is all zero")
    rmse = np.sqrt(np.mean((ref - test) ** 2))
    if rmse == 0:
        return float("inf")
    return float(20 * np.log10(peak / rmse))


def _gauss_window(size=11, sd=1.5):
    r = np.arange(size) - size // 2
    g = np.exp(-0.5 * (r / sd) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim(ref, test, k1: float = 0.01, k2: float = 0.03, win: int = 11, sd: float = 1.5) -> float:
    ref, test = _pair(ref, test)
    if min(ref.shape) < win:
        raise ValueError(f"images must be at least {win}x{win}")
    L = ref.max() if ref.max() > 0 else 1.0
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    w = _gauss_window(win, sd)

    def f(a):
        return correlate(a, w, mode="reflect")

    mx, my = f(ref), f(test)
    vx = f(ref * ref) - mx * mx
    vy = f(test * test) - my * my
    cxy = f(ref * test) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    p = win // 2
    return float(s[p:-p, p:-p].mean())


@dataclass(frozen=True)
class MetricsReport:
    psnr_db: float
    ssim: float
    ref_id: str = "ref"
    test_id: str = "test"
    region: str = "full-grid"


def compare(ref, test, ref_id="ref", test_id="test") -> MetricsReport:
    return MetricsReport(psnr(ref, test), ssim(ref, test), ref_id, test_id)
