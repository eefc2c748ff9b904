"""Regularizers exposed through a common score / proximal interface.

A prior supplies ``score(x, level)``, the gradient of its (noise-smoothed) log
density, and ``prox(z, t, level)`` for ``argmin_x |x - z|^2 / (2t) - log p(x)``.
Priors without a closed-form proximal map fall back to a single gradient step
``z + t * score(z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError
from .grid import dft_centered, idft_centered

__all__ = [
    "NoiseSchedule",
    "schedule",
    "Prior",
    "L2Prior",
    "L1WaveletPrior",
    "GaussianPriorParams",
    "GaussianPrior",
    "DiffusionPrior",
    "haar_forward",
    "haar_inverse",
    "soft_threshold",
    "l1_wavelet_prox",
    "gaussian_score",
    "gaussian_log_density",
    "diffusion_score",
    "transition_factor",
    "prox_gradient_step",
    "prox_by_gradient_descent",
    "smoothness_precision",
    "fit_gaussian_prior",
]


@dataclass(frozen=True)
class NoiseSchedule:
    n_scales: int
    sigma_min: float
    sigma_max: float
    sigmas: np.ndarray = field(repr=False)

    def sigma(self, level: int) -> float:
        return float(self.sigmas[level])


def schedule(N: int, sigma_min: float = 0.01, sigma_max: float = 0.3) -> NoiseSchedule:
    """``sigma_i = sigma_min + sigma_max * log(1 + (1 - i/N) (e - 1))`` for i = 0..N."""
    if N < 1:
        raise ValueError("number of noise scales must be >= 1")
    i = np.arange(N + 1)
    sig = sigma_min + sigma_max * np.log1p((1.0 - i / N) * (np.e - 1.0))
    # exact endpoints; log1p(e - 1) is not exactly 1 in floating point
    sig[0] = sigma_min + sigma_max
    sig[N] = sigma_min
    return NoiseSchedule(N, float(sigma_min), float(sigma_max), sig)


# ---------------------------------------------------------------- wavelets


def _check_levels(shape, levels):
    rows, cols = shape[-2:]
    f = 2**levels
    if rows % f or cols % f:
        raise ValueError(f"grid {rows}x{cols} not divisible by 2**{levels}")


def haar_forward(x: np.ndarray, levels: int = 4) -> np.ndarray:
    """Orthonormal multi-level 2D Haar transform in the usual pyramid layout."""
    _check_levels(np.shape(x), levels)
    out = np.array(x, dtype=np.complex128, copy=True)
    r, c = out.shape
    s = 1 / np.sqrt(2)
    for _ in range(levels):
        blk = out[:r, :c]
        blk[:] = np.concatenate(((blk[0::2] + blk[1::2]) * s, (blk[0::2] - blk[1::2]) * s), axis=0)
        blk[:] = np.concatenate(
            ((blk[:, 0::2] + blk[:, 1::2]) * s, (blk[:, 0::2] - blk[:, 1::2]) * s), axis=1
        )
        r, c = r // 2, c // 2
    return out


def haar_inverse(w: np.ndarray, levels: int = 4) -> np.ndarray:
    _check_levels(np.shape(w), levels)
    out = np.array(w, dtype=np.complex128, copy=True)
    rows, cols = out.shape
    s = 1 / np.sqrt(2)
    for lev in reversed(range(levels)):
        r, c = rows >> lev, cols >> lev
        blk = out[:r, :c]
        a, d = blk[:, : c // 2].copy(), blk[:, c // 2 :].copy()
        blk[:, 0::2] = (a + d) * s
        blk[:, 1::2] = (a - d) * s
        a, d = blk[: r // 2].copy(), blk[r // 2 :].copy()
        blk[0::2] = (a + d) * s
        blk[1::2] = (a - d) * s
    return out


def _detail_mask(shape, levels):
    m = np.ones(shape, dtype=bool)
    m[: shape[0] >> levels, : shape[1] >> levels] = False
    return m


def soft_threshold(u: np.ndarray, theta: float) -> np.ndarray:
    """Complex soft thresholding ``u * max(0, 1 - theta/|u|)``."""
    mag = np.abs(u)
    scale = np.maximum(0.0, 1.0 - theta / np.maximum(mag, 1e-300))
    return u * scale


def l1_wavelet_prox(z: np.ndarray, threshold: float, levels: int = 4) -> np.ndarray:
    """Proximal map of ``threshold * |Haar details|_1``; the coarse band is kept."""
    if threshold == 0:
        _check_levels(np.shape(z), levels)
        return np.asarray(z, dtype=np.complex128).copy()
    w = haar_forward(z, levels)
    det = _detail_mask(w.shape, levels)
    w[det] = soft_threshold(w[det], threshold)
    return haar_inverse(w, levels)


# ---------------------------------------------------------------- priors


class Prior:
    """Base class; subclasses implement :meth:`score` and optionally :meth:`prox`."""

    name = "prior"
    has_exact_prox = False

    def score(self, x: np.ndarray, level=None) -> np.ndarray:
        raise NotImplementedError

    def log_density(self, x: np.ndarray, level=None) -> float:
        raise NotImplementedError(f"{self.name} has no tractable log density")

    def prox(self, z: np.ndarray, t: float, level=None) -> np.ndarray:
        return prox_gradient_step(self, z, t, level)


class L2Prior(Prior):
    """``log p(x) = -weight/2 * |x - center|^2``."""

    name = "l2"
    has_exact_prox = True

    def __init__(self, weight: float = 1.0, center=0.0):
        self.weight = float(weight)
        self.center = center

    def score(self, x, level=None):
        return -self.weight * (np.asarray(x, dtype=np.complex128) - self.center)

    def log_density(self, x, level=None):
        d = np.asarray(x, dtype=np.complex128) - self.center
        return -0.5 * self.weight * float(np.vdot(d, d).real)

    def prox(self, z, t, level=None):
        z = np.asarray(z, dtype=np.complex128)
        return (z + t * self.weight * self.center) / (1.0 + t * self.weight)


class L1WaveletPrior(Prior):
    """``log p(x) = -|Psi x|_1`` over Haar detail coefficients."""

    name = "l1wav"
    has_exact_prox = True

    def __init__(self, levels: int = 4):
        self.levels = levels

    def score(self, x, level=None):
        # minus a subgradient; sign(0) = 0
        w = haar_forward(x, self.levels)
        det = _detail_mask(w.shape, self.levels)
        g = np.zeros_like(w)
        mag = np.abs(w[det])
        g[det] = np.where(mag > 0, w[det] / np.maximum(mag, 1e-300), 0)
        return -haar_inverse(g, self.levels)

    def log_density(self, x, level=None):
        w = haar_forward(x, self.levels)
        return -float(np.abs(w[_detail_mask(w.shape, self.levels)]).sum())

    def prox(self, z, t, level=None):
        return l1_wavelet_prox(z, t, self.levels)


@dataclass(frozen=True)
class GaussianPriorParams:
    """Gaussian image model, diagonal in the centered DFT basis.

    Each real component of DFT coefficient ``k`` has variance ``1/precision[k]``.
    """

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.complex128)
        prec = np.broadcast_to(np.asarray(self.precision, dtype=np.float64), mean.shape).copy()
        if not np.all(prec > 0):
            raise ValueError("precision spectrum must be positive everywhere")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", prec)

    def sample(self, rng, n: int = 1) -> np.ndarray:
        from .rng import complex_normal

        z = complex_normal(rng, (n,) + self.mean.shape) / np.sqrt(self.precision)
        return self.mean[None] + idft_centered(z)


def fit_gaussian_prior(samples, floor: float = 1e-8) -> GaussianPriorParams:
    """Empirical mean and per-coefficient precision of a stack of grids."""
    x = np.asarray(samples, dtype=np.complex128)
    if x.ndim != 3 or len(x) < 2:
        raise ValueError("need a stack of at least two grids")
    mean = x.mean(axis=0)
    # variance per real component
    var = np.mean(np.abs(dft_centered(x - mean)) ** 2, axis=0) / 2
    return GaussianPriorParams(mean, 1.0 / np.maximum(var, floor))


def smoothness_precision(rows: int, cols: int, base: float = 1.0, growth: float = 1e4, power: float = 2.0):
    """Precision ``base * (1 + growth * |k|^power)``: favors smooth images."""
    from .grid import kspace_coords

    ky, kx = kspace_coords(rows, cols)
    return base * (1.0 + growth * (ky**2 + kx**2) ** (power / 2))


def _effective_precision(params: GaussianPriorParams, sigma: float) -> np.ndarray:
    return 1.0 / (1.0 / params.precision + sigma**2)


def gaussian_score(params: GaussianPriorParams, x: np.ndarray, sigma: float = 0.0) -> np.ndarray:
    """Score of the Gaussian prior smoothed by noise of per-component std ``sigma``."""
    x = np.asarray(x, dtype=np.complex128)
    if x.shape[-2:] != params.mean.shape:
        raise ValueError(f"grid {x.shape} does not match prior {params.mean.shape}")
    diff = dft_centered(x - params.mean)
    return idft_centered(-_effective_precision(params, sigma) * diff)


def gaussian_log_density(params: GaussianPriorParams, x: np.ndarray, sigma: float = 0.0) -> float:
    """Log density up to an additive constant."""
    diff = dft_centered(np.asarray(x, dtype=np.complex128) - params.mean)
    return -0.5 * float(np.sum(_effective_precision(params, sigma) * np.abs(diff) ** 2))


class GaussianPrior(Prior):
    """Analytic oracle prior; ``level`` maps to a smoothing sigma through ``schedule``."""

    name = "gauss"
    has_exact_prox = True

    def __init__(self, params: GaussianPriorParams, sched: NoiseSchedule | None = None):
        self.params = params
        self.schedule = sched

    def sigma(self, level) -> float:
        if level is None or self.schedule is None:
            return 0.0
        return self.schedule.sigma(min(level, self.schedule.n_scales))

    def score(self, x, level=None):
        return gaussian_score(self.params, x, self.sigma(level))

    def log_density(self, x, level=None):
        return gaussian_log_density(self.params, x, self.sigma(level))

    def prox(self, z, t, level=None):
        if t == 0:
            return np.asarray(z, dtype=np.complex128).copy()
        p = _effective_precision(self.params, self.sigma(level))
        Z = dft_centered(z)
        M = dft_centered(self.params.mean)
        return idft_centered((Z + t * p * M) / (1.0 + t * p))


def transition_factor(sched: NoiseSchedule, i: int, tau_sq: float | None = None) -> float:
    """``(sigma_{i-1}^2 - sigma_i^2) / tau_i^2`` scaling the score network output.

    By default ``tau_i^2 = sigma_i^2 (sigma_{i-1}^2 - sigma_i^2) / sigma_{i-1}^2``,
    the ancestral-sampling variance of the step from the noisier level ``i-1``.
    """
    s_prev, s_cur = sched.sigma(i - 1) ** 2, sched.sigma(i) ** 2
    gap = s_prev - s_cur
    if tau_sq is None:
        tau_sq = s_cur * gap / s_prev
    return gap / tau_sq


def diffusion_score(net, sched: NoiseSchedule, x: np.ndarray, i: int, normalize: bool = True,
                    tau_sq: float | None = None) -> np.ndarray:
    """Gradient of the learned reverse transition at level ``i`` (1..N).

    With ``normalize`` the argument is scaled to peak magnitude one before the
    network sees it, and the returned gradient is scaled back.
    """
    if net is None or not getattr(net, "trained", False):
        raise ConfigurationError("diffusion prior needs a trained score network")
    if getattr(net, "n_levels", sched.n_scales + 1) != sched.n_scales + 1:
        raise ConfigurationError(
            f"network conditioned on {net.n_levels} levels, schedule has {sched.n_scales + 1}"
        )
    if not 1 <= i <= sched.n_scales:
        raise ValueError(f"level {i} outside 1..{sched.n_scales}")
    x = np.asarray(x, dtype=np.complex128)
    scale = 1.0
    if normalize:
        peak = np.abs(x).max()
        if peak > 0:
            scale = peak
    s = net.score(x / scale, i, sched)
    return transition_factor(sched, i, tau_sq) * s / scale


class DiffusionPrior(Prior):
    name = "diffusion"
    has_exact_prox = False

    def __init__(self, net, sched: NoiseSchedule, normalize: bool = True, tau_sq=None):
        self.net = net
        self.schedule = sched
        self.normalize = normalize
        self.tau_sq = tau_sq

    def score(self, x, level=None):
        i = self.schedule.n_scales if level is None else min(max(level, 1), self.schedule.n_scales)
        return diffusion_score(self.net, self.schedule, x, i, self.normalize, self.tau_sq)


def prox_gradient_step(prior: Prior, z: np.ndarray, t: float, level=None) -> np.ndarray:
    """One unit gradient step approximating the proximal map: ``z + t * score(z)``."""
    if t < 0:
        raise ValueError("step must be non-negative")
    z = np.asarray(z, dtype=np.complex128)
    if t == 0:
        return z.copy()
    g = prior.score(z, level)
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite score from prior {prior.name!r}")
    return z + t * g


def prox_by_gradient_descent(prior: Prior, z, t: float, level=None, step: float | None = None,
                             iters: int = 500, tol: float = 0.0) -> np.ndarray:
    """Approximate the proximal map by repeated small gradient steps on its objective."""
    z = np.asarray(z, dtype=np.complex128)
    if t == 0:
        return z.copy()
    if step is None:
        step = 0.5 * t
    x = z.copy()
    for _ in range(iters):
        g = (x - z) / t - prior.score(x, level)
        x = x - step * g
        if tol and np.linalg.norm(g) * step <= tol * max(np.linalg.norm(x), 1e-300):
            break
    return x
