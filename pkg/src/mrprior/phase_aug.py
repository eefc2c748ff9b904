"""Phase augmentation by annealed Langevin sampling.

Given a magnitude image ``m``, draw complex images ``x`` from
``p(x | m) ~ p(x) exp(-eps |m - |x||^2)`` by running unadjusted Langevin
updates through the noise levels of the prior, noisiest first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SamplingError
from .grid import dft_centered, kspace_coords
from .priors import NoiseSchedule, Prior, schedule
from .rng import complex_normal, stream

__all__ = ["AugmentConfig", "magnitude_loglik_grad", "augment", "phase_highband_energy"]

_FLOOR = 1e-8


@dataclass
class AugmentConfig:
    eps: float = 1e4
    gamma: float = 0.1
    steps_per_level: int = 10
    samples: int = 5
    seed: int = 0
    denoise: bool = True
    schedule: NoiseSchedule = field(default_factory=lambda: schedule(100))

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.steps_per_level < 1:
            raise ValueError("need at least one step per level")
        if self.samples < 1:
            raise ValueError("need at least one sample")


def magnitude_loglik_grad(x, m, eps: float) -> np.ndarray:
    """Gradient of ``-eps |m - |x||^2``: ``2 eps (m - |x|) x / |x|``, with ``|x|`` floored."""
    x = np.asarray(x, dtype=np.complex128)
    m = np.asarray(m, dtype=np.float64)
    if x.shape != m.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {m.shape}")
    mag = np.abs(x)
    return 2.0 * eps * (m - mag) * x / np.maximum(mag, _FLOOR)


def _chain(m, prior: Prior, cfg: AugmentConfig, chain: int) -> np.ndarray:
    rng = stream(cfg.seed, chain)
    sched = cfg.schedule
    s0 = sched.sigma(0)
    x = s0 * complex_normal(rng, m.shape)
    for i in range(1, sched.n_scales + 1):
        sig = sched.sigma(i)
        gamma = cfg.gamma * (sig / s0) ** 2
        # the chain at level i carries noise of std sigma_i on top of the image
        # the magnitude refers to, which widens the likelihood accordingly
        eps = cfg.eps / (1.0 + 2.0 * cfg.eps * sig**2)
        if eps > 0:
            # explicit steps on the magnitude term are stable only for gamma * eps < 2
            gamma = min(gamma, 1.0 / eps)
        for k in range(cfg.steps_per_level):
            g = prior.score(x, i) + magnitude_loglik_grad(x, m, eps)
            x = x + 0.5 * gamma * g + np.sqrt(gamma) * complex_normal(rng, m.shape)
            if not np.all(np.isfinite(x)):
                raise SamplingError(f"chain {chain} diverged at level {i}, step {k}")
    if cfg.denoise:
        # Tweedie step: remove the residual noise of the last level
        sig = sched.sigma(sched.n_scales)
        eps = cfg.eps / (1.0 + 2.0 * cfg.eps * sig**2)
        x = x + sig**2 * (prior.score(x, sched.n_scales) + magnitude_loglik_grad(x, m, eps))
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"chain {chain} diverged in the final denoising step")
    return x


def augment(m, prior: Prior, config: AugmentConfig | None = None) -> list[np.ndarray]:
    """``config.samples`` complex images whose magnitudes follow ``m``.

    Chain ``j`` draws from its own stream ``(seed, j)``, so any subset of chains
    can be recomputed independently.
    """
    cfg = config or AugmentConfig()
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("magnitude must be a 2D grid")
    if np.any(m < 0):
        raise ValueError("magnitude must be non-negative")
    return [_chain(m, prior, cfg, j) for j in range(cfg.samples)]


def phase_highband_energy(x, m=None, cutoff: float = 0.25) -> float:
    """Mean spectral energy of ``m exp(i angle(x))`` at ``|k| > cutoff``.

    With ``m`` unset this is the energy of the unit phasor ``exp(i angle(x))``;
    pass a magnitude to down-weight the undefined phase of dark background.
    """
    x = np.asarray(x, dtype=np.complex128)
    u = np.exp(1j * np.angle(x))
    if m is not None:
        u = np.asarray(m, dtype=np.float64) * u
    ky, kx = kspace_coords(*x.shape)
    band = np.hypot(ky, kx) > cutoff
    return float(np.mean(np.abs(dft_centered(u)[band]) ** 2))
