"""Reconstruction drivers: PICS with known coils and two-stage NLINV.

``pics_cg`` and ``pics_fista`` minimize ``1/2 |F_c x - y|^2 + alpha R(x)``.
``nlinv`` estimates image and coils jointly with an iteratively regularized
Gauss-Newton method: early steps use an l2 image penalty solved by CG, the last
``reg_steps`` steps use the supplied prior inside FISTA.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .acquisition import _mask_array, adjoint, calib_slices, forward, jacobian_adjoint, jacobian_apply, rss, sobolev_weight
from .errors import ConfigurationError, NumericalError
from .grid import dft_centered, idft_centered
from .priors import L2Prior, Prior
from .rng import complex_normal, stream

log = logging.getLogger(__name__)

__all__ = [
    "PicsConfig",
    "NlinvConfig",
    "normalize_kspace",
    "zero_filled",
    "estimate_coils_calib",
    "conjugate_gradient",
    "power_iteration",
    "pics_cg",
    "pics_fista",
    "pics_objective",
    "nlinv",
    "coil_combined",
]


@dataclass
class PicsConfig:
    prior: str = "l2"
    alpha: float = 0.01
    iterations: int = 100
    step: float | None = None
    tolerance: float = 0.0
    bind_schedule: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass
class NlinvConfig:
    gn_steps: int = 10
    reg_steps: int = 4
    alpha0: float = 1.0
    beta0: float = 1.0
    alpha_min: float = 1e-4
    cg_iters: int = 30
    fista_iters: int = 10
    sobolev_a: float = 220.0
    sobolev_l: float = 32.0
    inner_tol: float = 0.0
    coil_scale: float | None = None
    data_norm: float | None = 100.0

    def __post_init__(self):
        if not 0 <= self.reg_steps <= self.gn_steps:
            raise ValueError("need 0 <= reg_steps <= gn_steps")
        if self.alpha_min < 0:
            raise ValueError("alpha_min must be >= 0")


def zero_filled(ksp, mask=None) -> np.ndarray:
    """Root-sum-of-squares of the per-channel inverse DFTs."""
    ksp = np.asarray(ksp, dtype=np.complex128)
    if mask is not None:
        ksp = ksp * _mask_array(mask)
    return rss(idft_centered(ksp))


def normalize_kspace(ksp, mask=None) -> tuple[np.ndarray, float]:
    """Scale k-space so the zero-filled RSS image peaks at one; returns (scaled, scale)."""
    peak = zero_filled(ksp, mask).max()
    if peak == 0:
        return np.asarray(ksp, dtype=np.complex128), 1.0
    scale = 1.0 / peak
    return np.asarray(ksp, dtype=np.complex128) * scale, scale


def estimate_coils_calib(ksp, mask, calib=None, floor: float = 1e-3) -> np.ndarray:
    """Low-resolution coil maps from the fully sampled central block.

    Per-channel inverse DFT of the Hann-apodized calibration block, divided by
    the root-sum-of-squares (floored at ``floor * max``).
    """
    ksp = np.asarray(ksp, dtype=np.complex128)
    m = _mask_array(mask)
    rows, cols = m.shape
    if calib is None:
        calib = getattr(mask, "calib", (0, 0))
    cr, cc = calib
    if not cr or not cc:
        raise ConfigurationError("mask has no calibration region")
    sl = calib_slices(rows, cols, cr, cc)
    if not m[sl].all():
        raise ConfigurationError(f"calibration block {cr}x{cc} is not fully sampled")
    win = np.outer(np.hanning(cr + 2)[1:-1], np.hanning(cc + 2)[1:-1])
    low = np.zeros_like(ksp)
    low[:, sl[0], sl[1]] = ksp[:, sl[0], sl[1]] * win
    imgs = idft_centered(low)
    norm = rss(imgs)
    peak = norm.max()
    if peak == 0:
        warnings.warn("calibration data are all zero; returning zero coil maps")
        return np.zeros_like(imgs)
    return imgs / np.maximum(norm, floor * peak)


def conjugate_gradient(apply_A, b, x0=None, tol: float = 1e-8, max_iter: int = 100):
    """CG for a Hermitian positive (semi)definite operator; returns ``(x, rel_residual, iters)``."""
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply_A(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = np.vdot(r, r).real
    bnorm = np.sqrt(np.vdot(b, b).real)
    if bnorm == 0:
        return x, 0.0, 0
    it = 0
    for it in range(1, max_iter + 1):
        if np.sqrt(rr) <= tol * bnorm:
            it -= 1
            break
        Ap = apply_A(p)
        pAp = np.vdot(p, Ap).real
        if pAp <= 0:
            break
        a = rr / pAp
        x += a * p
        r -= a * Ap
        rr_new = np.vdot(r, r).real
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, float(np.sqrt(rr) / bnorm), it


def power_iteration(apply_N, shape, iters: int = 20, seed=0) -> float:
    """Largest eigenvalue of a Hermitian PSD operator (no safety margin)."""
    v = complex_normal(stream(seed, 20), shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = apply_N(v)
        lam = float(np.linalg.norm(w))
        if lam == 0:
            return 0.0
        v = w / lam
    return lam


def pics_cg(ksp, coils, mask, alpha: float, tol: float = 1e-8, max_iter: int = 300, x0=None) -> np.ndarray:
    """Solve ``(F_c^H F_c + alpha I) x = F_c^H y`` by conjugate gradients."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    rhs = adjoint(ksp, coils, mask)

    def normal(v):
        return adjoint(forward(v, coils, mask), coils, mask) + alpha * v

    x, res, _ = conjugate_gradient(normal, rhs, x0, tol, max_iter)
    if res > tol:
        warnings.warn(f"pics_cg stopped at relative residual {res:.2e} (tol {tol:.0e})")
    return x


def pics_objective(x, ksp, coils, mask, prior: Prior, alpha: float, level=None) -> float:
    r = forward(x, coils, mask) - ksp
    return 0.5 * float(np.vdot(r, r).real) - alpha * prior.log_density(x, level)


def _level_for(prior, k):
    sched = getattr(prior, "schedule", None)
    if sched is None:
        return None
    return min(k + 1, sched.n_scales)


def pics_fista(ksp, coils, mask, prior: Prior, alpha: float, iterations: int = 100, step=None,
               x0=None, restart: bool = True, bind_schedule: bool = True, tol: float = 0.0,
               seed=0, callback=None) -> np.ndarray:
    """FISTA on the PICS objective with the prior's proximal map.

    The step defaults to ``1/L`` with ``L`` from 20 power iterations of
    ``F_c^H F_c`` plus a 5% margin. Priors with a noise schedule advance one
    level per iteration when ``bind_schedule`` is set. Momentum is reset
    whenever the update direction turns against the momentum direction.
    """
    ksp = np.asarray(ksp, dtype=np.complex128)
    shape = np.shape(coils)[1:]
    if step is None:
        L = power_iteration(lambda v: adjoint(forward(v, coils, mask), coils, mask), shape, seed=seed)
        step = 1.0 / (1.05 * L) if L > 0 else 1.0
    x = np.zeros(shape, dtype=np.complex128) if x0 is None else np.asarray(x0, dtype=np.complex128).copy()
    z = x.copy()
    tk = 1.0
    for k in range(iterations):
        level = _level_for(prior, k) if bind_schedule else None
        grad = adjoint(forward(z, coils, mask) - ksp, coils, mask)
        x_new = prior.prox(z - step * grad, step * alpha, level)
        if not np.all(np.isfinite(x_new)):
            raise NumericalError(f"non-finite iterate at FISTA iteration {k}")
        if restart and np.vdot(z - x_new, x_new - x).real > 0:
            tk = 1.0
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * tk * tk))
        z = x_new + ((tk - 1) / t_next) * (x_new - x)
        delta = np.linalg.norm(x_new - x)
        x, tk = x_new, t_next
        if callback is not None:
            callback(k, x)
        if tol and delta <= tol * max(np.linalg.norm(x), 1e-300):
            break
    return x


# ---------------------------------------------------------------- NLINV


class _CoilBasis:
    """Coils parameterized by Sobolev-weighted k-space ``chat = w * DFT(c)``."""

    def __init__(self, rows, cols, a, l, scale=1.0):
        self.w = sobolev_weight(rows, cols, a, l).w / scale

    def to_coils(self, chat):
        return idft_centered(chat / self.w)

    def adjoint(self, gc):
        return dft_centered(gc) / self.w


def _model(x, c, mask):
    return dft_centered(x[None] * c) * _mask_array(mask)


def coil_combined(x, c) -> np.ndarray:
    """Gauge-invariant magnitude ``|x| * RSS(c)``."""
    return np.abs(x) * rss(c)


def nlinv(ksp, mask, config: NlinvConfig | None = None, prior: Prior | None = None, return_trace: bool = False,
          seed=0):
    """Two-stage IRGNM for joint image and coil estimation.

    Internally the data are scaled to norm ``config.data_norm``. Step ``k``
    minimizes ``1/2|J dm + F(m) - y|^2 + beta |chat + dchat|^2 + alpha R(x + dx)``,
    with ``R = |x - 1|^2`` (working units) and CG for ``k < n - r``, and
    ``R = -log p`` with FISTA afterwards; a user prior sees the image in input
    units. Returns ``(x, coils)`` or ``(x, coils, trace)``; ``x`` is in input
    units and the residual trace is too.
    """
    cfg = config or NlinvConfig()
    y = np.asarray(ksp, dtype=np.complex128)
    # work at a fixed data norm so the penalty weights mean the same thing for
    # every input; the image is mapped back (and the prior evaluated) in input units
    ynorm = float(np.linalg.norm(y))
    s = cfg.data_norm / ynorm if cfg.data_norm and ynorm > 0 else 1.0
    y = y * s
    m = _mask_array(mask)
    nc, rows, cols = y.shape
    if m.shape != (rows, cols):
        raise ValueError("mask does not match k-space")
    # penalties are taken relative to the initial guess (image 1, coils 0);
    # relative to zero the first step would annihilate the image
    x_ref = 1.0
    # the default penalty acts in working units so both stages agree on it
    user_prior = prior is not None
    prior = prior if user_prior else L2Prior(2.0, center=x_ref)
    ps = s if user_prior else 1.0
    basis = _CoilBasis(rows, cols, cfg.sobolev_a, cfg.sobolev_l,
                       np.sqrt(rows * cols) / 8 if cfg.coil_scale is None else cfg.coil_scale)

    x = np.ones((rows, cols), dtype=np.complex128)
    chat = np.zeros((nc, rows, cols), dtype=np.complex128)
    alpha, beta = cfg.alpha0, cfg.beta0
    trace = {"residual": [], "alpha": [], "beta": [], "stage": []}
    n, r = cfg.gn_steps, cfg.reg_steps
    stage2_total = max(1, r * cfg.fista_iters)
    stage2_count = 0

    def residual_norm(x, chat):
        return float(np.linalg.norm(_model(x, basis.to_coils(chat), m) - y))

    prev = residual_norm(x, chat)
    for k in range(n):
        c = basis.to_coils(chat)
        r0 = _model(x, c, m) - y

        def J(dx, dchat):
            return jacobian_apply(x, c, dx, basis.to_coils(dchat), m)

        def JH(res):
            gx, gc = jacobian_adjoint(x, c, res, m)
            return gx, basis.adjoint(gc)

        trace["alpha"].append(alpha)
        trace["beta"].append(beta)
        if k < n - r:
            trace["stage"].append(1)

            def normal(v):
                dx, dch = v[0], v[1:]
                gx, gc = JH(J(dx, dch))
                return np.concatenate([(gx + 2 * alpha * dx)[None], gc + 2 * beta * dch])

            gx, gc = JH(-r0)
            rhs = np.concatenate([(gx - 2 * alpha * (x - x_ref))[None], gc - 2 * beta * chat])
            sol, _, _ = conjugate_gradient(normal, rhs, tol=cfg.inner_tol, max_iter=cfg.cg_iters)
            dx, dchat = sol[0], sol[1:]
        else:
            trace["stage"].append(2)

            def jnormal(v):
                gx, gc = JH(J(v[0], v[1:]))
                return np.concatenate([gx[None], gc])

            L = power_iteration(jnormal, (nc + 1, rows, cols), seed=seed) * 1.05 + 2 * beta
            step = 1.0 / L
            dm = np.zeros((nc + 1, rows, cols), dtype=np.complex128)
            zm = dm.copy()
            tk = 1.0
            for j in range(cfg.fista_iters):
                level = None
                sched = getattr(prior, "schedule", None)
                if sched is not None:
                    level = 1 + min(sched.n_scales - 1, stage2_count * sched.n_scales // stage2_total)
                stage2_count += 1
                gx, gc = JH(J(zm[0], zm[1:]) + r0)
                gc = gc + 2 * beta * (chat + zm[1:])
                v = zm.copy()
                v[0] -= step * gx
                v[1:] -= step * gc
                new = v
                new[0] = ps * prior.prox((x + v[0]) / ps, step * alpha / ps**2, level) - x
                if not np.all(np.isfinite(new)):
                    raise NumericalError(f"non-finite iterate in Gauss-Newton step {k}, FISTA iteration {j}")
                if np.vdot(zm - new, new - dm).real > 0:
                    tk = 1.0
                t_next = 0.5 * (1 + np.sqrt(1 + 4 * tk * tk))
                zm = new + ((tk - 1) / t_next) * (new - dm)
                delta = np.linalg.norm(new - dm)
                dm, tk = new, t_next
                if cfg.inner_tol and delta <= cfg.inner_tol * max(np.linalg.norm(dm), 1e-300):
                    break
            dx, dchat = dm[0], dm[1:]
        x = x + dx
        chat = chat + dchat
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(chat))):
            raise NumericalError(f"non-finite estimate after Gauss-Newton step {k}")
        res = residual_norm(x, chat)
        trace["residual"].append(res / s)
        if res > prev * (1 + 1e-9):
            warnings.warn(f"data residual increased at Gauss-Newton step {k}: {prev / s:.4e} -> {res / s:.4e}")
        prev = res
        alpha = max(cfg.alpha_min, alpha / 2)
        beta = beta / 2
    c = basis.to_coils(chat)
    x = x / s
    if return_trace:
        return x, c, trace
    return x, c
