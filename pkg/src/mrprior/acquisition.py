"""Sampling masks, synthetic phantoms and coils, and the multi-coil operators.

Conventions: images and coil maps are ``(rows, cols)`` complex arrays, coil sets
and k-space are ``(nc, rows, cols)``. Gradients of real functionals with respect
to complex arguments are returned as ``d/dRe + 1j * d/dIm``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import dft_centered, idft_centered, kspace_coords
from .rng import complex_normal, stream

__all__ = [
    "SamplingMask",
    "MaskGenerationError",
    "make_mask_1d",
    "make_mask_2d",
    "make_mask_poisson",
    "calib_slices",
    "simulate_coils",
    "phantom",
    "forward",
    "adjoint",
    "jacobian_apply",
    "jacobian_adjoint",
    "sobolev_weight",
    "rss",
]


class MaskGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplingMask:
    kept: np.ndarray
    acceleration: float = 1.0
    calib: tuple[int, int] = (0, 0)
    kind: str = "custom"
    radius0: float = 0.0  # Poisson-disc base radius in samples (0 for lattices)
    density: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kept", np.asarray(self.kept, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.kept.shape

    @property
    def fraction(self) -> float:
        return float(self.kept.mean())

    @property
    def realized_acceleration(self) -> float:
        n = int(self.kept.sum())
        return float("inf") if n == 0 else self.kept.size / n

    def __array__(self, dtype=None, copy=None):
        return self.kept.astype(dtype) if dtype is not None else self.kept


def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, SamplingMask):
        return mask.kept
    return np.asarray(mask, dtype=bool)


def calib_slices(rows: int, cols: int, calib_rows: int, calib_cols: int):
    """Index slices of the centered calibration block."""
    r0 = rows // 2 - calib_rows // 2
    c0 = cols // 2 - calib_cols // 2
    return slice(r0, r0 + calib_rows), slice(c0, c0 + calib_cols)


def make_mask_1d(rows: int, cols: int, accel: int, calib_lines: int = 0, seed=None) -> SamplingMask:
    """Keep every ``accel``-th phase-encode line (a column) plus central lines.

    Lines start at column 0; a non-None ``seed`` draws a random lattice offset
    in ``[0, accel)`` instead.
    """
    if accel < 1:
        raise ValueError("accel must be >= 1")
    if not 0 <= calib_lines <= cols:
        raise ValueError(f"calib_lines={calib_lines} must lie in [0, cols={cols}]")
    offset = 0 if seed is None else int(stream(seed, 1).integers(accel))
    lines = np.zeros(cols, dtype=bool)
    lines[offset::accel] = True
    lines[calib_slices(1, cols, 1, calib_lines)[1]] = True
    kept = np.broadcast_to(lines, (rows, cols)).copy()
    return SamplingMask(kept, float(accel), (rows if calib_lines else 0, calib_lines), "1d")


def make_mask_2d(
    rows: int, cols: int, accel_r: int, accel_c: int, calib_rows: int = 0, calib_cols: int = 0
) -> SamplingMask:
    """Cartesian lattice keeping every (accel_r, accel_c)-th sample plus a central block."""
    if accel_r < 1 or accel_c < 1:
        raise ValueError("acceleration factors must be >= 1")
    if not (0 <= calib_rows <= rows and 0 <= calib_cols <= cols):
        raise ValueError("calibration block larger than grid")
    kept = np.zeros((rows, cols), dtype=bool)
    kept[::accel_r, ::accel_c] = True
    if calib_rows and calib_cols:
        kept[calib_slices(rows, cols, calib_rows, calib_cols)] = True
    return SamplingMask(kept, float(accel_r * accel_c), (calib_rows, calib_cols), "2d")


def _poisson_pattern(order, radius, rows, cols):
    # Random-order dart throwing on the grid: each accepted sample excludes the
    # disc of its own radius.
    blocked = np.zeros((rows, cols), dtype=bool)
    kept = np.zeros((rows, cols), dtype=bool)
    rmax = int(np.ceil(radius.max()))
    oy, ox = np.mgrid[-rmax : rmax + 1, -rmax : rmax + 1]
    d2 = oy**2 + ox**2
    flat_blocked = blocked.reshape(-1)
    for idx in order:
        if flat_blocked[idx]:
            continue
        y, x = divmod(int(idx), cols)
        kept[y, x] = True
        r = radius[y, x]
        ri = int(np.ceil(r))
        y0, y1 = max(0, y - ri), min(rows, y + ri + 1)
        x0, x1 = max(0, x - ri), min(cols, x + ri + 1)
        tmpl = d2[rmax + y0 - y : rmax + y1 - y, rmax + x0 - x : rmax + x1 - x]
        blocked[y0:y1, x0:x1] |= tmpl < r * r
        blocked[y, x] = True
    return kept


def make_mask_poisson(
    rows: int,
    cols: int,
    target_accel: float,
    calib_rows: int = 0,
    calib_cols: int = 0,
    seed=0,
    density: float = 2.0,
    tol: float = 0.1,
    max_tries: int = 40,
) -> SamplingMask:
    """Variable-density Poisson-disc mask hitting ``target_accel`` within ``tol``.

    The exclusion radius grows linearly with distance from the k-space center,
    ``r = r0 * (1 + density * |k|)``; ``r0`` is found by bisection with the
    random visiting order fixed by ``seed``.
    """
    if target_accel <= 1:
        raise ValueError("target_accel must be > 1")
    ky, kx = kspace_coords(rows, cols)
    knorm = np.sqrt(ky**2 + kx**2)
    order = stream(seed, 2).permutation(rows * cols)
    cal = np.zeros((rows, cols), dtype=bool)
    if calib_rows and calib_cols:
        cal[calib_slices(rows, cols, calib_rows, calib_cols)] = True

    def build(r0):
        kept = _poisson_pattern(order, r0 * (1.0 + density * knorm), rows, cols)
        kept |= cal
        return kept, kept.size / kept.sum(), r0

    lo, hi = 0.05, 2.0
    kept, acc, _ = build(hi)
    while acc < target_accel and hi < max(rows, cols):
        lo, hi = hi, hi * 2
        kept, acc, _ = build(hi)
    best = None
    for _ in range(max_tries):
        mid = 0.5 * (lo + hi)
        kept, acc, _ = cand = build(mid)
        if best is None or abs(acc - target_accel) < abs(best[1] - target_accel):
            best = cand
        if abs(acc / target_accel - 1) < 0.02:
            break
        if acc < target_accel:
            lo = mid
        else:
            hi = mid
    kept, acc, r0 = best
    if abs(acc / target_accel - 1) > tol:
        raise MaskGenerationError(
            f"could not reach acceleration {target_accel:g} on {rows}x{cols}; best achieved {acc:.3f}"
        )
    return SamplingMask(kept, float(target_accel), (calib_rows, calib_cols), "poisson", r0, density)


def rss(stack: np.ndarray, axis: int = 0) -> np.ndarray:
    """Root-sum-of-squares channel combination."""
    return np.sqrt(np.sum(np.abs(stack) ** 2, axis=axis))


def _lowpass(field: np.ndarray, frac: float) -> np.ndarray:
    rows, cols = field.shape[-2:]
    ky, kx = kspace_coords(rows, cols)
    band = (np.abs(ky) <= frac / 2) & (np.abs(kx) <= frac / 2)
    return idft_centered(dft_centered(field) * band)


def simulate_coils(rows: int, cols: int, nc: int, smoothness: float = 0.1, seed=0, return_raw=False):
    """Smooth random coil maps jointly normalized to unit root-sum-of-squares.

    Each map is a complex Gaussian field band-limited to the central
    ``smoothness`` fraction of k-space along each axis.
    """
    if nc < 1:
        raise ValueError("nc must be >= 1")
    rng = stream(seed, 3)
    raw = np.stack([_lowpass(complex_normal(rng, (rows, cols)), smoothness) for _ in range(nc)])
    norm = rss(raw)
    norm = np.maximum(norm, 1e-12 * max(norm.max(), 1e-300))
    maps = raw / norm
    return (maps, raw) if return_raw else maps


# (intensity, semi-axis a, semi-axis b, x0, y0, angle in degrees)
_SHEPP_LOGAN = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0),
]


def _ellipses(rows, cols, table):
    y = np.linspace(1, -1, rows)[:, None]
    x = np.linspace(-1, 1, cols)[None, :]
    img = np.zeros((rows, cols))
    for val, a, b, x0, y0, ang in table:
        t = np.deg2rad(ang)
        xr = (x - x0) * np.cos(t) + (y - y0) * np.sin(t)
        yr = -(x - x0) * np.sin(t) + (y - y0) * np.cos(t)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1] += val
    return img


def _random_ellipse_table(rng):
    a, b = rng.uniform(0.6, 0.9, 2)
    table = [(rng.uniform(0.5, 0.8), a, b, 0.0, 0.0, rng.uniform(-20, 20))]
    for _ in range(int(rng.integers(4, 9))):
        ea, eb = rng.uniform(0.08, 0.4, 2) * np.array([a, b])
        r = rng.uniform(0, 0.6)
        th = rng.uniform(0, 2 * np.pi)
        table.append(
            (rng.uniform(-0.3, 0.4), ea, eb, r * a * np.cos(th), r * b * np.sin(th), rng.uniform(0, 180))
        )
    return table


def phantom(rows: int, cols: int, kind: str = "shepp-logan", phase: str = "none", seed=0) -> np.ndarray:
    """Synthetic complex image with magnitude in [0, 1] and peak magnitude 1."""
    rng = stream(seed, 4)
    if kind == "shepp-logan":
        mag = _ellipses(rows, cols, _SHEPP_LOGAN)
    elif kind == "random-ellipses":
        table = _random_ellipse_table(rng)
        mag = _ellipses(rows, cols, table)
        # keep interior strictly positive so the support matches the outer ellipse
        support = _ellipses(rows, cols, table[:1]) > 0
        mag = np.where(support, np.maximum(mag, 0.05), 0.0)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    mag = np.clip(mag, 0, None)
    mag /= mag.max()
    if phase == "none":
        return mag.astype(np.complex128)
    if phase == "smooth-random":
        f = _lowpass(rng.standard_normal((rows, cols)), 0.1).real
        peak = np.abs(f).max()
        phi = np.pi * f / peak if peak > 0 else f
        phi = np.angle(np.exp(1j * phi))
        return mag * np.exp(1j * phi)
    raise ValueError(f"unknown phase model {phase!r}")


def _check_shapes(img_shape, coils, mask):
    coils = np.asarray(coils)
    if coils.ndim != 3 or coils.shape[1:] != tuple(img_shape):
        raise ValueError(f"coil shape {coils.shape} does not match image {tuple(img_shape)}")
    m = _mask_array(mask)
    if m.shape != tuple(img_shape):
        raise ValueError(f"mask shape {m.shape} does not match image {tuple(img_shape)}")
    return coils, m


def forward(img, coils, mask, noise_sd: float = 0.0, seed=0) -> np.ndarray:
    """Undersampled multi-coil k-space ``mask * DFT(img * c_j)`` plus noise on kept samples.

    ``noise_sd`` is the standard deviation of the real and of the imaginary part.
    """
    img = np.asarray(img, dtype=np.complex128)
    coils, m = _check_shapes(img.shape, coils, mask)
    ksp = dft_centered(img[None] * coils) * m
    if noise_sd > 0:
        ksp = ksp + noise_sd * complex_normal(stream(seed, 5), ksp.shape) * m
    return ksp


def adjoint(ksp, coils, mask) -> np.ndarray:
    """Adjoint of :func:`forward` without noise."""
    ksp = np.asarray(ksp, dtype=np.complex128)
    coils, m = _check_shapes(ksp.shape[1:], coils, mask)
    if ksp.shape != coils.shape:
        raise ValueError(f"k-space shape {ksp.shape} does not match coils {coils.shape}")
    return np.sum(np.conj(coils) * idft_centered(ksp * m), axis=0)


def jacobian_apply(x, c, dx, dc, mask) -> np.ndarray:
    """Derivative of the bilinear model at ``(x, c)`` applied to ``(dx, dc)``."""
    x = np.asarray(x, dtype=np.complex128)
    c, m = _check_shapes(x.shape, c, mask)
    dc = np.asarray(dc, dtype=np.complex128)
    if dc.shape != c.shape or np.shape(dx) != x.shape:
        raise ValueError("perturbation shape mismatch")
    return dft_centered(dx[None] * c + x[None] * dc) * m


def jacobian_adjoint(x, c, r, mask) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of :func:`jacobian_apply`: returns ``(dx, dc)``."""
    x = np.asarray(x, dtype=np.complex128)
    c, m = _check_shapes(x.shape, c, mask)
    r = np.asarray(r, dtype=np.complex128)
    if r.shape != c.shape:
        raise ValueError(f"residual shape {r.shape} does not match coils {c.shape}")
    back = idft_centered(r * m)
    return np.sum(np.conj(c) * back, axis=0), np.conj(x)[None] * back


@dataclass(frozen=True)
class SobolevWeight:
    w: np.ndarray = field(repr=False)
    a: float = 220.0
    l: float = 32.0


def sobolev_weight(rows: int, cols: int, a: float = 220.0, l: float = 32.0) -> SobolevWeight:
    """k-space weights ``(1 + a |k|^2)^(l/2)`` penalizing rough coil maps."""
    if a < 0 or l < 0:
        raise ValueError("a and l must be non-negative")
    ky, kx = kspace_coords(rows, cols)
    w = (1.0 + a * (ky**2 + kx**2)) ** (l / 2.0)
    return SobolevWeight(w, float(a), float(l))
