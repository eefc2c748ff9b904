"""Recipe-driven reconstruction comparisons.

A recipe is a flat ``key = value`` file with ``[section]`` headers::

    [data]
    source = phantom          ; or: arrays (then list ArrayFiles in ``paths``)
    kind = random-ellipses
    phase = smooth-random
    size = 64
    slices = 2
    [coils]
    count = 8
    smoothness = 0.05
    [mask]
    kind = poisson            ; 1d | 2d | poisson
    accel = 2, 4, 6
    calib = 8
    [sim]
    noise_sd = 0.005
    [methods]
    run = zero-filled, pics-l2, pics-l1wav, pics-prior, nlinv-prior
    prior = gauss             ; or a score-network checkpoint directory

Each (method, accel, slice) cell writes its image as an ArrayFile plus PNG
renderings; all cells land in one ``metrics.csv``.
"""

from __future__ import annotations

import configparser
import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acquisition import adjoint, forward, make_mask_1d, make_mask_2d, make_mask_poisson, phantom, simulate_coils
from .grid import array_to_stack, read_array, write_array
from .metrics import psnr, ssim
from .priors import DiffusionPrior, GaussianPrior, L1WaveletPrior, fit_gaussian_prior, schedule
from .recon import NlinvConfig, coil_combined, estimate_coils_calib, nlinv, normalize_kspace, pics_cg, pics_fista

log = logging.getLogger(__name__)

__all__ = ["ExperimentError", "Recipe", "load_recipe", "run_experiment", "render_png", "METHODS"]

METHODS = ("zero-filled", "pics-l2", "pics-l1wav", "pics-prior", "nlinv-prior")
CSV_FIELDS = ("method", "accel", "slice", "psnr_db", "ssim")


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Recipe:
    source: str = "phantom"
    paths: list[str] = field(default_factory=list)
    kind: str = "random-ellipses"
    phase: str = "smooth-random"
    size: int = 64
    slices: int = 2
    coil_count: int = 8
    coil_smoothness: float = 0.05
    mask_kind: str = "poisson"
    accels: list[float] = field(default_factory=lambda: [4.0])
    calib: int = 8
    noise_sd: float = 0.005
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    recon_coils: str = "true"  # true | calib
    l2_alpha: float = 0.01
    l1_alpha: float = 0.003
    prior: str = "gauss"
    prior_alpha: float | None = None
    prior_train: int = 200
    iterations: int = 100
    gn_steps: int = 10
    reg_steps: int = 4
    seed: int = 0

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if self.source not in ("phantom", "arrays"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.mask_kind not in ("1d", "2d", "poisson"):
            raise ValueError(f"unknown mask kind {self.mask_kind!r}")
        if self.recon_coils not in ("true", "calib"):
            raise ValueError("recon_coils must be 'true' or 'calib'")


def _list(s, conv=str):
    return [conv(t.strip()) for t in s.replace(";", ",").split(",") if t.strip()]


def load_recipe(path) -> Recipe:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    with open(path) as f:
        cp.read_file(f)
    g = lambda sec, key, default=None: cp.get(sec, key, fallback=default)  # noqa: E731
    kw = {}
    simple = {
        ("data", "source"): ("source", str), ("data", "kind"): ("kind", str),
        ("data", "phase"): ("phase", str), ("data", "size"): ("size", int),
        ("data", "slices"): ("slices", int), ("coils", "count"): ("coil_count", int),
        ("coils", "smoothness"): ("coil_smoothness", float), ("mask", "kind"): ("mask_kind", str),
        ("mask", "calib"): ("calib", int), ("sim", "noise_sd"): ("noise_sd", float),
        ("methods", "coils"): ("recon_coils", str), ("methods", "l2_alpha"): ("l2_alpha", float),
        ("methods", "l1_alpha"): ("l1_alpha", float), ("methods", "prior"): ("prior", str),
        ("methods", "prior_alpha"): ("prior_alpha", float), ("methods", "prior_train"): ("prior_train", int),
        ("methods", "iterations"): ("iterations", int), ("nlinv", "gn_steps"): ("gn_steps", int),
        ("nlinv", "reg_steps"): ("reg_steps", int), ("run", "seed"): ("seed", int),
    }
    for (sec, key), (name, conv) in simple.items():
        v = g(sec, key)
        if v is not None:
            kw[name] = conv(v)
    if g("data", "paths"):
        kw["paths"] = _list(g("data", "paths"))
    if g("mask", "accel"):
        kw["accels"] = _list(g("mask", "accel"), float)
    if g("methods", "run"):
        kw["methods"] = _list(g("methods", "run"))
    base = Path(path).parent
    if "paths" in kw:
        kw["paths"] = [str(p if os.path.isabs(p) else base / p) for p in kw["paths"]]
    if "prior" in kw and kw["prior"] not in ("gauss", "none") and not os.path.isabs(kw["prior"]):
        kw["prior"] = str(base / kw["prior"])
    return Recipe(**kw)


def render_png(path, img, what: str = "magnitude") -> None:
    """Magnitude mapped linearly from [0, max] to gray; phase on a cyclic colormap."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    img = np.asarray(img)
    if what == "magnitude":
        mag = np.abs(img)
        top = mag.max() if mag.max() > 0 else 1.0
        plt.imsave(path, mag, cmap="gray", vmin=0.0, vmax=top)
    else:
        plt.imsave(path, np.angle(img), cmap="twilight", vmin=-np.pi, vmax=np.pi)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ExperimentError:
        raise
    except Exception as exc:  # report which step broke, keep the cause chained
        raise ExperimentError(name, exc) from exc


def _load_images(r: Recipe):
    if r.source == "phantom":
        return [phantom(r.size, r.size, r.kind, r.phase, seed=r.seed * 1000 + j) for j in range(r.slices)]
    imgs = []
    for p in r.paths:
        _, data = read_array(p)
        imgs.extend(array_to_stack(data))
    if not imgs:
        raise ValueError("no input arrays listed")
    return [im / max(np.abs(im).max(), 1e-300) for im in imgs]


def _make_mask(r: Recipe, shape, accel, idx):
    rows, cols = shape
    if r.mask_kind == "1d":
        return make_mask_1d(rows, cols, int(round(accel)), r.calib)
    if r.mask_kind == "2d":
        a = int(round(np.sqrt(accel)))
        return make_mask_2d(rows, cols, a, max(1, int(round(accel / a))), r.calib, r.calib)
    return make_mask_poisson(rows, cols, accel, r.calib, r.calib, seed=r.seed * 100 + idx)


def _make_prior(r: Recipe, shape):
    if r.prior == "none":
        return None, 0.0
    if r.prior == "gauss":
        train = [phantom(*shape, r.kind, r.phase, seed=10_000 + r.seed * 1000 + j) for j in range(r.prior_train)]
        params = fit_gaussian_prior(np.stack(train))
        return GaussianPrior(params), (r.noise_sd**2 if r.prior_alpha is None else r.prior_alpha)
    from .scorenet import load_checkpoint

    net = load_checkpoint(r.prior)
    return DiffusionPrior(net, net.schedule()), (4e-5 if r.prior_alpha is None else r.prior_alpha)


def _reconstruct(method, y, coils, mask, prior, prior_alpha, r: Recipe):
    if method == "zero-filled":
        return adjoint(y, coils, mask)
    if method == "pics-l2":
        return pics_cg(y, coils, mask, r.l2_alpha)
    if method == "pics-l1wav":
        return pics_fista(y, coils, mask, L1WaveletPrior(), r.l1_alpha, iterations=r.iterations)
    if method == "pics-prior":
        if prior is None:
            raise ValueError("pics-prior needs a prior")
        return pics_fista(y, coils, mask, prior, prior_alpha, iterations=r.iterations)
    cfg = NlinvConfig(gn_steps=r.gn_steps, reg_steps=r.reg_steps)
    x, c = nlinv(y, mask, cfg, prior=prior)
    # coil-combined magnitude with the phase of the image estimate
    return coil_combined(x, c) * np.exp(1j * np.angle(x))


def run_experiment(recipe, out_dir, seed: int | None = None) -> list[dict]:
    """Run every (method, accel, slice) cell; returns the metric rows."""
    r = load_recipe(recipe) if not isinstance(recipe, Recipe) else recipe
    if seed is not None:
        r.seed = seed
    out = Path(out_dir)
    (out / "arrays").mkdir(parents=True, exist_ok=True)
    (out / "png").mkdir(exist_ok=True)

    images = _stage("data", _load_images, r)
    shape = images[0].shape
    coils = _stage("coils", simulate_coils, *shape, r.coil_count, r.coil_smoothness, seed=r.seed)
    prior, prior_alpha = (None, 0.0)
    if any(m in r.methods for m in ("pics-prior", "nlinv-prior")):
        prior, prior_alpha = _stage("prior", _make_prior, r, shape)

    rows = []
    for ai, accel in enumerate(r.accels):
        mask = _stage("mask", _make_mask, r, shape, accel, ai)
        for j, img in enumerate(images):
            y = _stage("sim", forward, img, coils, mask, r.noise_sd, seed=r.seed * 10_000 + 100 * ai + j)
            y, scale = normalize_kspace(y, mask)
            ref = np.abs(img) * scale
            rc = coils if r.recon_coils == "true" else _stage("coils", estimate_coils_calib, y, mask)
            for method in r.methods:
                x = _stage(method, _reconstruct, method, y, rc, mask, prior, prior_alpha, r)
                name = f"{method}_a{accel:g}_s{j}"
                write_array(out / "arrays" / name, x)
                render_png(out / "png" / f"{name}_mag.png", x, "magnitude")
                render_png(out / "png" / f"{name}_phase.png", x, "phase")
                rows.append(dict(method=method, accel=f"{accel:g}", slice=j,
                                 psnr_db=f"{psnr(ref, np.abs(x)):.4f}", ssim=f"{ssim(ref, np.abs(x)):.4f}"))
                log.info("%s psnr %s ssim %s", name, rows[-1]["psnr_db"], rows[-1]["ssim"])
            write_array(out / "arrays" / f"reference_a{accel:g}_s{j}", ref.astype(np.complex128))

    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    with open(out / "metrics.txt", "w") as f:
        f.write(f"{'method':<14}{'accel':>7}{'slice':>7}{'psnr_db':>10}{'ssim':>9}\n")
        for row in rows:
            f.write(f"{row['method']:<14}{row['accel']:>7}{row['slice']:>7}{row['psnr_db']:>10}{row['ssim']:>9}\n")
    return rows
