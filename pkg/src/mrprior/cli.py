"""Command line entry point: ``mrprior <command> ...``.

Every command reads and writes ``.hdr``/``.cfl`` array files. Images are
``rows x cols``; coil sets and k-space are ``rows x cols x channels``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import acquisition as acq
from .grid import array_to_stack, read_array, stack_to_array, write_array
from .priors import (DiffusionPrior, GaussianPrior, GaussianPriorParams, L1WaveletPrior, L2Prior, schedule,
                     smoothness_precision)

log = logging.getLogger("mrprior")


def _read_grid(path) -> np.ndarray:
    _, data = read_array(path)
    data = np.asarray(data, dtype=np.complex128)
    if data.ndim > 2 and data[0, 0].size == 1:
        data = data.reshape(data.shape[:2])
    if data.ndim != 2:
        raise SystemExit(f"{path}: expected a 2D grid, found dims {list(data.shape)}")
    return data


def _read_stack(path) -> np.ndarray:
    _, data = read_array(path)
    return array_to_stack(data)


def _read_mask(path) -> np.ndarray:
    return np.abs(_read_grid(path)) > 0.5


def _write_stack(path, stack):
    write_array(path, stack_to_array(np.asarray(stack)))


# ---------------------------------------------------------------- priors


def load_gaussian(path) -> GaussianPriorParams:
    """Gaussian oracle stored as ``<dir>/mean`` and ``<dir>/precision`` array files."""
    d = Path(path)
    mean = _read_grid(d / "mean")
    prec = _read_grid(d / "precision").real
    return GaussianPriorParams(mean, prec)


def save_gaussian(path, params: GaussianPriorParams) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    write_array(d / "mean", params.mean)
    write_array(d / "precision", params.precision.astype(np.complex128))


def _prior_from_args(args, shape):
    sched = schedule(args.schedule_n, args.sigma_min, args.sigma_max)
    kind = args.prior
    if kind == "l2":
        return L2Prior()
    if kind == "l1wav":
        return L1WaveletPrior()
    if kind == "gauss":
        if args.prior_file:
            params = load_gaussian(args.prior_file)
        else:
            params = GaussianPriorParams(np.zeros(shape), smoothness_precision(*shape))
        return GaussianPrior(params, sched)
    if kind == "diffusion":
        from .scorenet import load_checkpoint

        if not args.prior_file:
            raise SystemExit("--prior diffusion needs --prior-file <checkpoint dir>")
        net = load_checkpoint(args.prior_file)
        return DiffusionPrior(net, net.schedule() or sched)
    raise SystemExit(f"unknown prior {kind!r}")


def _add_prior_flags(p, default="l2"):
    p.add_argument("--prior", default=default, choices=["l2", "l1wav", "gauss", "diffusion"])
    p.add_argument("--prior-file", help="Gaussian parameter dir or score-network checkpoint")
    p.add_argument("--prior-weight", "--alpha", dest="alpha", type=float, default=0.01)
    p.add_argument("--schedule-N", dest="schedule_n", type=int, default=100)
    p.add_argument("--sigma-min", type=float, default=0.01)
    p.add_argument("--sigma-max", type=float, default=0.3)


# ---------------------------------------------------------------- commands


def cmd_mask(a):
    if a.kind == "1d":
        m = acq.make_mask_1d(a.rows, a.cols, int(a.accel), a.calib, seed=a.seed)
    elif a.kind == "2d":
        m = acq.make_mask_2d(a.rows, a.cols, int(a.accel), int(a.accel_c or 1), a.calib, a.calib)
    else:
        m = acq.make_mask_poisson(a.rows, a.cols, a.accel, a.calib, a.calib, seed=a.seed, density=a.density)
    write_array(a.out, m.kept.astype(np.complex64))
    print(f"acceleration {m.realized_acceleration:.3f}")


def cmd_phantom(a):
    write_array(a.out, acq.phantom(a.rows, a.cols, a.kind, a.phase, seed=a.seed))


def cmd_coils(a):
    _write_stack(a.out, acq.simulate_coils(a.rows, a.cols, a.nc, a.smoothness, seed=a.seed))


def cmd_sim(a):
    img = _read_grid(a.image)
    coils = _read_stack(a.coils)
    mask = _read_mask(a.mask)
    _write_stack(a.out, acq.forward(img, coils, mask, a.noise_sd, seed=a.seed))


def cmd_pics(a):
    from .recon import normalize_kspace, pics_cg, pics_fista

    y = _read_stack(a.ksp)
    coils = _read_stack(a.coils)
    mask = _read_mask(a.mask)
    scale = 1.0
    if a.normalize:
        y, scale = normalize_kspace(y, mask)
    if a.prior == "l2" and a.solver == "cg":
        x = pics_cg(y, coils, mask, a.alpha, max_iter=a.iters)
    else:
        prior = _prior_from_args(a, mask.shape)
        x = pics_fista(y, coils, mask, prior, a.alpha, iterations=a.iters, seed=a.seed)
    write_array(a.out, x / scale)


def cmd_nlinv(a):
    from .recon import NlinvConfig, coil_combined, nlinv

    y = _read_stack(a.ksp)
    mask = _read_mask(a.mask)
    cfg = NlinvConfig(gn_steps=a.gn_steps, reg_steps=a.reg_steps, alpha_min=a.alpha_min, cg_iters=a.cg_iters,
                      fista_iters=a.fista_iters, sobolev_a=a.sobolev_a, sobolev_l=a.sobolev_l)
    prior = None if a.prior == "l2" and a.prior_file is None else _prior_from_args(a, mask.shape)
    x, c = nlinv(y, mask, cfg, prior=prior, seed=a.seed)
    write_array(a.out, x)
    if a.coils_out:
        _write_stack(a.coils_out, c)
    if a.combined_out:
        write_array(a.combined_out, coil_combined(x, c) * np.exp(1j * np.angle(x)))


def _load_training_grids(path) -> np.ndarray:
    p = Path(path)
    files = sorted(p.glob("*.hdr")) if p.is_dir() else [p]
    grids = []
    for f in files:
        grids.extend(_read_stack(f.with_suffix("")))
    if not grids:
        raise SystemExit(f"no array files found in {path}")
    return np.stack(grids)


def cmd_train_prior(a):
    from .scorenet import TrainConfig, save_checkpoint, train

    data = _load_training_grids(a.data)
    cfg = TrainConfig(mode=a.mode, epochs=a.epochs, batch=a.batch, learn_rate=a.lr, seed=a.seed,
                      schedule=schedule(a.schedule_n, a.sigma_min, a.sigma_max), layers=a.layers, width=a.width)
    net, hist = train(data, cfg)
    save_checkpoint(net, a.out)
    k = max(1, len(hist) // 10)
    print(f"loss {np.mean(hist[:k]):.4f} -> {np.mean(hist[-k:]):.4f} over {len(hist)} steps")


def cmd_augment_phase(a):
    from .phase_aug import AugmentConfig, augment

    files = []
    for item in a.inputs:
        p = Path(item)
        files.extend(sorted(f.with_suffix("") for f in p.glob("*.hdr")) if p.is_dir() else [p])
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for f in files:
        m = np.abs(_read_grid(f))
        if a.prior == "gauss":
            prior = GaussianPrior(GaussianPriorParams(np.zeros(m.shape), smoothness_precision(*m.shape)),
                                  schedule(a.schedule_n))
        elif (Path(a.prior) / "manifest.txt").exists():
            from .scorenet import load_checkpoint

            net = load_checkpoint(a.prior)
            prior = DiffusionPrior(net, net.schedule())
        else:
            prior = GaussianPrior(load_gaussian(a.prior), schedule(a.schedule_n))
        sched = getattr(prior, "schedule", None) or schedule(a.schedule_n)
        cfg = AugmentConfig(eps=a.eps, gamma=a.gamma, steps_per_level=a.steps_per_level, samples=a.samples,
                            seed=a.seed, schedule=sched)
        for j, x in enumerate(augment(m, prior, cfg)):
            write_array(out / f"{Path(f).name}_aug{j}", x)


def cmd_prep(a):
    from .dataprep import conform_slices, exclusion_check, prep_slice, read_nifti

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["file slice status patch_mean patch_sd"]
    for path in a.inputs:
        vol = read_nifti(path)
        stem = Path(path).name.split(".")[0]
        for z, sl in enumerate(conform_slices(vol, a.target)):
            g = prep_slice(sl, a.noise_mean, a.noise_sd, seed=a.seed, index=z)
            if g is None:
                lines.append(f"{stem} {z} empty nan nan")
                continue
            st = exclusion_check(g, corner=a.corner)
            lines.append(f"{stem} {z} {'kept' if st.keep else 'excluded'} {st.mean:.6g} {st.sd:.6g}")
            if st.keep:
                write_array(out / f"{stem}_z{z:03d}", g.astype(np.complex128))
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def cmd_metrics(a):
    from .metrics import psnr, ssim

    ref, test = _read_grid(a.ref), _read_grid(a.test)
    text = f"psnr_db,ssim\n{psnr(ref, test):.4f},{ssim(ref, test):.4f}\n"
    if a.out:
        Path(a.out).write_text(text)
    print(text, end="")


def cmd_run(a):
    from .experiment import run_experiment

    rows = run_experiment(a.recipe, a.out, seed=a.seed)
    print(f"{len(rows)} cells written to {Path(a.out) / 'metrics.csv'}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mrprior", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def grid_flags(p):
        p.add_argument("--rows", type=int, default=64)
        p.add_argument("--cols", type=int, default=64)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("mask", help="sampling mask")
    grid_flags(p)
    p.add_argument("--kind", choices=["1d", "2d", "poisson"], default="poisson")
    p.add_argument("--accel", type=float, required=True)
    p.add_argument("--accel-c", type=float, help="column acceleration for --kind 2d")
    p.add_argument("--calib", type=int, default=0)
    p.add_argument("--density", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_mask)

    p = sub.add_parser("phantom", help="numerical phantom")
    grid_flags(p)
    p.add_argument("--kind", choices=["shepp-logan", "random-ellipses"], default="shepp-logan")
    p.add_argument("--phase", choices=["none", "smooth-random"], default="none")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_phantom)

    p = sub.add_parser("coils", help="simulated coil sensitivities")
    grid_flags(p)
    p.add_argument("--nc", type=int, default=8)
    p.add_argument("--smoothness", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_coils)

    p = sub.add_parser("sim", help="simulate multi-coil k-space")
    p.add_argument("--image", required=True)
    p.add_argument("--coils", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sim)

    p = sub.add_parser("pics", help="linear reconstruction with known coils")
    p.add_argument("--ksp", required=True)
    p.add_argument("--coils", required=True)
    p.add_argument("--mask", required=True)
    _add_prior_flags(p)
    p.add_argument("--solver", choices=["fista", "cg"], default="fista")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--normalize", action="store_true", help="scale data so the zero-filled image peaks at 1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pics)

    p = sub.add_parser("nlinv", help="joint image and coil reconstruction")
    p.add_argument("--ksp", required=True)
    p.add_argument("--mask", required=True)
    _add_prior_flags(p)
    p.add_argument("--gn-steps", type=int, default=10)
    p.add_argument("--reg-steps", type=int, default=4)
    p.add_argument("--alpha-min", type=float, default=1e-4)
    p.add_argument("--cg-iters", type=int, default=30)
    p.add_argument("--fista-iters", type=int, default=10)
    p.add_argument("--sobolev-a", type=float, default=220.0)
    p.add_argument("--sobolev-l", type=float, default=32.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--coils-out")
    p.add_argument("--combined-out", help="also write |x| * RSS(c) with the phase of x (gauge free)")
    p.set_defaults(fn=cmd_nlinv)

    p = sub.add_parser("train-prior", help="train a score network")
    p.add_argument("--mode", choices=["smld", "ddpm"], default="smld")
    p.add_argument("--data", required=True, help="array file or directory of array files")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--schedule-N", dest="schedule_n", type=int, default=100)
    p.add_argument("--sigma-min", type=float, default=0.01)
    p.add_argument("--sigma-max", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_prior)

    p = sub.add_parser("augment-phase", help="complex images from magnitudes")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--prior", default="gauss", help="'gauss', a Gaussian parameter dir or a checkpoint")
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--eps", type=float, default=1e4)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--steps-per-level", type=int, default=10)
    p.add_argument("--schedule-N", dest="schedule_n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_augment_phase)

    p = sub.add_parser("prep", help="NIfTI volumes -> normalized slices")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target", type=int, default=256)
    p.add_argument("--noise-mean", type=float, default=0.003)
    p.add_argument("--noise-sd", type=float, default=5.0)
    p.add_argument("--corner", choices=["tl", "tr", "bl", "br"], default="tl")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_prep)

    p = sub.add_parser("metrics", help="PSNR and SSIM of two images")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("run", help="run an experiment recipe")
    p.add_argument("--recipe", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
