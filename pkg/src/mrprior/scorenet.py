"""Small convolutional score network, trained by denoising score matching.

Everything runs in numpy with a hand-written backward pass. Feature maps are
channels-last ``(batch, rows, cols, channels)``; complex images enter as two
channels (real, imaginary).

Parameterizations, with ``x_i = x_0 + sigma_i z`` and ``z`` standard normal per
real component:

* ``smld``: the network output ``u`` gives the score ``u / sigma_i``; the loss
  ``sigma_i^2 |s - (-z/sigma_i)|^2`` reduces to ``|u + z|^2``.
* ``ddpm``: the network sees ``x_i / sqrt(1 + sigma_i^2)`` (the variance
  preserving view of the same sample), predicts ``z`` with unit weighting and
  the score is ``-u / sigma_i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, TrainingError
from .grid import read_array, write_array
from .priors import NoiseSchedule, schedule as make_schedule
from .rng import complex_normal, stream

log = logging.getLogger(__name__)

__all__ = ["ScoreNet", "TrainConfig", "dsm_loss", "train", "augment_batch", "save_checkpoint",
           "load_checkpoint"]


def _sigmoid(h):
    return 0.5 * (1.0 + np.tanh(0.5 * h))


def _conv(x, w, b):
    _, H, W, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = xp[:, 0:H, 0:W, :] @ w[0, 0]
    for dy in range(3):
        for dx in range(3):
            if dy or dx:
                out += xp[:, dy : dy + H, dx : dx + W, :] @ w[dy, dx]
    out += b
    return out


def _conv_backward(x, w, gout, need_input=True):
    _, H, W, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    gw = np.empty_like(w)
    for dy in range(3):
        for dx in range(3):
            gw[dy, dx] = np.tensordot(xp[:, dy : dy + H, dx : dx + W, :], gout, axes=([0, 1, 2], [0, 1, 2]))
    gb = gout.sum(axis=(0, 1, 2))
    gx = None
    if need_input:
        gp = np.pad(gout, ((0, 0), (1, 1), (1, 1), (0, 0)))
        gx = np.zeros_like(x)
        for dy in range(3):
            for dx in range(3):
                gx += gp[:, 2 - dy : 2 - dy + H, 2 - dx : 2 - dx + W, :] @ w[dy, dx].T
    return gx, gw, gb


class ScoreNet:
    """``layers`` 3x3 convolutions with SiLU between them and a per-level bias
    added to the first hidden layer."""

    def __init__(self, layers: int = 6, width: int = 32, n_levels: int = 101, mode: str = "smld",
                 sigmas=None, seed=0, dtype=np.float32):
        if layers < 2:
            raise ValueError("need at least an input and an output layer")
        if mode not in ("smld", "ddpm"):
            raise ValueError(f"unknown mode {mode!r}")
        self.layers = layers
        self.width = width
        self.n_levels = n_levels
        self.mode = mode
        self.dtype = np.dtype(dtype)
        self.sigmas = None if sigmas is None else np.asarray(sigmas, dtype=np.float64)
        self.trained = False
        rng = stream(seed, 10)
        self.params: dict[str, np.ndarray] = {}
        chans = [2] + [width] * (layers - 1) + [2]
        for l in range(layers):
            cin, cout = chans[l], chans[l + 1]
            std = np.sqrt(2.0 / (9 * cin))
            if l == layers - 1:
                std *= 0.1
            self.params[f"w{l}"] = (rng.standard_normal((3, 3, cin, cout)) * std).astype(self.dtype)
            self.params[f"b{l}"] = np.zeros(cout, dtype=self.dtype)
        self.params["emb"] = (rng.standard_normal((n_levels, width)) * 0.1).astype(self.dtype)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def schedule(self) -> NoiseSchedule | None:
        if self.sigmas is None:
            return None
        return NoiseSchedule(len(self.sigmas) - 1, float(self.sigmas[-1]),
                             float(self.sigmas[0] - self.sigmas[-1]), self.sigmas.copy())

    def forward(self, x: np.ndarray, levels: np.ndarray, keep_cache: bool = False):
        """Raw network output for real input ``(B, H, W, 2)`` and integer levels ``(B,)``."""
        p = self.params
        h = _conv(x.astype(self.dtype, copy=False), p["w0"], p["b0"])
        h += p["emb"][np.asarray(levels)][:, None, None, :]
        cache = [x]
        for l in range(1, self.layers):
            s = _sigmoid(h)
            a = h * s
            if keep_cache:
                cache.append((h, s, a))
            h = _conv(a, p[f"w{l}"], p[f"b{l}"])
        return (h, cache) if keep_cache else h

    def backward(self, cache, levels, gout) -> dict[str, np.ndarray]:
        p = self.params
        grads = {}
        g = gout.astype(self.dtype, copy=False)
        for l in range(self.layers - 1, 0, -1):
            h, s, a = cache[l]
            ga, grads[f"w{l}"], grads[f"b{l}"] = _conv_backward(a, p[f"w{l}"], g)
            g = ga * (s * (1.0 + h * (1.0 - s)))
        _, grads["w0"], grads["b0"] = _conv_backward(cache[0].astype(self.dtype), p["w0"], g, need_input=False)
        gemb = np.zeros_like(p["emb"])
        np.add.at(gemb, np.asarray(levels), g.sum(axis=(1, 2)))
        grads["emb"] = gemb
        return grads

    def _input(self, x: np.ndarray, sig: np.ndarray) -> np.ndarray:
        if self.mode == "ddpm":
            x = x / np.sqrt(1.0 + sig**2)[:, None, None]
        return np.stack([x.real, x.imag], axis=-1)

    def score(self, x: np.ndarray, level: int, sched: NoiseSchedule | None = None) -> np.ndarray:
        """Learned score at noise level ``level`` for a complex grid or stack."""
        sched = sched or self.schedule()
        if sched is None:
            raise ConfigurationError("network has no noise schedule attached")
        x = np.asarray(x, dtype=np.complex128)
        single = x.ndim == 2
        xb = x[None] if single else x
        sig = np.full(len(xb), sched.sigma(level))
        levels = np.full(len(xb), level)
        u = self.forward(self._input(xb, sig), levels).astype(np.float64)
        s = (u[..., 0] + 1j * u[..., 1]) / sig[:, None, None]
        if self.mode == "ddpm":
            s = -s
        return s[0] if single else s


@dataclass
class TrainConfig:
    mode: str = "smld"
    epochs: int = 50
    batch: int = 8
    learn_rate: float = 1e-3
    seed: int = 0
    schedule: NoiseSchedule = field(default_factory=lambda: make_schedule(100))
    augment: bool = True
    layers: int = 6
    width: int = 32
    clip_norm: float = 1.0
    lr_floor: float = 0.1  # cosine decay of the learning rate down to this fraction

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not self.learn_rate > 0:
            raise ValueError("learn_rate must be positive")
        if self.mode not in ("smld", "ddpm"):
            raise ValueError(f"unknown mode {self.mode!r}")


def augment_batch(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent random mirror / flip / 90-degree rotation of each grid.

    Non-square grids only get the transforms that keep their shape.
    """
    out = np.empty_like(batch)
    square = batch.shape[-1] == batch.shape[-2]
    for j, g in enumerate(batch):
        k = int(rng.integers(8))
        g = np.rot90(g, k % 4 if square else 2 * (k % 2))
        if k >= 4:
            g = g[:, ::-1]
        out[j] = g
    return out


def dsm_loss(net: ScoreNet, batch: np.ndarray, sched: NoiseSchedule, seed=0, rng=None,
             levels=None, with_grad: bool = True):
    """Weighted denoising score-matching loss and its parameter gradients.

    Returns ``(loss, grads)``; the loss is the batch mean of the per-sample sum
    over all real entries (so a zero network has expected loss ``2 * rows * cols``).
    """
    batch = np.asarray(batch, dtype=np.complex128)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    if np.abs(batch).max() > 1 + 1e-6:
        raise ValueError("training grids must be normalized to peak magnitude <= 1")
    rng = rng if rng is not None else stream(seed, 11)
    B = batch.shape[0]
    if levels is None:
        levels = rng.integers(0, sched.n_scales + 1, size=B)
    levels = np.asarray(levels)
    z = complex_normal(rng, batch.shape)
    sig = sched.sigmas[levels]
    xi = batch + sig[:, None, None] * z
    zr = np.stack([z.real, z.imag], axis=-1)
    u, cache = net.forward(net._input(xi, sig), levels, keep_cache=True)
    resid = u.astype(np.float64) + zr if net.mode == "smld" else u.astype(np.float64) - zr
    loss = float(np.sum(resid**2) / B)
    if not with_grad:
        return loss, None
    grads = net.backward(cache, levels, 2.0 * resid / B)
    return loss, grads


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] -= upd.astype(params[k].dtype)


def train(dataset: np.ndarray, config: TrainConfig, net: ScoreNet | None = None, callback=None):
    """Train a score network with Adam; returns ``(net, loss_history)``.

    ``callback(epoch, history)`` runs after every epoch; a true return value
    stops training early. Deterministic given ``config.seed``.
    """
    data = np.asarray(dataset, dtype=np.complex128)
    if data.ndim != 3 or len(data) == 0:
        raise ValueError("dataset must be a non-empty stack of 2D grids")
    sched = config.schedule
    if net is None:
        net = ScoreNet(config.layers, config.width, sched.n_scales + 1, config.mode, sched.sigmas, seed=config.seed)
    net.sigmas = np.asarray(sched.sigmas, dtype=np.float64)
    opt = _Adam(net.params, config.learn_rate)
    history = []
    step = 0
    n = len(data)
    total = config.epochs * ((n + config.batch - 1) // config.batch)
    for epoch in range(config.epochs):
        rng = stream(config.seed, 12, epoch)
        order = rng.permutation(n)
        for start in range(0, n, config.batch):
            batch = data[order[start : start + config.batch]]
            if config.augment:
                batch = augment_batch(batch, rng)
            loss, grads = dsm_loss(net, batch, sched, rng=rng)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at step {step} (epoch {epoch})")
            gnorm = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            if config.clip_norm and gnorm > config.clip_norm:
                scale = config.clip_norm / gnorm
                grads = {k: g * scale for k, g in grads.items()}
            frac = config.lr_floor + (1 - config.lr_floor) * 0.5 * (1 + np.cos(np.pi * step / max(total, 1)))
            opt.lr = config.learn_rate * frac
            opt.step(net.params, grads)
            history.append(loss)
            step += 1
        log.debug("epoch %d loss %.4f", epoch, np.mean(history[-max(1, n // config.batch):]))
        if callback is not None and callback(epoch, history):
            break
    net.trained = True
    return net, np.asarray(history)


def save_checkpoint(net: ScoreNet, path) -> None:
    """Directory of single-precision tensors plus ``manifest.txt``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    names = sorted(net.params)
    for name in names:
        t = net.params[name].astype(np.float32)
        write_array(d / name, t.astype(np.complex64), dims=list(t.shape))
    sig = net.sigmas if net.sigmas is not None else np.array([])
    lines = [
        f"mode={net.mode}",
        f"layers={net.layers}",
        f"width={net.width}",
        f"n_levels={net.n_levels}",
        "activation=silu",
        "kernel=3x3",
        f"sigmas={' '.join(repr(float(s)) for s in sig)}",
        f"tensors={' '.join(names)}",
    ]
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> ScoreNet:
    d = Path(path)
    meta = {}
    for line in (d / "manifest.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    sig = [float(s) for s in meta.get("sigmas", "").split()]
    net = ScoreNet(int(meta["layers"]), int(meta["width"]), int(meta["n_levels"]), meta["mode"],
                   sig or None, dtype=np.float32)
    for name in meta["tensors"].split():
        dims, data = read_array(d / name)
        expected = net.params[name].shape
        arr = np.ascontiguousarray(data.real).reshape(expected)
        net.params[name] = arr.astype(np.float32)
    net.trained = True
    return net
