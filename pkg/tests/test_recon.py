import warnings

import numpy as np
import pytest

from mrprior.acquisition import (adjoint, forward, make_mask_2d, make_mask_poisson, phantom, rss, simulate_coils)
from mrprior.errors import ConfigurationError, NumericalError
from mrprior.grid import idft_centered
from mrprior.metrics import psnr
from mrprior.priors import GaussianPrior, GaussianPriorParams, L1WaveletPrior, L2Prior, Prior, haar_inverse
from mrprior.recon import (NlinvConfig, PicsConfig, coil_combined, conjugate_gradient, estimate_coils_calib, nlinv,
                           normalize_kspace, pics_cg, pics_fista, pics_objective, power_iteration, zero_filled)

from conftest import crandn, rel_err


def dense_operator(coils, mask):
    nc, n, m = coils.shape
    iy, ix = np.arange(n) - n // 2, np.arange(m) - m // 2
    E = np.kron(np.exp(-2j * np.pi * np.outer(iy, iy) / n) / np.sqrt(n),
                np.exp(-2j * np.pi * np.outer(ix, ix) / m) / np.sqrt(m))
    M = np.diag(np.asarray(mask, float).ravel())
    return np.vstack([M @ E @ np.diag(c.ravel()) for c in coils]), E


# ---------------------------------------------------------------- small helpers


def test_conjugate_gradient_dense(rng):
    B = crandn(rng, (20, 20))
    A = B.conj().T @ B + np.eye(20)
    b = crandn(rng, 20)
    x, res, it = conjugate_gradient(lambda v: A @ v, b, tol=1e-12, max_iter=100)
    assert rel_err(x, np.linalg.solve(A, b)) < 1e-10
    assert res <= 1e-12
    x0, res0, it0 = conjugate_gradient(lambda v: A @ v, np.zeros(20))
    assert not np.any(x0) and it0 == 0


def test_power_iteration(rng):
    d = np.linspace(0.1, 3.0, 30)
    lam = power_iteration(lambda v: d * v, (30,), iters=200)
    assert lam == pytest.approx(3.0, rel=1e-3)


def test_zero_filled_and_normalize(rng):
    y = crandn(rng, (3, 16, 16))
    np.testing.assert_allclose(zero_filled(y), rss(idft_centered(y)))
    ys, scale = normalize_kspace(y)
    assert zero_filled(ys).max() == pytest.approx(1.0)
    assert np.allclose(ys, y * scale)
    z, s = normalize_kspace(np.zeros((2, 4, 4)))
    assert s == 1.0 and not np.any(z)


def test_config_validation():
    with pytest.raises(ValueError):
        PicsConfig(iterations=0)
    with pytest.raises(ValueError):
        PicsConfig(alpha=-1)
    with pytest.raises(ValueError):
        NlinvConfig(gn_steps=3, reg_steps=4)
    with pytest.raises(ValueError):
        NlinvConfig(alpha_min=-1)


# ---------------------------------------------------------------- calibration


def test_calib_unit_coil():
    img = phantom(64, 64, "shepp-logan")
    m = make_mask_poisson(64, 64, 3, 16, 16, seed=0)
    y = forward(img, np.ones((1, 64, 64)), m)
    c = estimate_coils_calib(y, m)
    support = np.abs(img) > 0.1
    assert np.all(np.abs(np.abs(c[0][support]) - 1) <= 0.05)


def test_calib_rss_is_one():
    img = phantom(64, 64, "shepp-logan", "smooth-random", seed=1)
    coils = simulate_coils(64, 64, 6, 0.05, seed=0)
    m = make_mask_poisson(64, 64, 3, 16, 16, seed=0)
    c = estimate_coils_calib(forward(img, coils, m), m, floor=1e-3)
    r = rss(c)
    # unit RSS wherever the calibration image is above the floor, below one elsewhere
    assert np.all(r <= 1 + 1e-12)
    assert np.mean(np.abs(r - 1) < 1e-12) > 0.5


def test_calib_errors():
    m = make_mask_poisson(32, 32, 3, 0, 0, seed=0)
    with pytest.raises(ConfigurationError):
        estimate_coils_calib(np.ones((2, 32, 32)), m)
    m2 = make_mask_2d(32, 32, 2, 2)
    with pytest.raises(ConfigurationError):
        estimate_coils_calib(np.ones((2, 32, 32)), m2, calib=(8, 8))
    full = make_mask_2d(32, 32, 1, 1, 8, 8)
    with pytest.warns(UserWarning):
        c = estimate_coils_calib(np.zeros((2, 32, 32)), full)
    assert not np.any(c)


# ---------------------------------------------------------------- PICS


def test_pics_cg_matches_dense_solve(rng):
    coils = crandn(rng, (1, 8, 8))
    mask = rng.random((8, 8)) > 0.3
    y = crandn(rng, (1, 8, 8)) * mask
    A, _ = dense_operator(coils, mask)
    alpha = 0.05
    expect = np.linalg.solve(A.conj().T @ A + alpha * np.eye(64), A.conj().T @ y.ravel())
    assert rel_err(pics_cg(y, coils, mask, alpha, tol=1e-12).ravel(), expect) < 1e-8


def test_pics_cg_normal_equations(rng):
    coils = simulate_coils(32, 32, 4, seed=1)
    mask = make_mask_poisson(32, 32, 3, 6, 6, seed=2)
    y = forward(crandn(rng, (32, 32)), coils, mask)
    alpha = 0.01
    x = pics_cg(y, coils, mask, alpha)
    lhs = adjoint(forward(x, coils, mask), coils, mask) + alpha * x
    rhs = adjoint(y, coils, mask)
    assert np.linalg.norm(lhs - rhs) <= 1e-8 * np.linalg.norm(rhs)


def test_pics_cg_limits(rng):
    y = crandn(rng, (1, 8, 8))
    one = np.ones((1, 8, 8))
    full = np.ones((8, 8), bool)
    np.testing.assert_allclose(pics_cg(y, one, full, 0.0), idft_centered(y[0]), atol=1e-12)
    assert np.abs(pics_cg(y, one, full, 1e12)).max() < 1e-10
    with pytest.raises(ValueError):
        pics_cg(y, one, full, -1.0)
    with pytest.warns(UserWarning, match="residual"):
        pics_cg(forward(crandn(rng, (8, 8)), crandn(rng, (2, 8, 8)), rng.random((8, 8)) > 0.5),
                crandn(rng, (2, 8, 8)), rng.random((8, 8)) > 0.5, 1e-6, max_iter=2)


def test_pics_fista_gaussian_map_oracle(rng):
    n = 16
    coils = simulate_coils(n, n, 1, seed=0)
    mask = make_mask_poisson(n, n, 2, 4, 4, seed=1)
    params = GaussianPriorParams(0.3 * crandn(rng, (n, n)), 0.5 + 4 * rng.random((n, n)))
    img = phantom(n, n, "shepp-logan", "smooth-random", seed=2)
    y = forward(img, coils, mask, noise_sd=0.05, seed=3)
    alpha = 0.2
    A, F = dense_operator(coils, mask)
    Q = F.conj().T @ np.diag(params.precision.ravel()) @ F
    expect = np.linalg.solve(A.conj().T @ A + alpha * Q, A.conj().T @ y.ravel() + alpha * Q @ params.mean.ravel())
    x = pics_fista(y, coils, mask, GaussianPrior(params), alpha, iterations=2000)
    assert rel_err(x.ravel(), expect) < 1e-4


def test_pics_fista_unregularized_full_sampling(rng):
    coils = simulate_coils(16, 16, 3, seed=0)
    full = np.ones((16, 16), bool)
    y = forward(crandn(rng, (16, 16)), coils, full)
    x = pics_fista(y, coils, full, L2Prior(), 0.0, iterations=200)
    assert np.linalg.norm(forward(x, coils, full) - y) <= 1e-6 * np.linalg.norm(y)


def test_pics_fista_decreases_objective(rng):
    coils = simulate_coils(32, 32, 4, seed=0)
    mask = make_mask_poisson(32, 32, 4, 6, 6, seed=0)
    y = forward(phantom(32, 32, "shepp-logan"), coils, mask, 0.01, seed=1)
    for prior, alpha in ((L1WaveletPrior(3), 0.01), (L2Prior(), 0.1)):
        x = pics_fista(y, coils, mask, prior, alpha, iterations=50)
        zero = np.zeros((32, 32))
        assert pics_objective(x, y, coils, mask, prior, alpha) <= pics_objective(zero, y, coils, mask, prior, alpha)


def test_pics_fista_l1_sparse_recovery():
    # image that is sparse in the Haar basis: a handful of coefficients
    n = 64
    gen = np.random.default_rng(11)
    w = np.zeros((n, n), complex)
    w[:4, :4] = crandn(gen, (4, 4))
    idx = gen.choice(n * n, 60, replace=False)
    w.flat[idx] += crandn(gen, 60) * 0.5
    img = haar_inverse(w, 4)
    coils = simulate_coils(n, n, 8, 0.05, seed=0)
    mask = make_mask_poisson(n, n, 4, 8, 8, seed=0)
    y = forward(img, coils, mask)
    x = pics_fista(y, coils, mask, L1WaveletPrior(4), 1e-4, iterations=500)
    assert psnr(np.abs(img), np.abs(x)) >= 40


def test_pics_fista_schedule_binding(rng):
    class Recorder(Prior):
        schedule = type("S", (), {"n_scales": 5})()

        def __init__(self):
            self.levels = []

        def score(self, x, level=None):
            return np.zeros_like(x)

        def prox(self, z, t, level=None):
            self.levels.append(level)
            return z

    coils = np.ones((1, 8, 8))
    y = forward(crandn(rng, (8, 8)), coils, np.ones((8, 8)))
    p = Recorder()
    pics_fista(y, coils, np.ones((8, 8)), p, 1.0, iterations=8)
    assert p.levels == [1, 2, 3, 4, 5, 5, 5, 5]
    q = Recorder()
    pics_fista(y, coils, np.ones((8, 8)), q, 1.0, iterations=3, bind_schedule=False)
    assert q.levels == [None] * 3


def test_pics_fista_nonfinite(rng):
    class Bad(Prior):
        def prox(self, z, t, level=None):
            return z * np.nan

    with pytest.raises(NumericalError, match="iteration 0"):
        pics_fista(np.ones((1, 8, 8)), np.ones((1, 8, 8)), np.ones((8, 8)), Bad(), 1.0, iterations=3)


# ---------------------------------------------------------------- NLINV


@pytest.fixture(scope="module")
def nlinv_case():
    img = phantom(64, 64, "shepp-logan", "smooth-random", seed=1)
    coils = simulate_coils(64, 64, 8, 0.05, seed=2)
    full = make_mask_2d(64, 64, 1, 1)
    y = forward(img, coils, full)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = nlinv(y, full, NlinvConfig(gn_steps=10, reg_steps=0), return_trace=True)
    return img, out


def test_nlinv_full_sampling_psnr(nlinv_case):
    img, (x, c, trace) = nlinv_case
    assert psnr(np.abs(img), coil_combined(x, c)) >= 35


def test_nlinv_residual_nonincreasing(nlinv_case):
    _, (_, _, trace) = nlinv_case
    r = np.array(trace["residual"][-6:])
    assert np.all(np.diff(r) <= 0)
    assert trace["stage"] == [1] * 10


def test_nlinv_alpha_sequence(nlinv_case):
    _, (_, _, trace) = nlinv_case
    assert trace["alpha"][3] == 0.125
    assert trace["alpha"] == [max(1e-4, 0.5**k) for k in range(10)]
    assert trace["beta"] == [0.5**k for k in range(10)]
    y = np.ones((1, 8, 8))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, _, tr = nlinv(y, np.ones((8, 8)), NlinvConfig(gn_steps=6, reg_steps=0, alpha_min=0.1, cg_iters=2),
                         return_trace=True)
    assert tr["alpha"] == [1.0, 0.5, 0.25, 0.125, 0.1, 0.1]


def test_nlinv_gauge_invariant_output_scales_with_data():
    img = phantom(32, 32, "shepp-logan", "smooth-random", seed=1)
    coils = simulate_coils(32, 32, 4, 0.05, seed=2)
    full = make_mask_2d(32, 32, 1, 1)
    y = forward(img, coils, full)
    cfg = NlinvConfig(gn_steps=5, reg_steps=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = coil_combined(*nlinv(y, full, cfg))
        b = coil_combined(*nlinv(7 * y, full, cfg))
    np.testing.assert_allclose(b, 7 * a, rtol=1e-9, atol=1e-12)


def test_nlinv_two_stage_with_l2_equals_single_stage():
    img = phantom(16, 16, "shepp-logan", "smooth-random", seed=1)
    coils = simulate_coils(16, 16, 2, 0.1, seed=2)
    mask = make_mask_2d(16, 16, 1, 1)
    y = forward(img, coils, mask)
    common = dict(gn_steps=4, cg_iters=500, fista_iters=20000, inner_tol=1e-13)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        x1, c1 = nlinv(y, mask, NlinvConfig(reg_steps=0, **common))
        x2, c2 = nlinv(y, mask, NlinvConfig(reg_steps=4, **common))
    assert rel_err(x2, x1) < 1e-6
    assert rel_err(c2, c1) < 1e-6


def test_nlinv_errors(rng):
    with pytest.raises(ValueError):
        nlinv(np.ones((2, 8, 8)), np.ones((4, 4)))

    class Bad(Prior):
        def prox(self, z, t, level=None):
            return z * np.nan

    with pytest.raises(NumericalError, match="Gauss-Newton step 0"):
        nlinv(crandn(rng, (2, 8, 8)), np.ones((8, 8)), NlinvConfig(gn_steps=1, reg_steps=1), prior=Bad())
