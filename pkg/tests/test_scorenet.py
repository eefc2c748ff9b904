import numpy as np
import pytest

from mrprior.acquisition import phantom
from mrprior.errors import TrainingError
from mrprior.priors import schedule
from mrprior.scorenet import ScoreNet, TrainConfig, augment_batch, dsm_loss, load_checkpoint, save_checkpoint, train

from conftest import crandn


def fd_check(net, x, sched, levels, h=1e-6):
    _, g = dsm_loss(net, x, sched, seed=3, levels=levels)
    worst = 0.0
    for k, p in net.params.items():
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            lp, _ = dsm_loss(net, x, sched, seed=3, levels=levels, with_grad=False)
            p[i] = old - h
            lm, _ = dsm_loss(net, x, sched, seed=3, levels=levels, with_grad=False)
            p[i] = old
            fd[i] = (lp - lm) / (2 * h)
        worst = max(worst, np.linalg.norm(fd - g[k]) / np.linalg.norm(fd))
    return worst


@pytest.mark.parametrize("mode", ["smld", "ddpm"])
def test_gradient_matches_finite_differences(mode):
    sched = schedule(10)
    net = ScoreNet(3, 8, 11, mode, sched.sigmas, seed=1, dtype=np.float64)
    rng = np.random.default_rng(0)
    for k in net.params:
        net.params[k] = net.params[k] + 0.1 * rng.standard_normal(net.params[k].shape)
    x = np.random.default_rng(1).standard_normal((2, 8, 8)) * 0.3 + 0j
    assert fd_check(net, x, sched, np.array([2, 7])) <= 1e-4


def test_zero_network_loss_is_twice_grid_size():
    sched = schedule(10)
    net = ScoreNet(3, 8, 11, "smld", sched.sigmas, dtype=np.float64)
    net.params["w2"][:] = 0
    net.params["b2"][:] = 0
    losses = [dsm_loss(net, np.zeros((64, 8, 8)), sched, seed=s, with_grad=False)[0] for s in range(20)]
    # each batch mean is a chi-square with 128 dof averaged over 64 samples: sd 2
    assert np.mean(losses) == pytest.approx(128.0, abs=4 * 2 / np.sqrt(20))


def test_loss_rejects_unnormalized_batch():
    sched = schedule(10)
    net = ScoreNet(2, 4, 11, sigmas=sched.sigmas)
    with pytest.raises(ValueError):
        dsm_loss(net, 2 * np.ones((1, 8, 8)), sched)
    with pytest.raises(ValueError):
        dsm_loss(net, np.zeros((0, 8, 8)), sched)


def test_forward_shape_and_determinism(rng):
    sched = schedule(10)
    net = ScoreNet(4, 8, 11, sigmas=sched.sigmas)
    x = 0.2 * crandn(rng, (3, 12, 8))
    a = net.score(x, 4)
    assert a.shape == x.shape
    np.testing.assert_array_equal(a, net.score(x, 4))
    assert net.score(x[0], 4).shape == (12, 8)


def test_overfit_single_phantom():
    sched = schedule(10)
    img = phantom(8, 8, "shepp-logan")
    data = np.repeat(img[None], 8, axis=0)
    cfg = TrainConfig(epochs=200, batch=8, learn_rate=3e-3, schedule=sched, layers=3, width=16, augment=False)
    _, hist = train(data, cfg)
    assert len(hist) == 200
    smooth = np.convolve(hist, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < 0.8 * smooth[0]
    # trend: every later quarter averages below the first
    q = np.array_split(hist, 4)
    assert all(np.mean(part) < np.mean(q[0]) for part in q[1:])


def test_train_is_deterministic_and_callback_stops():
    sched = schedule(5)
    data = np.stack([phantom(8, 8, "random-ellipses", "smooth-random", seed=s) for s in range(6)])
    cfg = TrainConfig(epochs=3, batch=4, schedule=sched, layers=2, width=4)
    n1, h1 = train(data, cfg)
    n2, h2 = train(data, cfg)
    np.testing.assert_array_equal(h1, h2)
    for k in n1.params:
        np.testing.assert_array_equal(n1.params[k], n2.params[k])
    seen = []
    _, h3 = train(data, cfg, callback=lambda e, h: seen.append(e) or True)
    assert seen == [0] and len(h3) == 2


def test_divergence_reports_step():
    sched = schedule(5)
    data = np.zeros((4, 8, 8), complex)
    data[1, 2, 2] = np.nan
    with pytest.raises(TrainingError, match="step 0"):
        train(data, TrainConfig(epochs=1, batch=4, schedule=sched, layers=2, width=4, augment=False))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(learn_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(mode="vae")


def test_augment_batch_transforms(rng):
    b = crandn(rng, (50, 6, 6))
    out = augment_batch(b, np.random.default_rng(2))
    for src, dst in zip(b, out):
        cands = [np.rot90(src, k) for k in range(4)] + [np.rot90(src, k)[:, ::-1] for k in range(4)]
        assert any(np.array_equal(dst, c) for c in cands)
    nonsq = augment_batch(crandn(rng, (10, 4, 6)), np.random.default_rng(3))
    assert nonsq.shape == (10, 4, 6)


def test_augmentation_preserves_loss_distribution():
    # isotropic white data: every rotation and flip leaves the distribution unchanged
    sched = schedule(10)
    net = ScoreNet(3, 8, 11, sigmas=sched.sigmas, seed=4)
    gen = np.random.default_rng(5)
    plain, aug = [], []
    for s in range(200):
        b = 0.2 * crandn(gen, (4, 8, 8))
        plain.append(dsm_loss(net, b, sched, seed=2 * s, with_grad=False)[0])
        ab = augment_batch(b, np.random.default_rng(s))
        aug.append(dsm_loss(net, ab, sched, seed=2 * s + 1, with_grad=False)[0])
    se = np.sqrt(np.var(plain) / len(plain) + np.var(aug) / len(aug))
    assert abs(np.mean(plain) - np.mean(aug)) < 3 * se


def test_checkpoint_roundtrip(tmp_path, rng):
    sched = schedule(10)
    data = np.stack([phantom(8, 8, "random-ellipses", "smooth-random", seed=s) for s in range(4)])
    net, _ = train(data, TrainConfig(epochs=1, batch=4, schedule=sched, layers=3, width=6))
    save_checkpoint(net, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert (tmp_path / "ck" / "manifest.txt").exists()
    x = 0.3 * crandn(rng, (2, 8, 8))
    for lev in (1, 6, 10):
        np.testing.assert_array_equal(back.score(x, lev), net.score(x, lev))
    np.testing.assert_array_equal(back.schedule().sigmas, net.schedule().sigmas)
    assert back.mode == net.mode and back.trained
