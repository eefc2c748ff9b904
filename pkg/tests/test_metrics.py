import numpy as np
import pytest
from hypothesis import given, strategies as st
from skimage.metrics import structural_similarity

from mrprior.acquisition import phantom
from mrprior.metrics import MetricsReport, compare, psnr, ssim


def test_psnr_constant_offset():
    ref = np.abs(phantom(32, 32, "shepp-logan"))
    assert ref.max() == 1.0
    assert psnr(ref, ref + 0.1) == pytest.approx(20.0, abs=1e-10)


def test_psnr_identical_is_infinite():
    ref = np.random.default_rng(0).random((16, 16))
    assert psnr(ref, ref) == float("inf")


def test_psnr_direct_formula():
    gen = np.random.default_rng(1)
    for _ in range(10):
        a, b = gen.random((20, 24)) * 3, gen.random((20, 24)) * 3
        mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert psnr(a, b) == pytest.approx(10 * np.log10(a.max() ** 2 / mse), abs=1e-10)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.ones((4, 4)))
    with pytest.raises(ValueError):
        psnr(np.ones((4, 4)), np.ones((4, 5)))


@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_psnr_shift_detecting(c1, c2):
    ref = np.abs(phantom(16, 16, "shepp-logan"))
    lo, hi = sorted((c1, c2))
    assert np.isfinite(psnr(ref, ref + lo))
    if hi > lo * (1 + 1e-9):
        assert psnr(ref, ref + hi) < psnr(ref, ref + lo)


def test_ssim_matches_reference_implementation():
    gen = np.random.default_rng(2)
    ref = np.abs(phantom(64, 64, "shepp-logan"))
    for sd in (0.01, 0.1, 0.3):
        test = ref + sd * gen.standard_normal(ref.shape)
        expect = structural_similarity(ref, test, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                       data_range=ref.max())
        assert ssim(ref, test) == pytest.approx(expect, abs=1e-12)


def test_ssim_identity_and_negation():
    ref = np.abs(phantom(32, 32, "shepp-logan"))
    assert ssim(ref, ref) == pytest.approx(1.0, abs=1e-15)
    # negation drives SSIM below zero only where local means are small next to
    # K1 * L; otherwise the luminance and structure terms are both near -1 and
    # their product is positive. A checkerboard has near-zero local means.
    tex = np.where(np.indices((32, 32)).sum(0) % 2 == 0, 1.0, -1.0)
    assert ssim(tex, -tex) < 0
    expect = structural_similarity(tex, -tex, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                   data_range=tex.max())
    assert ssim(tex, -tex) == pytest.approx(expect, abs=1e-12)


def test_ssim_monotone_in_noise():
    gen = np.random.default_rng(3)
    ref = np.full((48, 48), 0.7)
    vals = [np.mean([ssim(ref, ref + sd * gen.standard_normal(ref.shape)) for _ in range(5)])
            for sd in (0.01, 0.05, 0.2)]
    assert all(0 < v < 1 for v in vals)
    assert vals[0] > vals[1] > vals[2]


def test_ssim_range_from_reference():
    gen = np.random.default_rng(4)
    a = gen.random((32, 32))
    b = 2 * a + 0.1 * gen.standard_normal(a.shape)
    # the dynamic range comes from the first argument, so swapping changes the value
    assert ssim(a, b) != pytest.approx(ssim(b, a), abs=1e-6)
    with pytest.raises(ValueError):
        ssim(np.ones((8, 8)), np.ones((8, 8)))
    with pytest.raises(ValueError):
        ssim(np.ones((16, 16)), np.ones((16, 17)))


@given(st.floats(-np.pi, np.pi))
def test_complex_inputs_reduced_by_modulus(phi):
    gen = np.random.default_rng(5)
    x = gen.standard_normal((24, 24)) + 1j * gen.standard_normal((24, 24))
    y = x + 0.1 * gen.standard_normal((24, 24))
    rot = np.exp(1j * phi)
    assert psnr(x, y * rot) == pytest.approx(psnr(x, y), rel=1e-12)
    assert ssim(x * rot, y) == pytest.approx(ssim(np.abs(x), np.abs(y)), rel=1e-12)


def test_compare_report():
    ref = np.abs(phantom(32, 32, "shepp-logan"))
    r = compare(ref, ref + 0.1, "gt", "recon")
    assert isinstance(r, MetricsReport)
    assert r.psnr_db == pytest.approx(20.0) and r.ssim <= 1
    assert (r.ref_id, r.test_id, r.region) == ("gt", "recon", "full-grid")
