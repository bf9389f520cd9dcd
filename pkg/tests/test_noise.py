import math

import numpy as np
import pytest

from stochnorm import tensor as T
from stochnorm.data import correlated_images
from stochnorm.noise import (
    MEASURED_SIGMA_U,
    NoiseConfig,
    NoiseMode,
    NoiseSample,
    chi2_cdf,
    draw_noise,
    ks_test_chi2,
    measure_bn_noise,
    noise_stats_csv,
    noisy_normalize,
    sample_bn_noise,
    sample_chi2,
    variance_scaling_fit,
)
from stochnorm.normalization import NormStats, normalize, weight_norm_stats
from stochnorm.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(99)


# ------------------------------------------------------- independent oracles
def _gammainc_series_cf(a: float, x: float) -> float:
    """Regularized lower incomplete gamma by series (x < a + 1) or Lentz continued fraction."""
    if x <= 0:
        return 0.0
    gln = math.lgamma(a)
    if x < a + 1:
        term = total = 1.0 / a
        ap = a
        for _ in range(10_000):
            ap += 1
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return total * math.exp(-x + a * math.log(x) - gln)
    tiny = 1e-300
    b = x + 1 - a
    c = 1 / tiny
    d = 1 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1 / d
        delta = d * c
        h *= delta
        if abs(delta - 1) < 1e-16:
            break
    return 1.0 - math.exp(-x + a * math.log(x) - gln) * h


@pytest.mark.parametrize("df", [1, 3, 7, 15, 127, 511])
def test_chi2_cdf_matches_series_continued_fraction(df):
    for x in np.linspace(0.05, 3 * df + 10, 40):
        assert chi2_cdf(x, df) == pytest.approx(_gammainc_series_cf(df / 2, x / 2), abs=1e-12)


# ------------------------------------------------------------------ samplers
@pytest.mark.parametrize("df", [3, 64, 65, 500])
def test_sample_chi2_moments(rng, df):
    draws = sample_chi2(df, 100_000, rng)
    assert draws.mean() == pytest.approx(df, rel=4 * math.sqrt(2 / df) / math.sqrt(1e5) + 1e-3)
    assert draws.var() == pytest.approx(2 * df, rel=0.03)


def test_sample_bn_noise_large_n(rng):
    ns = sample_bn_noise(1_000_000, rng, size=1000)
    ok = (np.abs(ns.V) < 0.01) & (np.abs(ns.U - 1) < 0.01)
    assert ok.mean() > 0.99


def test_sample_bn_noise_var_v(rng):
    ns = sample_bn_noise(128, rng, size=100_000)
    assert ns.V.var() == pytest.approx(1 / 128, rel=0.05)


def test_sample_bn_noise_var_u_against_brute_force(rng):
    n = 128
    ns = sample_bn_noise(n, rng, size=100_000)
    brute = np.sqrt(n) / np.sqrt(np.square(rng.standard_normal((100_000, n - 1))).sum(axis=1))
    assert ns.U.var() == pytest.approx(brute.var(), rel=0.05)
    assert np.all(ns.U > 0)


@pytest.mark.parametrize("n", [4, 32, 512])
def test_v_moments_within_three_standard_errors(rng, n):
    N = 100_000
    V = sample_bn_noise(n, rng, size=N).V
    var = 1 / n
    assert abs(V.mean()) < 3 * math.sqrt(var / N)
    assert abs(V.var() - var) < 3 * var * math.sqrt(2 / (N - 1))


def test_sample_bn_noise_rejects_small_n(rng):
    with pytest.raises(ValueError):
        sample_bn_noise(1, rng)


# ----------------------------------------------------------- noisy normalize
def test_noisy_normalize_identity(rng):
    x = Tensor(rng.standard_normal((4, 3, 2, 2)))
    ident = NoiseSample(np.zeros((4, 3)), np.ones((4, 3)), 10)
    np.testing.assert_array_equal(noisy_normalize(x, ident).data, x.data)
    cfg = NoiseConfig(NoiseMode.GAUSSIAN, [0.0] * 2, [0.0] * 2)
    draw = draw_noise(cfg, 1, x.shape, 10, rng)
    np.testing.assert_array_equal(noisy_normalize(x, draw).data, x.data)


def test_noisy_normalize_spatially_correlated(rng):
    x = Tensor(np.zeros((2, 3, 4, 4)))
    cfg = NoiseConfig(NoiseMode.EXACT_CHI)
    out = noisy_normalize(x, draw_noise(cfg, 0, x.shape, 64, rng)).data
    assert np.all(out == out[:, :, :1, :1])
    cfg.spatial_correlated = False
    out = noisy_normalize(x, draw_noise(cfg, 0, x.shape, 64, rng)).data
    assert np.unique(out[0, 0]).size > 1


def test_noisy_normalize_differentiable(rng):
    ns = NoiseSample(rng.standard_normal((2, 3)), rng.random((2, 3)) + 0.5, 8)
    x = rng.standard_normal((2, 3, 2, 2))
    assert T.gradcheck(lambda a: (noisy_normalize(a, ns) ** 2).sum(), [x]) < 1e-6


def _real_bn_outputs(x_value, k, z, draws, rng):
    batch = rng.standard_normal((draws, k * z))
    M = batch.mean(axis=1)
    S = batch.std(axis=1)
    return (x_value - M) / S


def test_exact_chi_matches_real_bn_for_fixed_input(rng):
    k, z, draws = 8, 4, 10_000
    for x_value in (0.0, 1.0, -2.0):
        real = _real_bn_outputs(x_value, k, z, draws, rng)
        ns = sample_bn_noise(k * z, rng, size=draws)
        model = (x_value + ns.V) * ns.U
        assert model.var() == pytest.approx(real.var(), rel=0.10)
        assert model.mean() == pytest.approx(real.mean(), abs=0.02 + 0.02 * abs(x_value))


def test_exact_chi_output_variance_matches_real_bn(rng):
    k, z = 16, 4
    x = rng.standard_normal((10_000, k, 1, z))
    real = (x - x.mean(axis=(1, 2, 3), keepdims=True)) / x.std(axis=(1, 2, 3), keepdims=True)
    ns = sample_bn_noise(k * z, rng, size=(10_000, k))
    model = noisy_normalize(Tensor(x.reshape(10_000 * k, 1, 1, z)), NoiseSample(ns.V.reshape(-1, 1), ns.U.reshape(-1, 1), k * z)).data
    assert model.var() == pytest.approx(real.var(), rel=0.10)


def test_measured_default_profile():
    cfg = NoiseConfig.measured_default(9)
    assert tuple(cfg.sigma_u) == MEASURED_SIGMA_U
    assert cfg.mode == NoiseMode.GAUSSIAN
    assert len(NoiseConfig.measured_default(4).sigma_u) == 4


def test_noise_config_rejects_negative():
    with pytest.raises(ValueError):
        NoiseConfig(NoiseMode.GAUSSIAN, [-0.1], [0.1])


# --------------------------------------------------------------- measurement
def test_measure_input_layer_matches_closed_form(rng):
    data = rng.standard_normal((4096, 2, 4, 4))
    k = 16
    st = measure_bn_noise(None, data, k, 2000, rng)
    n = k * 16
    assert st.z == [16]
    assert st.var_v[0] == pytest.approx(1 / n, rel=0.10)
    # sigma/S ~ sqrt(n) chi^-1_{n-1}: Var ~ n/(n-3) - E[U]^2, about 1/(2n)
    assert st.var_u[0] == pytest.approx(1 / (2 * n), rel=0.15)
    # output gap ~ -V - x * (S - sigma)/sigma: 1/n from the mean plus 1/(2n) from the scale
    assert st.var_out[0] == pytest.approx(1.5 / n, rel=0.10)


def test_measure_rejects_few_draws(rng):
    with pytest.raises(ValueError):
        measure_bn_noise(None, rng.standard_normal((100, 1, 2, 2)), 8, 50, rng)


def test_noise_csv_schema(rng):
    st = measure_bn_noise(None, rng.standard_normal((256, 1, 2, 2)), 8, 100, rng)
    lines = noise_stats_csv([st]).splitlines()
    assert lines[0] == "layer_index,k,z,var_V,var_U,var_out,n_draws"
    assert lines[1].startswith("0,8,4,")


# ------------------------------------------------------------------ KS test
def test_ks_null_case(rng):
    n = 10
    passes = sum(ks_test_chi2(sample_chi2(n - 1, 1000, rng), n)[1] > 0.01 for _ in range(100))
    assert passes >= 98


def test_ks_power(rng):
    n = 8
    _, p = ks_test_chi2(sample_chi2(n + 5, 10_000, rng), n)
    assert p < 0.01


def test_ks_constant_samples():
    _, p = ks_test_chi2(np.full(2000, 3.0), 8)
    assert p < 1e-10


def test_ks_too_few_samples(rng):
    with pytest.raises(ValueError):
        ks_test_chi2(np.ones(10), 5)


def test_real_batch_variance_is_chi2(rng):
    k, z = 8, 2
    n = k * z
    x = rng.standard_normal((5000, k * z))
    s2 = x.var(axis=1)
    _, p = ks_test_chi2(n * s2, n)
    assert p > 0.01


# ------------------------------------------------------------ slope fitting
def test_slope_exact_inverse():
    ks = [8, 16, 32, 64, 128]
    assert variance_scaling_fit(ks, [3.0 / k for k in ks]) == pytest.approx(-1.0)


def test_slope_rejects_bad_input():
    with pytest.raises(ValueError):
        variance_scaling_fit([1, 2, 3], [1.0, 0.0, 2.0])
    with pytest.raises(ValueError):
        variance_scaling_fit([1, 2], [1.0, 2.0])


def test_slope_iid_batch_sizes(rng):
    data = rng.standard_normal((4096, 1, 2, 2))
    ks = [8, 16, 32, 64, 128]
    var = [measure_bn_noise(None, data, k, 400, rng).var_v[0] for k in ks]
    assert -1.1 <= variance_scaling_fit(ks, var) <= -0.9


def test_slope_correlated_spatial_flatter(rng):
    sizes = [2, 4, 8]
    k = 16
    scaled = []
    for s in sizes:
        data = correlated_images(2048, s, rng, correlation=0.5)
        scaled.append(k * measure_bn_noise(None, data, k, 400, rng).var_v[0])
    zs = [s * s for s in sizes]
    assert variance_scaling_fit(zs, scaled) > -1.0 + 0.3


# ------------------------------------------------- signal-to-noise fixedness
def test_snr_fixed_under_normalization(rng):
    x = Tensor(rng.standard_normal((6, 3, 4, 4)))
    w = rng.standard_normal((2, 3, 3, 3))
    noise = NoiseSample(rng.standard_normal((6, 2)) * 0.2, 1 + rng.standard_normal((6, 2)) * 0.1, 32)

    def out(weights):
        wt = Tensor(weights)
        y = T.conv2d(x, wt, 1, 1)
        return noisy_normalize(normalize(y, weight_norm_stats(wt)), noise).data

    base = out(w)
    for gamma in (0.5, 3.0):
        np.testing.assert_allclose(out(gamma * w), base, rtol=1e-6, atol=1e-9)
        assert np.array_equal(np.argmax(out(gamma * w), axis=1), np.argmax(base, axis=1))


def test_snr_changes_with_fixed_additive_noise(rng):
    x = Tensor(rng.standard_normal((6, 3, 4, 4)))
    w = rng.standard_normal((2, 3, 3, 3))
    eps = rng.standard_normal((6, 2, 4, 4)) * 0.2

    def out(gamma):
        y = T.conv2d(x, Tensor(gamma * w), 1, 1).data + eps
        return y / gamma  # downstream compensation

    assert np.max(np.abs(out(3.0) - out(1.0))) > 1e-2
