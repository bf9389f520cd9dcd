"""Stochastic model of batch-normalization noise.

For i.i.d. Gaussian activations with population statistics ``(mu, sigma)``
and a normalization batch of ``n = k*z`` values, train-mode batch norm
``(x - M) / S`` has the same law as ``((x - mu)/sigma + V) * U`` with

    V = (mu - M) / sigma ~ N(0, 1) / sqrt(n)
    U = sigma / S        ~ sqrt(n) / sqrt(chi2_{n-1})

independent of the network parameters. This module samples those noises,
injects them into deterministic normalizations and measures them in real
networks.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy import special, stats

from . import tensor as T
from .normalization import EPS, batch_moments
from .tensor import Tensor

if TYPE_CHECKING:
    from .model import Network

# Average std of the multiplicative BN noise per layer of a trained 9-layer
# All-CNN with batch size 32.
MEASURED_SIGMA_U = (0.05, 0.03, 0.026, 0.023, 0.02, 0.026, 0.041, 0.045, 0.071)

# chi2 draws switch from summed squared normals to gamma sampling above this df.
_CHI2_EXACT_MAX_DF = 64


class NoiseMode(str, Enum):
    NONE = "none"
    GAUSSIAN = "fixed-gaussian"
    EXACT_CHI = "exact-chi"


@dataclass
class NoiseSample:
    V: np.ndarray
    U: np.ndarray
    n: int


@dataclass
class NoiseConfig:
    """How noise is injected after a deterministic normalization.

    In gaussian mode ``U ~ N(1, sigma_u^2)`` is not truncated, so large
    ``sigma_u`` can give ``U <= 0``; exact-chi mode always gives ``U > 0``.
    """

    mode: NoiseMode = NoiseMode.NONE
    sigma_v: Sequence[float] = ()
    sigma_u: Sequence[float] = ()
    spatial_correlated: bool = True

    def __post_init__(self):
        self.mode = NoiseMode(self.mode)
        if any(v < 0 for v in self.sigma_v) or any(u < 0 for u in self.sigma_u):
            raise ValueError("noise standard deviations must be non-negative")

    @classmethod
    def measured_default(cls, n_layers: int) -> NoiseConfig:
        """Gaussian noise following the measured BN profile.

        The 9-layer profile is resampled over relative depth for other depths.
        ``sigma_v`` uses ``sqrt(2) * sigma_u``, the large-``n`` ratio of the
        exact model (``Var V = 1/n``, ``Var U ~ 1/(2n)``).
        """
        sigma_u = resample_profile(MEASURED_SIGMA_U, n_layers)
        return cls(NoiseMode.GAUSSIAN, [float(np.sqrt(2) * u) for u in sigma_u], sigma_u)


def resample_profile(profile: Sequence[float], n_layers: int) -> list[float]:
    if n_layers == len(profile):
        return list(profile)
    src = np.linspace(0.0, 1.0, len(profile))
    dst = np.linspace(0.0, 1.0, n_layers)
    return [float(v) for v in np.interp(dst, src, profile)]


# ------------------------------------------------------------------ samplers
def sample_chi2(df: int, size, rng: np.random.Generator) -> np.ndarray:
    """chi2 draws: exact sum of squares for ``df <= 64``, Marsaglia-Tsang gamma above."""
    if df < 1:
        raise ValueError("chi2 needs df >= 1")
    if df <= _CHI2_EXACT_MAX_DF:
        z = rng.standard_normal(tuple(np.atleast_1d(size)) + (df,))
        return np.square(z).sum(axis=-1).reshape(size)
    # numpy's standard_gamma is Marsaglia-Tsang for shape >= 1
    return 2.0 * rng.standard_gamma(df / 2.0, size=size)


def sample_bn_noise(n: int, rng: np.random.Generator, size=()) -> NoiseSample:
    """Draw ``(V, U)`` of the BN model for an ``n``-value normalization batch."""
    if n < 2:
        raise ValueError("BN noise model needs n >= 2")
    V = rng.standard_normal(size) / np.sqrt(n)
    U = np.sqrt(n) / np.sqrt(sample_chi2(n - 1, size, rng))
    return NoiseSample(np.asarray(V), np.asarray(U), n)


def draw_noise(
    config: NoiseConfig,
    layer_index: int,
    shape: tuple[int, ...],
    n: int,
    rng: np.random.Generator,
) -> NoiseSample | None:
    """One noise draw for activations of ``shape = (k, c, h, w)``.

    With spatial correlation a single ``(V, U)`` per sample and channel is
    broadcast over positions. ``n`` is the effective normalization batch for
    exact-chi mode.
    """
    if config.mode == NoiseMode.NONE:
        return None
    size = shape[:2] if config.spatial_correlated else shape
    if config.mode == NoiseMode.EXACT_CHI:
        return sample_bn_noise(n, rng, size)
    sv = config.sigma_v[layer_index] if config.sigma_v else 0.0
    su = config.sigma_u[layer_index] if config.sigma_u else 0.0
    V = sv * rng.standard_normal(size)
    U = 1.0 + su * rng.standard_normal(size)
    return NoiseSample(V, U, n)


def _spatial_view(a: np.ndarray, ndim: int) -> np.ndarray:
    return a.reshape(a.shape + (1,) * (ndim - a.ndim))


def noisy_normalize(x_norm: Tensor, noise: NoiseSample | None) -> Tensor:
    """``(x_norm + V) * U``; noise arrays of shape ``(k, c)`` broadcast over space."""
    if noise is None:
        return x_norm
    x_norm = T.as_tensor(x_norm)
    V = _spatial_view(np.asarray(noise.V, dtype=x_norm.dtype), x_norm.ndim)
    U = _spatial_view(np.asarray(noise.U, dtype=x_norm.dtype), x_norm.ndim)
    return (x_norm + Tensor(V)) * Tensor(U)


# --------------------------------------------------------------- measurement
@dataclass
class EmpiricalNoiseStats:
    """Per-layer variances of ``V = (mu - M)/sigma``, ``U = sigma/S`` and of the BN output."""

    k: int
    z: list[int]
    var_v: list[float]
    var_u: list[float]
    var_out: list[float]
    n_draws: int
    counts: list[int] = field(default_factory=list)

    @property
    def sigma_v(self) -> list[float]:
        return [float(np.sqrt(v)) for v in self.var_v]

    @property
    def sigma_u(self) -> list[float]:
        return [float(np.sqrt(v)) for v in self.var_u]

    def rows(self) -> list[dict]:
        return [
            {
                "layer_index": i,
                "k": self.k,
                "z": self.z[i],
                "var_V": self.var_v[i],
                "var_U": self.var_u[i],
                "var_out": self.var_out[i],
                "n_draws": self.n_draws,
            }
            for i in range(len(self.z))
        ]


NOISE_CSV_FIELDS = ("layer_index", "k", "z", "var_V", "var_U", "var_out", "n_draws")


def noise_stats_csv(stats_list: Sequence[EmpiricalNoiseStats]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=NOISE_CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for st in stats_list:
        for row in st.rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _population_stats(network: Network | None, data: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    if network is None:
        mean, var = batch_moments(Tensor(data))
        return [(mean.data, np.sqrt(var.data))]
    record: list = []
    with T.no_grad():
        network.forward(data, train=True, update_running=False, record=record)
    return [(y_mean, y_std) for y_mean, y_std, _ in record]


def measure_bn_noise(
    network: Network | None,
    data: np.ndarray,
    k: int,
    draws: int,
    rng: np.random.Generator,
) -> EmpiricalNoiseStats:
    """Measure BN noise by pushing random batches through a batch-norm network.

    Population statistics come from one train-mode pass over all of ``data``.
    Each draw takes a uniformly random batch of ``k`` samples. ``var_out`` is
    the mean squared gap between each example's train-mode output and its
    output under population statistics, pooled over the batch.
    ``network=None`` measures the input layer itself.
    """
    if draws < 100:
        raise ValueError("need at least 100 draws for a reported variance")
    if k < 2:
        raise ValueError("batch size must be at least 2")
    population = _population_stats(network, data)
    L = len(population)
    vs: list[list[np.ndarray]] = [[] for _ in range(L)]
    us: list[list[np.ndarray]] = [[] for _ in range(L)]
    gaps = [0.0] * L
    zs = [0] * L

    for _ in range(draws):
        batch = data[rng.choice(len(data), size=k, replace=False)]
        if network is None:
            mean, var = batch_moments(Tensor(batch))
            layers = [(batch, mean.data, np.sqrt(var.data + EPS**2))]
        else:
            record: list = []
            with T.no_grad():
                network.forward(batch, train=True, update_running=False, record=record, keep_preactivations=True)
            layers = [(y, m, sd) for m, sd, y in record]
        for i, (y, m, sd) in enumerate(layers):
            mu, sigma = population[i]
            zs[i] = int(np.prod(y.shape[2:]))
            vs[i].append((mu - m) / sigma)
            us[i].append(sigma / sd)
            view = (1, -1) + (1,) * (y.ndim - 2)
            gap = (y - m.reshape(view)) / sd.reshape(view) - (y - mu.reshape(view)) / sigma.reshape(view)
            gaps[i] += float(np.mean(gap**2)) / draws
    var_v = [float(np.mean(np.var(np.stack(v), axis=0))) for v in vs]
    var_u = [float(np.mean(np.var(np.stack(u), axis=0))) for u in us]
    return EmpiricalNoiseStats(k, zs, var_v, var_u, gaps, draws, [draws] * L)


# ------------------------------------------------------------ verification
def chi2_cdf(x, df: int) -> np.ndarray:
    """chi2 CDF as the regularized lower incomplete gamma ``P(df/2, x/2)``."""
    return special.gammainc(df / 2.0, np.maximum(np.asarray(x, dtype=np.float64), 0.0) / 2.0)


def ks_test_chi2(samples: np.ndarray, n: int) -> tuple[float, float]:
    """Kolmogorov-Smirnov test of ``n * S^2 / sigma^2`` samples against chi2_{n-1}.

    Returns ``(statistic, p_value)``.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size < 1000:
        raise ValueError("KS test needs at least 1000 samples")
    result = stats.kstest(samples, lambda x: chi2_cdf(x, n - 1))
    return float(result.statistic), float(result.pvalue)


def variance_scaling_fit(sizes: Sequence[float], variances: Sequence[float]) -> float:
    """Least-squares slope of ``log(variance)`` against ``log(size)``."""
    sizes = np.asarray(sizes, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if sizes.size < 3 or sizes.size != variances.size:
        raise ValueError("need at least 3 (size, variance) pairs")
    if np.any(sizes <= 0) or np.any(variances <= 0):
        raise ValueError("sizes and variances must be positive")
    slope, _ = np.polyfit(np.log(sizes), np.log(variances), 1)
    return float(slope)
