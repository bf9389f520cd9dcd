"""Batch, weight and analytic normalization under one form.

Every method normalizes a pre-activation ``y = w^T x`` as ``(y - mu_hat) / sigma_hat``
followed by a per-channel affine ``* s + b``. The methods differ only in where
``(mu_hat, sigma_hat)`` come from:

* batch norm: sample mean/std of the current batch over batch and spatial dims
  (train mode) or running averages (eval mode);
* weight norm: ``(0, ||w||)`` per output channel;
* analytic norm: dataset moments pushed through the preceding layers.

All three are invariant to ``w -> gamma * w`` for ``gamma > 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .tensor import Tensor

if TYPE_CHECKING:
    from .model import Network

EPS = 1e-5
MOMENTUM = 0.1


class NormKind(str, Enum):
    NONE = "none"
    BATCH = "batch"
    WEIGHT = "weight"
    ANALYTIC = "analytic"


class DegenerateStatisticsError(ValueError):
    pass


@dataclass
class NormStats:
    """Per-channel mean and standard deviation (arrays or tensors of shape ``[C]``)."""

    mu: Tensor
    sigma: Tensor

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return T.as_tensor(self.mu).data, T.as_tensor(self.sigma).data


@dataclass
class DatasetMoments:
    """Per-input-channel mean and variance of a training set."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def from_data(cls, x: np.ndarray) -> DatasetMoments:
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        return cls(x.mean(axis=axes), x.var(axis=axes))


def _channel_view(v: Tensor, ndim: int) -> Tensor:
    return T.reshape(T.as_tensor(v), (1, -1) + (1,) * (ndim - 2))


# ---------------------------------------------------------------- batch norm
def batch_moments(y: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel sample mean ``M`` and 1/n variance ``S^2`` over batch and spatial dims."""
    y = T.as_tensor(y)
    axes = (0,) + tuple(range(2, y.ndim))
    n = int(np.prod([y.shape[a] for a in axes]))
    if n < 2:
        raise DegenerateStatisticsError(f"batch statistics need at least 2 values per channel, got {n}")
    return T.reduce_mean(y, axes), T.reduce_var(y, axes)


def batch_stats(y: Tensor) -> NormStats:
    mean, var = batch_moments(y)
    return NormStats(mean, T.sqrt(var))


def update_running(running: NormStats | None, batch: NormStats, momentum: float = MOMENTUM) -> NormStats:
    """Exponential moving average of mean and variance; ``None`` starts from the batch."""
    if not 0 < momentum <= 1:
        raise ValueError("momentum must lie in (0, 1]")
    bm, bs = batch.numpy()
    if running is None:
        return NormStats(Tensor(bm.copy()), Tensor(bs.copy()))
    rm, rs = running.numpy()
    mean = (1 - momentum) * rm + momentum * bm
    var = (1 - momentum) * rs**2 + momentum * bs**2
    return NormStats(Tensor(mean), Tensor(np.sqrt(var)))


def bn_forward(
    y: Tensor,
    train: bool,
    running: NormStats | None,
    s: Tensor | None = None,
    b: Tensor | None = None,
    eps: float = EPS,
) -> tuple[Tensor, NormStats]:
    """Batch normalization of pre-activations ``y``.

    Returns the output and the statistics it used. In train mode gradients
    flow through the batch mean and variance.
    """
    if train:
        mean, var = batch_moments(y)
        stats = NormStats(mean, T.sqrt(var + eps**2))
    else:
        if running is None:
            raise RuntimeError("eval-mode batch norm before any running statistics update")
        rm, rs = running.numpy()
        stats = NormStats(Tensor(rm), Tensor(np.sqrt(rs**2 + eps**2)))
    return affine(normalize(y, stats), s, b), stats


# --------------------------------------------------------------- weight norm
def weight_norm_stats(w: Tensor) -> NormStats:
    """``(0, ||w||)`` per output channel (first axis)."""
    w = T.as_tensor(w)
    flat = T.reshape(w, (w.shape[0], -1))
    sq = T.reduce_sum(flat * flat, 1)
    if np.any(sq.data <= 0):
        raise DegenerateStatisticsError("zero weight vector has no norm")
    return NormStats(Tensor(np.zeros(w.shape[0], dtype=w.dtype)), T.sqrt(sq))


# ------------------------------------------------------------- analytic norm
def leaky_relu_moments(mean: Tensor, var: Tensor, slope: float = 0.01) -> tuple[Tensor, Tensor]:
    """Mean and variance of ``leaky_relu(X)`` for ``X ~ N(mean, var)``.

    With ``r = max(X, 0)`` and ``t = mean / std``::

        E[r]   = mean * Phi(t) + std * phi(t)
        E[r^2] = (mean^2 + var) * Phi(t) + mean * std * phi(t)

    and ``leaky_relu(X) = (1 - a) r + a X`` gives
    ``E = (1 - a) E[r] + a mean`` and ``E[.^2] = (1 - a^2) E[r^2] + a^2 (mean^2 + var)``.
    """
    mean, var = T.as_tensor(mean), T.as_tensor(var)
    std = T.sqrt(var)
    t = mean / std
    cdf, pdf = T.normal_cdf(t), T.normal_pdf(t)
    second = mean * mean + var
    r1 = mean * cdf + std * pdf
    r2 = second * cdf + mean * std * pdf
    out_mean = r1 * (1 - slope) + mean * slope
    out_second = r2 * (1 - slope**2) + second * slope**2
    return out_mean, out_second - out_mean * out_mean


def linear_moments(w: Tensor, mean: Tensor, var: Tensor, spatial: int = 1) -> NormStats:
    """Propagate per-input-channel moments through ``y = w^T x``.

    ``w`` has shape ``[o, c, kh, kw]``; channels and spatial positions are
    treated as independent. ``spatial`` repeats each input channel's moments
    when a flattened conv map feeds a dense layer.
    """
    w = T.as_tensor(w)
    mean, var = T.as_tensor(mean), T.as_tensor(var)
    o, c = w.shape[0], w.shape[1]
    if spatial > 1:
        idx = np.repeat(np.arange(mean.shape[0]), spatial)
        mean, var = T.getitem(mean, idx), T.getitem(var, idx)
    if mean.shape[0] != c:
        raise ValueError(f"moment channels {mean.shape[0]} do not match weight inputs {c}")
    wsum = T.reduce_sum(w, (2, 3))
    wsq = T.reduce_sum(w * w, (2, 3))
    mu = T.matmul(wsum, T.reshape(mean, (c, 1)))
    v = T.matmul(wsq, T.reshape(var, (c, 1)))
    return NormStats(T.reshape(mu, (o,)), T.sqrt(T.reshape(v, (o,))))


def analytic_norm_stats(network: Network, moments: DatasetMoments) -> list[NormStats]:
    """Per-layer ``(mu_hat(w), sigma_hat(w))`` from dataset moments.

    After normalization each channel is assumed to have zero mean and unit
    variance, so the affine gives moments ``(b, s^2)`` (or ``(b*s, s^2)`` for a
    variational scale), which pass through the leaky ReLU under a Gaussian
    assumption to feed the next layer.
    """
    mean = Tensor(np.asarray(moments.mean, dtype=np.float64))
    var = Tensor(np.asarray(moments.var, dtype=np.float64))
    out: list[NormStats] = []
    for layer in network.layers:
        if layer.kind not in (NormKind.ANALYTIC, NormKind.WEIGHT, NormKind.BATCH):
            raise ValueError(f"analytic propagation does not support layer kind {layer.kind}")
        stats = linear_moments(layer.w, mean, var, spatial=layer.flatten_spatial)
        out.append(stats)
        s = layer.scale_mean()
        if layer.variational:
            mean, var = layer.b * s, s * s
        else:
            mean, var = T.as_tensor(layer.b) * 1.0, s * s
        if layer.activation:
            mean, var = leaky_relu_moments(mean, var, layer.slope)
    return out


# -------------------------------------------------------------------- common
def normalize(y: Tensor, stats: NormStats) -> Tensor:
    """``(y - mu_hat) / sigma_hat`` with per-channel statistics."""
    sigma = T.as_tensor(stats.sigma)
    if np.any(sigma.data <= 0):
        raise DegenerateStatisticsError("normalization sigma must be positive")
    return (y - _channel_view(stats.mu, y.ndim)) / _channel_view(sigma, y.ndim)


def affine(x: Tensor, s: Tensor | None, b: Tensor | None) -> Tensor:
    if s is not None:
        x = x * _channel_view(s, x.ndim)
    if b is not None:
        x = x + _channel_view(b, x.ndim)
    return x


def normalized_forward(
    x: Tensor,
    w: Tensor,
    stats: NormStats,
    s: Tensor | None = None,
    b: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """``(w^T x - mu_hat) / sigma_hat * s + b`` for a conv kernel ``w``."""
    return affine(normalize(T.conv2d(x, w, stride, pad), stats), s, b)


def data_dependent_init(network: Network, batch: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Standardize each layer's first-batch pre-activations by folding batch statistics.

    Equivalent to one batch-norm pass with zero learning rate: layer by layer,
    the pre-activation mean ``M`` and std ``S`` of the batch are measured and
    folded into the layer (``s /= S, b = (b - M) / S`` for normalized layers,
    ``w /= S, b = (b - M) / S`` for plain ones). Returns the ``(M, S)`` used.
    """
    for layer in network.layers:
        if layer.kind not in (NormKind.NONE, NormKind.WEIGHT):
            raise ValueError(f"data-dependent init applies to plain and weight-normalized layers, not {layer.kind.value}")
    folded = []
    with T.no_grad():
        h = Tensor(batch)
        for layer in network.layers:
            y = layer.preactivation(h, train=False, rng=None)
            mean, var = batch_moments(y)
            m, sd = mean.data, np.sqrt(var.data + EPS**2)
            layer.fold_statistics(m, sd)
            folded.append((m, sd))
            h = layer.forward(h, train=False, rng=None)
    return folded


def weight_scale_invariant(kind: NormKind) -> bool:
    return kind in (NormKind.BATCH, NormKind.WEIGHT, NormKind.ANALYTIC)
