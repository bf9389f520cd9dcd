"""Variational Bayesian learning of stochastic post-normalization scales.

The deterministic scale of a normalized layer is replaced by ``S ~ N(s, sigma^2)``
with a Gaussian prior ``N(s0, sigma0^2)``. Gradients of the expected data term
use the pathwise estimator ``S = s + sigma(u) * xi``; ``sigma`` is a C1
piecewise map of an unconstrained ``u`` whose log-derivative is bounded, which
keeps the ``-log sigma^2`` term of the KL safe for momentum SGD.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .noise import NoiseSample
from .normalization import NormStats, normalize
from .tensor import Tensor

INIT_SIGMA = 0.05


@dataclass
class PriorConfig:
    s0: float = 1.0
    sigma0: float = 10.0
    kl_factor: float = 1.0

    def __post_init__(self):
        if self.sigma0 <= 0:
            raise ValueError("prior sigma0 must be positive")
        if self.kl_factor < 0:
            raise ValueError("kl_factor must be non-negative")


def sigma_from_u(u: float) -> tuple[float, float]:
    """Return ``(sigma, dsigma/du)`` for ``sigma = e^u (u < 0), u + 1 (u >= 0)``."""
    if u < 0:
        e = math.exp(u)
        return e, e
    return u + 1.0, 1.0


def u_from_sigma(sigma: float) -> float:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return math.log(sigma) if sigma < 1 else sigma - 1.0


@dataclass
class VariationalScale:
    """Posterior ``N(s, sigma(u)^2)`` over per-channel scales.

    ``u`` has one entry per channel or a single entry shared by the layer.
    """

    s: Tensor
    u: Tensor
    granularity: str = "per_channel"

    @classmethod
    def init(cls, channels: int, granularity: str = "per_channel", sigma: float = INIT_SIGMA) -> VariationalScale:
        if granularity not in ("per_channel", "per_layer"):
            raise ValueError(f"unknown granularity {granularity!r}")
        n_u = channels if granularity == "per_channel" else 1
        return cls(
            Tensor(np.ones(channels), requires_grad=True),
            Tensor(np.full(n_u, u_from_sigma(sigma)), requires_grad=True),
            granularity,
        )

    def sigma(self) -> Tensor:
        return T.piecewise_sigma(self.u)


def kl_scale(s: Tensor, u: Tensor, prior: PriorConfig) -> Tensor:
    """``-log sigma^2 + sigma^2/sigma0^2 + (s - s0)^2/sigma0^2`` summed over channels.

    This is twice ``KL(N(s, sigma^2) || N(s0, sigma0^2))`` minus
    :func:`kl_scale_constant`.
    """
    s, u = T.as_tensor(s), T.as_tensor(u)
    sigma = T.piecewise_sigma(u)
    if sigma.shape != s.shape:
        sigma = sigma * Tensor(np.ones(s.shape))
    var0 = prior.sigma0**2
    d = s - prior.s0
    terms = -2.0 * T.log(sigma) + sigma * sigma * (1.0 / var0) + d * d * (1.0 / var0)
    return T.reduce_sum(terms)


def kl_scale_constant(prior: PriorConfig) -> float:
    """Per-channel constant ``c`` with ``KL = (kl_scale + c) / 2``."""
    return math.log(prior.sigma0**2) - 1.0


def kl_gaussian(s: float, sigma: float, prior: PriorConfig) -> float:
    """Closed-form ``KL(N(s, sigma^2) || N(s0, sigma0^2))``."""
    return (
        math.log(prior.sigma0 / sigma)
        + (sigma**2 + (s - prior.s0) ** 2) / (2 * prior.sigma0**2)
        - 0.5
    )


def sample_scale(vs: VariationalScale, k: int, rng: np.random.Generator) -> Tensor:
    """``S = s + sigma(u) * xi`` with a fresh ``xi`` per example and channel, shape ``[k, C]``."""
    xi = rng.standard_normal((k, vs.s.shape[0]))
    return T.reshape(vs.s, (1, -1)) + T.reshape(vs.sigma(), (1, -1)) * Tensor(xi)


def bayes_norm_forward(
    y: Tensor,
    stats: NormStats,
    b: Tensor,
    vs: VariationalScale,
    rng: np.random.Generator | None,
) -> Tensor:
    """``((y - mu_hat)/sigma_hat + b) * S`` with one ``S`` per example and channel.

    ``rng=None`` substitutes the posterior mean ``s`` for ``S``.
    """
    z = normalize(y, stats)
    z = z + T.reshape(T.as_tensor(b), (1, -1) + (1,) * (z.ndim - 2))
    if rng is None:
        S = T.reshape(vs.s, (1, -1) + (1,) * (z.ndim - 2))
    else:
        S = T.reshape(sample_scale(vs, z.shape[0], rng), z.shape[:2] + (1,) * (z.ndim - 2))
    return z * S


@dataclass
class ElboBreakdown:
    evidence: float
    kl: float
    total: float
    dataset_size: int
    batch_size: int


def evidence_objective(
    batch_nll_sum: Tensor,
    dataset_size: int,
    batch_size: int,
    kl_terms: Sequence[Tensor],
    prior: PriorConfig,
) -> tuple[Tensor, ElboBreakdown]:
    """Minibatch estimate ``|D|/M * sum_m NLL_m + kl_factor * sum KL``.

    Returns the differentiable total and a float breakdown.
    """
    if batch_size < 1:
        raise ValueError("batch size M must be >= 1")
    evidence = T.as_tensor(batch_nll_sum) * (dataset_size / batch_size)
    kl = T.reduce_sum(T.concat([T.reshape(T.as_tensor(t), (1,)) for t in kl_terms])) if kl_terms else Tensor(0.0)
    total = evidence + kl * prior.kl_factor
    return total, ElboBreakdown(evidence.item(), kl.item(), total.item(), dataset_size, batch_size)


def mc_predict(
    forward: Callable[[np.random.Generator | None], Tensor],
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Average of softmax outputs over ``n_samples`` posterior scale draws.

    ``forward(rng)`` returns log-probabilities for one draw of all scales.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    with T.no_grad():
        probs = [np.exp(forward(rng).data) for _ in range(n_samples)]
    return np.mean(probs, axis=0)


def bn_equivalence_map(s, b, noise: NoiseSample) -> tuple[np.ndarray, np.ndarray]:
    """Stochastic scale and bias ``S = U s``, ``B = V + b / (U s)``.

    With these, ``(x + B) * S == (x + V) * U * s + b``.
    """
    S = np.asarray(noise.U) * np.asarray(s)
    if np.any(S == 0):
        raise ZeroDivisionError("U * s must be non-zero")
    return S, np.asarray(noise.V) + np.asarray(b) / S


def dropout_equivalence_check(W, b, x, S, tol: float = 1e-12) -> bool:
    """Scaling layer inputs by ``S`` equals scaling the weight columns by ``S``."""
    W, b, x, S = (np.asarray(a, dtype=np.float64) for a in (W, b, x, S))
    lhs = W @ (x * S) + b
    rhs = (W * S[None, :]) @ x + b
    return bool(np.allclose(lhs, rhs, rtol=0.0, atol=tol * max(1.0, float(np.max(np.abs(lhs))))))
