"""SGD with Nesterov momentum, Adam, unit-norm projection and LR search.

No weight decay is applied. For a scale-invariant layer the objective only
depends on ``w / ||w||``, so a penalty on ``||w||`` has no minimizer: shrinking
``w`` is always a descent direction and the objective is undefined at zero.
Instead the weights of normalized layers can be kept on ``||w|| = 1`` by
projecting after every step. Without projection, gradients of such layers are
orthogonal to ``w`` and each step can only grow ``||w||``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when a gradient or loss becomes non-finite."""


def gamma_for(epochs_to_tenth: float | None) -> float:
    """Per-epoch decay ``gamma`` with ``gamma ** epochs_to_tenth == 0.1``."""
    if not epochs_to_tenth:
        return 1.0
    return 0.1 ** (1.0 / epochs_to_tenth)


@dataclass
class OptimizerConfig:
    kind: str = "sgd_nesterov"  # sgd_nesterov | adam
    lr0: float = 0.01
    momentum: float = 0.9
    gamma: float = 1.0
    projected: set[str] = field(default_factory=set)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.kind not in ("sgd_nesterov", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def project_unit(w: np.ndarray) -> np.ndarray:
    """Rescale each output channel (first axis) of ``w`` to unit norm, in place."""
    norms = np.linalg.norm(w.reshape(w.shape[0], -1), axis=1)
    w /= norms.reshape((-1,) + (1,) * (w.ndim - 1))
    return w


class Optimizer:
    def __init__(self, params: Mapping[str, Tensor], config: OptimizerConfig):
        self.params = dict(params)
        self.config = config
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.t = 0

    def lr(self, epoch: int) -> float:
        return self.config.lr0 * self.config.gamma**epoch

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, epoch: int) -> None:
        """Apply one update at learning rate ``lr0 * gamma**epoch``, then project."""
        cfg = self.config
        lr = self.lr(epoch)
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in {name} at step {self.t}")
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            st = self.state.setdefault(name, {})
            if cfg.kind == "sgd_nesterov":
                if cfg.momentum:
                    buf = st.get("momentum")
                    buf = g.copy() if buf is None else cfg.momentum * buf + g
                    st["momentum"] = buf
                    g = g + cfg.momentum * buf
                p.data -= lr * g
            else:
                b1, b2 = cfg.betas
                m = st.get("m", np.zeros_like(p.data))
                v = st.get("v", np.zeros_like(p.data))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                st["m"], st["v"] = m, v
                mhat = m / (1 - b1**self.t)
                vhat = v / (1 - b2**self.t)
                p.data -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
            if name in cfg.projected:
                project_unit(p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, st in self.state.items() for k, v in st.items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.state = {}
        for key, v in arrays.items():
            name, k = key.rsplit(".", 1)
            self.state.setdefault(name, {})[k] = np.array(v)
        self.t = t


def lr_search(
    train_fn: Callable[[float], float],
    grid: Sequence[float] | None = None,
) -> float:
    """Return the grid learning rate with the lowest ``train_fn(lr)`` training loss.

    ``train_fn`` should train for the search budget (5 epochs) from a fixed
    seed. Non-finite losses and divergence count as failures.
    """
    grid = list(grid) if grid is not None else list(np.logspace(-3, 0, 7))
    best_lr, best_loss = None, math.inf
    for lr in grid:
        try:
            loss = float(train_fn(lr))
        except DivergenceError:
            loss = math.nan
        log.info("lr search: lr=%.4g loss=%.4g", lr, loss)
        if math.isfinite(loss) and loss < best_loss:
            best_lr, best_loss = lr, loss
    if best_lr is None:
        raise DivergenceError("every learning rate candidate diverged")
    return float(best_lr)
