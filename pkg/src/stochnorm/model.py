"""Convolutional classifiers built from normalized layers.

Each layer is ``conv -> normalization -> [noise] -> affine -> leaky ReLU``;
the last layer has no activation and is followed by global average pooling
and log-softmax. Dense layers are 1x1 convolutions over a flattened input.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .noise import NoiseConfig, NoiseMode, draw_noise, noisy_normalize
from .normalization import (
    EPS,
    DatasetMoments,
    NormKind,
    NormStats,
    affine,
    analytic_norm_stats,
    batch_moments,
    normalize,
    update_running,
    weight_norm_stats,
)
from .tensor import Tensor
from .variational import INIT_SIGMA, PriorConfig, VariationalScale, kl_scale

LEAKY_SLOPE = 0.01


@dataclass
class LayerSpec:
    kind: str = "conv"  # conv | dense
    out: int = 16
    ksize: int = 3
    stride: int = 1


def init_weights(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Uniform in ``[-1/sqrt(c), 1/sqrt(c)]`` with ``c`` inputs per output."""
    c = int(np.prod(shape[1:]))
    if c <= 0:
        raise ValueError("weights need at least one input per output")
    bound = 1.0 / np.sqrt(c)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    def __init__(
        self,
        in_channels: int,
        spec: LayerSpec,
        kind: NormKind,
        rng: np.random.Generator,
        activation: bool = True,
        in_spatial: int = 1,
        variational: str | None = None,
        project: bool = False,
        slope: float = LEAKY_SLOPE,
        init_sigma: float = INIT_SIGMA,
    ):
        self.kind = NormKind(kind)
        self.spec = spec
        self.activation = activation
        self.slope = slope
        self.flatten_spatial = in_spatial if spec.kind == "dense" else 1
        if spec.kind == "dense":
            shape = (spec.out, in_channels * in_spatial, 1, 1)
            self.stride, self.pad = 1, 0
        else:
            shape = (spec.out, in_channels, spec.ksize, spec.ksize)
            self.stride, self.pad = spec.stride, spec.ksize // 2
        w = init_weights(shape, rng)
        self.project = project and self.kind != NormKind.NONE
        if self.project:
            w /= np.linalg.norm(w.reshape(shape[0], -1), axis=1).reshape(-1, 1, 1, 1)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(spec.out), requires_grad=True)
        self.vs: VariationalScale | None = None
        self.s: Tensor | None = None
        if variational and self.kind != NormKind.NONE:
            self.vs = VariationalScale.init(spec.out, variational, init_sigma)
        elif self.kind != NormKind.NONE:
            self.s = Tensor(np.ones(spec.out), requires_grad=True)
        self.running: NormStats | None = None

    @property
    def variational(self) -> bool:
        return self.vs is not None

    def scale_mean(self) -> Tensor:
        return self.vs.s if self.vs is not None else self.s

    def parameters(self) -> dict[str, Tensor]:
        params = {"w": self.w, "b": self.b}
        if self.s is not None:
            params["s"] = self.s
        if self.vs is not None:
            params["s"] = self.vs.s
            params["u"] = self.vs.u
        return params

    def _input(self, h: Tensor) -> Tensor:
        if self.flatten_spatial > 1 or (self.spec.kind == "dense" and h.ndim == 4 and h.shape[2:] != (1, 1)):
            return T.reshape(h, (h.shape[0], -1, 1, 1))
        return h

    def stats(self, y: Tensor, ctx: ForwardContext) -> NormStats:
        if self.kind == NormKind.BATCH:
            if ctx.train:
                mean, var = batch_moments(y)
                stats = NormStats(mean, T.sqrt(var + EPS**2))
                if ctx.update_running:
                    self.running = update_running(
                        self.running, NormStats(mean.data, np.sqrt(var.data)), ctx.momentum
                    )
                return stats
            if self.running is None:
                raise RuntimeError("eval-mode batch norm before any running statistics update")
            rm, rs = self.running.numpy()
            return NormStats(Tensor(rm), Tensor(np.sqrt(rs**2 + EPS**2)))
        if self.kind == NormKind.WEIGHT:
            return weight_norm_stats(self.w)
        if self.kind == NormKind.ANALYTIC:
            return ctx.analytic[ctx.layer_index]
        raise ValueError(f"layer kind {self.kind} has no normalization statistics")

    def preactivation(self, h: Tensor, train: bool = False, rng=None, ctx: ForwardContext | None = None) -> Tensor:
        ctx = ctx or ForwardContext(train=train, rng=rng)
        y = T.conv2d(self._input(T.as_tensor(h)), self.w, self.stride, self.pad)
        if self.kind == NormKind.NONE:
            return affine(y, None, self.b)
        stats = self.stats(y, ctx)
        if ctx.record is not None:
            m, sd = stats.numpy()
            ctx.record.append((m, sd, y.data if ctx.keep_preactivations else None))
        z = normalize(y, stats)
        if ctx.train and ctx.noise is not None and ctx.noise.mode != NoiseMode.NONE:
            n = ctx.batch_size * int(np.prod(y.shape[2:]))
            z = noisy_normalize(z, draw_noise(ctx.noise, ctx.layer_index, y.shape, n, ctx.rng))
        if self.vs is not None:
            view = (1, -1, 1, 1)
            z = z + T.reshape(self.b, view)
            if ctx.sample_scales and ctx.rng is not None:
                xi = ctx.rng.standard_normal((y.shape[0], self.vs.s.shape[0]))
                S = T.reshape(self.vs.s, (1, -1)) + T.reshape(self.vs.sigma(), (1, -1)) * Tensor(xi)
                return z * T.reshape(S, y.shape[:2] + (1, 1))
            return z * T.reshape(self.vs.s, view)
        return affine(z, self.s, self.b)

    def forward(self, h: Tensor, train: bool = False, rng=None, ctx: ForwardContext | None = None) -> Tensor:
        out = self.preactivation(h, train, rng, ctx)
        return T.leaky_relu(out, self.slope) if self.activation else out

    def fold_statistics(self, mean: np.ndarray, std: np.ndarray) -> None:
        """Make this layer's pre-activation ``(out - mean) / std`` without changing ``w``'s direction."""
        if self.kind == NormKind.NONE:
            self.w.data /= std.reshape(-1, 1, 1, 1)
            self.b.data[:] = (self.b.data - mean) / std
        elif self.kind == NormKind.WEIGHT:
            if self.vs is not None:
                s = self.vs.s.data
                self.b.data[:] = self.b.data - mean / s
                self.vs.s.data[:] = s / std
            else:
                self.b.data[:] = (self.b.data - mean) / std
                self.s.data[:] = self.s.data / std
        else:
            raise ValueError(f"data-dependent init is not defined for {self.kind.value} layers")


@dataclass
class ForwardContext:
    train: bool = False
    rng: np.random.Generator | None = None
    noise: NoiseConfig | None = None
    sample_scales: bool = False
    update_running: bool = True
    momentum: float = 0.1
    batch_size: int = 32
    analytic: list[NormStats] | None = None
    record: list | None = None
    keep_preactivations: bool = False
    layer_index: int = 0


@dataclass
class Network:
    layers: list[Layer]
    in_shape: tuple[int, int, int]
    classes: int
    kind: NormKind
    moments: DatasetMoments | None = None
    arch: list[LayerSpec] = field(default_factory=list)

    def forward(
        self,
        x,
        train: bool = False,
        rng: np.random.Generator | None = None,
        noise: NoiseConfig | None = None,
        sample_scales: bool | None = None,
        update_running: bool = True,
        batch_size: int | None = None,
        record: list | None = None,
        keep_preactivations: bool = False,
        momentum: float = 0.1,
    ) -> Tensor:
        """Log-probabilities ``[k, classes]``.

        ``sample_scales`` defaults to ``train``: variational scales are
        sampled in training and replaced by their means otherwise.
        """
        h = T.as_tensor(x)
        ctx = ForwardContext(
            train=train,
            rng=rng,
            noise=noise,
            sample_scales=train if sample_scales is None else sample_scales,
            update_running=update_running,
            momentum=momentum,
            batch_size=batch_size or h.shape[0],
            record=record,
            keep_preactivations=keep_preactivations,
        )
        if self.kind == NormKind.ANALYTIC:
            if self.moments is None:
                raise RuntimeError("analytic normalization needs dataset moments")
            ctx.analytic = analytic_norm_stats(self, self.moments)
        for i, layer in enumerate(self.layers):
            ctx.layer_index = i
            h = layer.forward(h, ctx=ctx)
        return T.log_softmax(T.global_avg_pool(h))

    def parameters(self) -> dict[str, Tensor]:
        return {f"layers.{i}.{k}": p for i, layer in enumerate(self.layers) for k, p in layer.parameters().items()}

    def projected(self) -> set[str]:
        return {f"layers.{i}.w" for i, layer in enumerate(self.layers) if layer.project}

    def kl_terms(self, prior: PriorConfig) -> list[Tensor]:
        return [kl_scale(layer.vs.s, layer.vs.u, prior) for layer in self.layers if layer.vs is not None]

    @property
    def variational(self) -> bool:
        return any(layer.vs is not None for layer in self.layers)

    def state(self) -> dict[str, np.ndarray]:
        """All arrays needed to restore the network function."""
        out = {k: p.data for k, p in self.parameters().items()}
        for i, layer in enumerate(self.layers):
            if layer.running is not None:
                rm, rs = layer.running.numpy()
                out[f"layers.{i}.running_mean"] = rm
                out[f"layers.{i}.running_std"] = rs
        if self.moments is not None:
            out["moments.mean"] = np.asarray(self.moments.mean, dtype=np.float64)
            out["moments.var"] = np.asarray(self.moments.var, dtype=np.float64)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data[...] = state[k]
        for i, layer in enumerate(self.layers):
            key = f"layers.{i}.running_mean"
            layer.running = NormStats(Tensor(state[key].copy()), Tensor(state[f"layers.{i}.running_std"].copy())) if key in state else None
        if "moments.mean" in state:
            self.moments = DatasetMoments(state["moments.mean"].copy(), state["moments.var"].copy())

    def describe(self) -> dict:
        return {
            "in_shape": list(self.in_shape),
            "classes": self.classes,
            "kind": self.kind.value,
            "slope": self.layers[0].slope if self.layers else LEAKY_SLOPE,
            "layers": [
                {
                    "kind": l.spec.kind,
                    "out": l.spec.out,
                    "ksize": l.spec.ksize,
                    "stride": l.spec.stride,
                    "variational": l.vs.granularity if l.vs is not None else None,
                    "project": l.project,
                    "activation": l.activation,
                }
                for l in self.layers
            ],
        }

    def architecture_hash(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_network(
    arch: list[LayerSpec],
    in_shape: tuple[int, int, int],
    classes: int,
    kind: NormKind | str,
    rng: np.random.Generator,
    variational: str | None = None,
    project: bool = False,
    slope: float = LEAKY_SLOPE,
    moments: DatasetMoments | None = None,
    init_sigma: float = INIT_SIGMA,
) -> Network:
    """Stack ``arch`` and a final 1x1 conv to ``classes`` (no activation)."""
    kind = NormKind(kind)
    c, h, w = in_shape
    layers = []
    specs = list(arch) + [LayerSpec("conv", classes, 1, 1)]
    for i, spec in enumerate(specs):
        last = i == len(specs) - 1
        layer = Layer(
            c, spec, kind, rng, activation=not last, in_spatial=h * w, variational=variational, project=project, slope=slope,
            init_sigma=init_sigma,
        )
        layers.append(layer)
        if spec.kind == "dense":
            c, h, w = spec.out, 1, 1
        else:
            c = spec.out
            h = T.conv_output_size(h, spec.ksize, spec.stride, spec.ksize // 2)
            w = T.conv_output_size(w, spec.ksize, spec.stride, spec.ksize // 2)
    return Network(layers, tuple(in_shape), classes, kind, moments, list(arch))


def narrow_allcnn(divisor: int = 8) -> list[LayerSpec]:
    """All-CNN layer pattern with widths divided by ``divisor`` (head excluded)."""
    ksize = [3, 3, 3, 3, 3, 3, 3, 1]
    stride = [1, 1, 2, 1, 1, 2, 1, 1]
    depth = [96, 96, 96, 192, 192, 192, 192, 192]
    return [LayerSpec("conv", max(1, d // divisor), k, s) for d, k, s in zip(depth, ksize, stride)]
