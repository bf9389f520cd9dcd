"""Training loops and diagnostic experiments.

Every run is reproducible from ``(config, seed)``: the dataset comes from
``config.data.seed`` and all training randomness (initialization, batch order,
normalization-batch fill, noise and scale draws) from one generator seeded by
the run seed. Metrics files carry no wall-clock values; timings go to a
separate file.
"""

from __future__ import annotations

import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, augment, make_dataset
from .model import LayerSpec, Network, build_network
from .noise import NoiseConfig, NoiseMode
from .normalization import DatasetMoments, NormKind, data_dependent_init
from .optim import DivergenceError, Optimizer, OptimizerConfig, gamma_for, lr_search
from .tensor import Tensor, nll_loss
from .variational import PriorConfig, evidence_objective, mc_predict

log = logging.getLogger(__name__)

METRICS_FIELDS = (
    "epoch",
    "train_loss",
    "train_loss_eval_mode",
    "val_loss",
    "val_acc",
    "evidence",
    "kl",
    "lr",
)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_loss_eval_mode: float
    val_loss: float
    val_acc: float
    evidence: float
    kl: float
    lr: float
    wall_time: float = 0.0


@dataclass
class RunResult:
    network: Network
    dataset: Dataset
    records: list[MetricsRecord]
    lr0: float
    diverged: bool = False
    message: str = ""
    rng: np.random.Generator | None = None

    @property
    def final(self) -> MetricsRecord | None:
        return self.records[-1] if self.records else None


# ------------------------------------------------------------------- setup
def noise_config(config: ExperimentConfig, n_layers: int) -> NoiseConfig | None:
    mode = config.noise.mode
    if mode in ("none", "variational"):
        return None
    if mode == "exact-chi":
        return NoiseConfig(NoiseMode.EXACT_CHI, spatial_correlated=config.noise.spatial_correlated)
    if config.noise.sigma_u is None and config.noise.sigma_v is None:
        cfg = NoiseConfig.measured_default(n_layers)
        cfg.spatial_correlated = config.noise.spatial_correlated
        return cfg
    sigma_u = config.noise.sigma_u or [0.0] * n_layers
    sigma_v = config.noise.sigma_v or [float(np.sqrt(2) * u) for u in sigma_u]
    if len(sigma_u) != n_layers or len(sigma_v) != n_layers:
        raise ValueError(f"noise profiles need one value per layer ({n_layers})")
    return NoiseConfig(NoiseMode.GAUSSIAN, sigma_v, sigma_u, config.noise.spatial_correlated)


def dataset_for(config: ExperimentConfig) -> Dataset:
    d = config.data
    return make_dataset(
        d.kind, d.n_train, d.val_fraction, d.classes, d.size, d.channels, d.noise, d.label_noise, d.correlation, d.seed
    )


def build_for(config: ExperimentConfig, dataset: Dataset, rng: np.random.Generator) -> Network:
    arch = [LayerSpec(l.kind, l.out, l.ksize, l.stride) for l in config.architecture]
    return build_network(
        arch,
        dataset.in_shape,
        dataset.classes,
        NormKind(config.normalization),
        rng,
        variational=config.noise.granularity if config.noise.mode == "variational" else None,
        project=config.optimizer.project,
        slope=config.leaky_slope,
        moments=DatasetMoments.from_data(dataset.x_train),
        init_sigma=config.noise.init_sigma,
    )


# -------------------------------------------------------------- evaluation
def predict_logp(network: Network, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Deterministic evaluation-mode log-probabilities (mean scales, running BN stats)."""
    out = []
    with T.no_grad():
        for i in range(0, len(x), chunk):
            out.append(network.forward(x[i : i + chunk], train=False).data)
    return np.concatenate(out)


def nll_and_acc(logp: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    return float(-np.mean(logp[np.arange(len(y)), y])), float(np.mean(np.argmax(logp, axis=1) == y))


def mc_predict_network(
    network: Network, x: np.ndarray, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """MC posterior predictive: average softmax over scale draws (eval-mode statistics)."""
    return mc_predict(lambda r: network.forward(x, train=False, rng=r, sample_scales=True), n_samples, rng)


def _norm_batch(
    dataset: Dataset, idx: np.ndarray, norm_batch: int, rng: np.random.Generator
) -> np.ndarray:
    if norm_batch <= len(idx):
        return idx
    rest = np.setdiff1d(np.arange(len(dataset.x_train)), idx)
    return np.concatenate([idx, rng.choice(rest, size=norm_batch - len(idx), replace=False)])


def train_mode_loss(
    network: Network, dataset: Dataset, config: ExperimentConfig, noise: NoiseConfig | None, rng: np.random.Generator
) -> float:
    """Training-set NLL with train-mode forward passes (batch statistics, noise, sampled scales)."""
    n = len(dataset.x_train)
    M = config.batch_size
    total = 0.0
    perm = rng.permutation(n)
    with T.no_grad():
        for start in range(0, n - M + 1, M):
            idx = _norm_batch(dataset, perm[start : start + M], config.norm_batch, rng)
            logp = network.forward(
                dataset.x_train[idx], train=True, rng=rng, noise=noise, update_running=False, batch_size=len(idx)
            ).data[:M]
            total += float(-logp[np.arange(M), dataset.y_train[idx[:M]]].sum())
    return total / (n // M * M)


# ----------------------------------------------------------------- training
def train(
    config: ExperimentConfig,
    seed: int | None = None,
    dataset: Dataset | None = None,
    epochs: int | None = None,
    lr0: float | None = None,
    evaluate: bool = True,
) -> RunResult:
    """Train one network; divergence is recorded on the result, not raised."""
    seed = config.seed if seed is None else seed
    epochs = config.epochs if epochs is None else epochs
    dataset = dataset or dataset_for(config)
    if lr0 is None:
        lr0 = resolve_lr(config, seed, dataset)
    rng = np.random.default_rng(seed)
    network = build_for(config, dataset, rng)
    kind = NormKind(config.normalization)
    if config.data_dependent_init and kind in (NormKind.NONE, NormKind.WEIGHT):
        init_idx = rng.choice(len(dataset.x_train), size=min(config.init_batch_size, len(dataset.x_train)), replace=False)
        data_dependent_init(network, dataset.x_train[init_idx])
    noise = noise_config(config, len(network.layers))
    prior = PriorConfig(config.prior_s0, config.prior_sigma0, config.kl_factor)
    opt = Optimizer(
        network.parameters(),
        OptimizerConfig(
            kind=config.optimizer.kind,
            lr0=lr0,
            momentum=config.optimizer.momentum,
            gamma=gamma_for(config.optimizer.gamma_epochs_to_tenth),
            projected=network.projected(),
        ),
    )
    n = len(dataset.x_train)
    M = config.batch_size
    records: list[MetricsRecord] = []
    result = RunResult(network, dataset, records, lr0, rng=rng)
    start_time = time.perf_counter()
    try:
        for epoch in range(epochs):
            perm = rng.permutation(n)
            nll_acc, kl_val, steps = 0.0, 0.0, 0
            for start in range(0, n - M + 1, M):
                idx = _norm_batch(dataset, perm[start : start + M], config.norm_batch, rng)
                xb = dataset.x_train[idx]
                if config.data.augment:
                    xb = augment(xb, rng)
                out = network.forward(
                    xb, train=True, rng=rng, noise=noise, batch_size=len(idx), momentum=config.running_momentum
                )
                logp = out[:M] if len(idx) > M else out
                nll_sum = nll_loss(logp, dataset.y_train[idx[:M]], reduction="sum")
                if network.variational:
                    total, br = evidence_objective(nll_sum, n, M, network.kl_terms(prior), prior)
                    loss = total * (1.0 / n)
                    kl_val = br.kl
                else:
                    loss = nll_sum * (1.0 / M)
                if not math.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite loss at epoch {epoch + 1}")
                opt.zero_grad()
                loss.backward()
                opt.step(epoch)
                nll_acc += nll_sum.item() / M
                steps += 1
            if evaluate:
                records.append(_evaluate(network, dataset, config, noise, rng, epoch + 1, nll_acc / max(steps, 1), kl_val, opt.lr(epoch)))
                records[-1].wall_time = time.perf_counter() - start_time
    except DivergenceError as exc:
        result.diverged = True
        result.message = str(exc)
        log.warning("run diverged: %s", exc)
    return result


def _evaluate(network, dataset, config, noise, rng, epoch, evidence, kl, lr) -> MetricsRecord:
    train_loss = train_mode_loss(network, dataset, config, noise, rng)
    train_eval, _ = nll_and_acc(predict_logp(network, dataset.x_train), dataset.y_train)
    val_loss, val_acc = nll_and_acc(predict_logp(network, dataset.x_val), dataset.y_val)
    return MetricsRecord(epoch, train_loss, train_eval, val_loss, val_acc, evidence, kl, lr)


def resolve_lr(config: ExperimentConfig, seed: int, dataset: Dataset) -> float:
    """The configured ``lr0``, or the LR-search winner when it is ``"auto"``."""
    if config.optimizer.lr0 != "auto":
        return float(config.optimizer.lr0)

    def five_epoch_loss(lr: float) -> float:
        res = train(config, seed, dataset, epochs=config.optimizer.lr_search_epochs, lr0=lr, evaluate=False)
        if res.diverged:
            return math.nan
        net = res.network
        with T.no_grad():
            return train_mode_loss(net, dataset, config, noise_config(config, len(net.layers)), np.random.default_rng(seed))

    return lr_search(five_epoch_loss, config.optimizer.lr_grid)


# ------------------------------------------------------------------ outputs
def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def metrics_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    buf.write(",".join(METRICS_FIELDS) + "\n")
    for r in records:
        d = asdict(r)
        buf.write(",".join(_fmt(d[f]) for f in METRICS_FIELDS) + "\n")
    return buf.getvalue()


def write_run(result: RunResult, config: ExperimentConfig, seed: int, out_dir: str | Path) -> dict:
    """Write ``metrics.csv``, ``timing.csv``, ``summary.json`` and ``model.ckpt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result.records))
    (out / "timing.csv").write_text(
        "epoch,wall_time\n" + "".join(f"{r.epoch},{r.wall_time:.3f}\n" for r in result.records)
    )
    summary = {
        "seed": seed,
        "lr0": result.lr0,
        "epochs": len(result.records),
        "diverged": result.diverged,
        "message": result.message,
        "final": {k: v for k, v in asdict(result.final).items() if k != "wall_time"} if result.final else None,
    }
    if result.network.variational and not result.diverged:
        x, y = result.dataset.x_val, result.dataset.y_val
        probs = mc_predict_network(result.network, x, config.mc_eval_samples, np.random.default_rng(seed + 1))
        summary["val_nll_mc"] = float(-np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300))))
        summary["mc_samples"] = config.mc_eval_samples
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    save_checkpoint(out / "model.ckpt", result.network, result.rng, extra={"seed": seed, "lr0": result.lr0})
    return summary


def run_training(config: ExperimentConfig, seed: int, out_dir: str | Path) -> RunResult:
    result = train(config, seed)
    write_run(result, config, seed, out_dir)
    return result


def normalization_batch_experiment(config: ExperimentConfig, norm_batch: int, seed: int) -> RunResult:
    """Batch-norm training whose statistics use ``norm_batch`` samples per step.

    The first ``batch_size`` samples carry the loss; the rest are random other
    training samples that only enter the statistics (and are backpropagated
    through them).
    """
    if norm_batch < config.batch_size:
        raise ValueError("normalization batch must be at least the training batch")
    if norm_batch > len(dataset_for(config).x_train):
        raise ValueError("dataset too small for the normalization batch")
    cfg = config.model_copy(update={"normalization_batch_size": norm_batch, "normalization": "batch"})
    return train(cfg, seed)


# -------------------------------------------------------------- diagnostics
def predictive_entropy(probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs, 1e-300, 1.0)
    return -np.sum(probs * np.log(p), axis=1)


def error_coverage(
    probs: np.ndarray, labels: np.ndarray, completeness: Sequence[float] | None = None
) -> list[tuple[float, float]]:
    """Error rate among the ``c`` fraction of samples with the lowest predictive entropy."""
    labels = np.asarray(labels)
    if completeness is None:
        completeness = np.round(np.arange(1, 21) / 20, 2)
    order = np.argsort(predictive_entropy(probs), kind="stable")
    wrong = (np.argmax(probs, axis=1) != labels)[order]
    curve = []
    for c in completeness:
        m = max(1, int(round(c * len(labels))))
        curve.append((float(c), float(wrong[:m].mean())))
    return curve


def coverage_csv(curve: Sequence[tuple[float, float]]) -> str:
    return "completeness,error\n" + "".join(f"{c!r},{e!r}\n" for c, e in curve)


def input_gradient_sign(network: Network, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``sign(d NLL / dx)`` of the deterministic evaluation-mode model; ``sign(0) = 0``."""
    xt = Tensor(x, requires_grad=True)
    nll_loss(network.forward(xt, train=False), y, reduction="sum").backward()
    return np.sign(xt.grad)


def perturbation_sweep(
    network: Network,
    x: np.ndarray,
    y: np.ndarray,
    kind: str,
    magnitudes: Sequence[float],
    rng: np.random.Generator,
) -> list[tuple[float, float]]:
    """Accuracy under ``x + m * xi`` (gaussian) or ``x + m * sign(grad_x NLL)`` (grad-sign)."""
    if kind == "gaussian":
        xi = rng.standard_normal(x.shape)
        direction = None
    elif kind == "grad-sign":
        direction = input_gradient_sign(network, x, y)
    else:
        raise ValueError(f"unknown perturbation kind {kind!r}")
    out = []
    for m in magnitudes:
        xp = x + m * (xi if direction is None else direction)
        _, acc = nll_and_acc(predict_logp(network, xp), y)
        out.append((float(m), acc))
    return out


def seed_stability_report(
    config: ExperimentConfig, seeds: Sequence[int], out_dir: str | Path | None = None, window: int = 5
) -> dict:
    """Cross-seed mean/std per epoch against the within-run std of late iterates."""
    if len(seeds) < 3:
        raise ValueError("seed stability needs at least 3 seeds")
    runs = []
    for s in seeds:
        res = train(config, s)
        if out_dir is not None:
            write_run(res, config, s, Path(out_dir) / f"seed_{s}")
        runs.append(res.records)
    n_epochs = min(len(r) for r in runs)
    acc = np.array([[rec.val_acc for rec in r[:n_epochs]] for r in runs])
    loss = np.array([[rec.val_loss for rec in r[:n_epochs]] for r in runs])
    w = min(window, n_epochs)
    within = float(np.mean(acc[:, n_epochs - w :].std(axis=1))) if n_epochs else 0.0
    rows = [
        {
            "epoch": e + 1,
            "mean_val_acc": float(acc[:, e].mean()),
            "std_val_acc": float(acc[:, e].std()),
            "mean_val_loss": float(loss[:, e].mean()),
            "std_val_loss": float(loss[:, e].std()),
        }
        for e in range(n_epochs)
    ]
    report = {
        "seeds": list(seeds),
        "final_val_acc": [float(a) for a in acc[:, -1]] if n_epochs else [],
        "cross_seed_std_final_val_acc": float(acc[:, -1].std()) if n_epochs else 0.0,
        "within_run_iterate_std_val_acc": within,
        "rows": rows,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fields = ("epoch", "mean_val_acc", "std_val_acc", "mean_val_loss", "std_val_loss")
        text = ",".join(fields) + "\n" + "".join(",".join(_fmt(r[f]) for f in fields) + "\n" for r in rows)
        (out / "seed_stability.csv").write_text(text)
        summary = {k: v for k, v in report.items() if k != "rows"}
        (out / "seed_stability.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return report
