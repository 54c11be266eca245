"""Standardization, case splitting, 4-axis mini-batching and Adam training.

A mini-batch is four independent without-replacement index draws, one per
batch axis (training cases, settling classes, time instances, spatial
points); the gathered target slice has shape (N_L^b, N_c^b, N_t^b, N_s^b, 1).
Early stopping keeps the parameters with the lowest full-validation
standardized MSE seen at any evaluation interval.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .models import (
    ArchitectureConfig,
    ModelParams,
    StandardizationStats,
    TARGETS,
    TARGET_CHANNELS,
    build,
    forward_model,
)
from .oracle import DatasetSWDS
from .tensor import Tape, Tensor5, broadcast_mul, broadcast_sub, mean_all, scale

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
STD_FLOOR = 1e-12


class NonFiniteGradientError(RuntimeError):
    """A gradient turned non-finite; carries the parameter index and iteration."""


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint, covering case-index split; val/test get floor(M/10) each."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split_cases(m: int, seed) -> SplitSpec:
    if m < 10:
        raise ValueError(f"need at least 10 cases to split 80/10/10, got {m}")
    perm = np.random.default_rng(seed).permutation(m)
    n_hold = m // 10
    return SplitSpec(
        train=np.sort(perm[2 * n_hold:]),
        val=np.sort(perm[:n_hold]),
        test=np.sort(perm[n_hold: 2 * n_hold]),
    )


def standardize_fit(dataset: DatasetSWDS, split: SplitSpec) -> StandardizationStats:
    """Feature/target statistics from the training split only.

    Settling velocities are log10-transformed first (they span five
    decades); standard deviations are floored at 1e-12 with a warning on
    degenerate (constant) features.
    """
    if len(split.train) == 0:
        raise ValueError("training split is empty")

    def moments(arr, label, axis=None):
        mean = np.mean(arr, axis=axis, dtype=np.float64)
        std = np.std(arr, axis=axis, dtype=np.float64)
        if np.any(std < STD_FLOOR):
            warnings.warn(f"degenerate (constant) feature in {label}; std floored at {STD_FLOOR}")
            std = np.maximum(std, STD_FLOOR)
        return mean, std

    p_mean, p_std = moments(dataset.params[split.train], "event parameters", axis=0)
    cl_mean, cl_std = moments(np.log10(dataset.classes), "settling classes")
    t_mean, t_std = moments(dataset.times, "time stamps")
    q_mean, q_std = moments(dataset.coords[split.train].reshape(-1, 3), "coordinates", axis=0)
    y_mean, y_std = {}, {}
    for name, ch in TARGET_CHANNELS.items():
        mu, sd = moments(dataset.solutions[split.train][..., ch], f"target {name}")
        y_mean[name], y_std[name] = float(mu), float(sd)
    return StandardizationStats(p_mean, p_std, float(cl_mean), float(cl_std),
                                float(t_mean), float(t_std), q_mean, q_std, y_mean, y_std)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; batch_classes=0 means all classes every batch."""

    target: str = "velocity"
    iterations: int = 8000
    batch_cases: int = 16
    batch_classes: int = 0
    batch_times: int = 8
    batch_points: int = 6
    lr: float = 2e-3
    decay: float = 0.984
    decay_interval: int = 100
    val_interval: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.lr <= 0 or not 0.0 < self.decay <= 1.0:
            raise ValueError("need lr > 0 and 0 < decay <= 1")
        if min(self.iterations, self.decay_interval, self.val_interval) < 1:
            raise ValueError("iterations and intervals must be >= 1")
        if min(self.batch_cases, self.batch_times, self.batch_points) < 1 or self.batch_classes < 0:
            raise ValueError("batch sizes must be >= 1 (batch_classes may be 0 for all)")


@dataclass(frozen=True)
class BatchIndices:
    cases: np.ndarray
    classes: np.ndarray
    times: np.ndarray
    points: np.ndarray


def sample_minibatch(dataset: DatasetSWDS, split: SplitSpec, cfg: TrainConfig,
                     iteration_seed) -> BatchIndices:
    """Independent uniform without-replacement draws on each of the four axes."""
    n_classes = cfg.batch_classes or dataset.n_classes
    limits = {
        "batch_cases": (cfg.batch_cases, len(split.train)),
        "batch_classes": (n_classes, dataset.n_classes),
        "batch_times": (cfg.batch_times, dataset.n_times),
        "batch_points": (cfg.batch_points, dataset.n_points),
    }
    for name, (want, have) in limits.items():
        if want > have:
            raise ValueError(f"{name}={want} exceeds the available extent {have}")
    rng = np.random.default_rng(iteration_seed)
    return BatchIndices(
        cases=np.sort(split.train[rng.choice(len(split.train), cfg.batch_cases, replace=False)]),
        classes=np.sort(rng.choice(dataset.n_classes, n_classes, replace=False)),
        times=np.sort(rng.choice(dataset.n_times, cfg.batch_times, replace=False)),
        points=np.sort(rng.choice(dataset.n_points, cfg.batch_points, replace=False)),
    )


def gather_batch(dataset: DatasetSWDS, idx: BatchIndices, target: str):
    """Raw feature slices plus the (bL, bc, bt, bs, 1) target block."""
    ch = TARGET_CHANNELS[target]
    sol = dataset.solutions[np.ix_(idx.cases, idx.classes, idx.times, idx.points)]
    y = np.asarray(sol[..., ch], dtype=np.float64)[..., None]
    p = dataset.params[idx.cases]
    cl = dataset.classes[idx.classes]
    t = dataset.times[idx.times]
    q = dataset.coords[np.ix_(idx.cases, idx.points)]
    return p, cl, t, q, y


def mse_loss(pred: Tensor5, target, y_std: float | None = None) -> Tensor5:
    """Mean squared error as a taped scalar.

    With ``y_std`` given, the loss is computed on de-standardized values:
    both operands share the same affine transform, so MSE* = y_std^2 * MSE.
    """
    target_t = target if isinstance(target, Tensor5) else Tensor5(np.asarray(target))
    if pred.shape != target_t.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target_t.shape}")
    diff = broadcast_sub(pred, target_t)
    out = mean_all(broadcast_mul(diff, diff))
    if y_std is not None:
        out = scale(out, float(y_std) ** 2)
    return out


def lr_schedule(lr0: float, gamma: float, interval: int, iteration: int) -> float:
    """Stepped exponential decay: lr0 * gamma^floor(iteration / interval)."""
    if interval < 1:
        raise ValueError("decay interval must be >= 1")
    return lr0 * gamma ** (iteration // interval)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p.values) for p in params],
                   v=[np.zeros_like(p.values) for p in params])


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient for parameter {i} (shape {p.values.shape}) "
                f"at adam step {t}"
            )
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[i] / (1.0 - ADAM_BETA1**t)
        v_hat = state.v[i] / (1.0 - ADAM_BETA2**t)
        p.values -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class TrainResult:
    model: ModelParams
    train_history: np.ndarray           # per-iteration standardized batch MSE
    val_history: list                   # (iteration, standardized full-val MSE)
    best_iteration: int
    best_val_mse: float
    split: SplitSpec
    diverged: bool = False
    message: str = ""


def full_split_mse(model: ModelParams, dataset: DatasetSWDS, case_indices, target: str,
                   chunk_times: int = 15) -> float:
    """Standardized MSE over every sample of the given cases, summed in index order."""
    stats = model.stats
    ch = TARGET_CHANNELS[target]
    cl_std = stats.classes(dataset.classes)
    t_std = stats.times(dataset.times)
    sse = 0.0
    count = 0
    for case in case_indices:
        p_std = stats.params(dataset.params[case][None, :])
        q_std = stats.coords(dataset.coords[case][None, :, :])
        for lo in range(0, dataset.n_times, chunk_times):
            sl = slice(lo, min(lo + chunk_times, dataset.n_times))
            pred = forward_model(model, p_std, cl_std, t_std[sl], q_std).values[0, ..., 0]
            truth = stats.target(dataset.solutions[case, :, sl, :, ch], target)
            sse += float(((pred - truth) ** 2).sum())
            count += truth.size
    return sse / count


def train(dataset: DatasetSWDS, cfg: TrainConfig, arch: ArchitectureConfig) -> TrainResult:
    """Mini-batch Adam loop with stepped lr decay and early-stopping checkpointing.

    Deterministic under (dataset, cfg, arch): the split, initialization and
    every batch draw derive from cfg.seed through fixed indices.  A
    non-finite loss or gradient aborts with the last good checkpoint and
    sets the ``diverged`` flag.
    """
    if arch.output_mode != "separate":
        raise ValueError("training drives one target per network; use separate output mode")
    split = split_cases(dataset.n_cases, seed=(cfg.seed, 0))
    stats = standardize_fit(dataset, split)
    model = build(arch, seed=(cfg.seed, 1))
    model.stats = stats
    params = model.parameters()
    state = AdamState.for_params(params)

    p_std_all = stats.params(dataset.params)
    cl_std_all = stats.classes(dataset.classes)
    t_std_all = stats.times(dataset.times)
    y_mean, y_std = stats.y_mean[cfg.target], stats.y_std[cfg.target]

    train_history = np.full(cfg.iterations, np.nan)
    val_history: list = []
    best_val = np.inf
    best_iteration = 0
    best_values = model.copy_values()

    def validate(iteration: int) -> None:
        nonlocal best_val, best_iteration, best_values
        val_mse = full_split_mse(model, dataset, split.val, cfg.target)
        val_history.append((iteration, val_mse))
        if val_mse < best_val:
            best_val = val_mse
            best_iteration = iteration
            best_values = model.copy_values()

    def finish(diverged: bool = False, message: str = "") -> TrainResult:
        model.load_values(best_values)
        model.meta = {
            "target": cfg.target,
            "kind": arch.kind,
            "iterations": cfg.iterations,
            "best_iteration": best_iteration,
            "best_val_mse": best_val if np.isfinite(best_val) else None,
            "seed": cfg.seed,
            "dataset_dims": [dataset.n_cases, dataset.n_classes,
                             dataset.n_times, dataset.n_points],
        }
        return TrainResult(model, train_history, val_history, best_iteration,
                           best_val, split, diverged=diverged, message=message)

    for it in range(1, cfg.iterations + 1):
        idx = sample_minibatch(dataset, split, cfg, iteration_seed=(cfg.seed, 2, it))
        p, cl, t, q, y = gather_batch(dataset, idx, cfg.target)
        y_std_batch = (y - y_mean) / y_std

        with Tape() as tape:
            pred = forward_model(model, p_std_all[idx.cases], cl_std_all[idx.classes],
                                 t_std_all[idx.times], stats.coords(q))
            loss = mse_loss(pred, y_std_batch)
            loss_value = loss.item()
            if np.isfinite(loss_value):
                tape.backward(loss)
        if not np.isfinite(loss_value):
            return finish(diverged=True, message=f"loss became non-finite at iteration {it}")

        train_history[it - 1] = loss_value
        grads = [par.grad for par in params]
        try:
            adam_step(params, grads, state, lr_schedule(cfg.lr, cfg.decay, cfg.decay_interval, it))
        except NonFiniteGradientError as exc:
            return finish(diverged=True, message=str(exc))
        for par in params:
            par.grad = None

        if it % cfg.val_interval == 0 or it == cfg.iterations:
            validate(it)

    return finish()


def write_history_csv(path, result: TrainResult) -> None:
    """Columns: iteration, train_mse, val_mse (blank between validation points)."""
    val_at = dict(result.val_history)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "train_mse", "val_mse"])
        for i, mse in enumerate(result.train_history, start=1):
            row = [i, repr(float(mse)) if np.isfinite(mse) else ""]
            row.append(repr(float(val_at[i])) if i in val_at else "")
            writer.writerow(row)
