"""SGD training loops that manufacture the pre-trained base and per-task experts.

Shuffling is drawn from a counter-based generator keyed on (seed, epoch), so
two runs with the same config produce byte-identical parameter vectors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ParamVector
from .datasets import TaskDataset, TaskSuite
from .errors import DomainError, TrainingError
from .model import (
    ModelSpec,
    batch_gradient,
    cross_entropy,
    forward_batch,
    init_params,
    philox_rng,
)

_SHUFFLE_TAG = 0x50F1
_MOMENTUM = 0.9


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    optimizer: str = "sgd_momentum"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        # Zero is allowed so a zero-step run provably returns its input.
        if self.learning_rate < 0:
            raise DomainError("learning_rate must be non-negative")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise DomainError("optimizer must be 'sgd' or 'sgd_momentum'")


@dataclass(frozen=True)
class CurvePoint:
    epoch: int
    split: str
    loss: float
    accuracy: float


@dataclass(frozen=True)
class TrainResult:
    params: ParamVector
    curves: tuple[CurvePoint, ...]

    def final(self, split: str) -> CurvePoint:
        points = [p for p in self.curves if p.split == split]
        if not points:
            raise DomainError(f"no curve recorded for split {split!r}")
        return points[-1]


def accuracy(spec: ModelSpec, params: ParamVector, xs: np.ndarray, ys: np.ndarray) -> float:
    logits = forward_batch(spec, params, xs)
    return float((np.argmax(logits, axis=1) == np.asarray(ys)).mean())


def _fit(
    spec: ModelSpec,
    start: ParamVector,
    train_x: np.ndarray,
    train_y: np.ndarray,
    cfg: TrainConfig,
    eval_splits: dict[str, tuple[np.ndarray, np.ndarray]],
) -> TrainResult:
    values = start.values.copy()
    index = start.index
    velocity = np.zeros_like(values)
    lr = np.float32(cfg.learning_rate)
    n = len(train_x)
    curves: list[CurvePoint] = []

    for epoch in range(1, cfg.epochs + 1):
        order = philox_rng(cfg.seed, _SHUFFLE_TAG, epoch).permutation(n)
        batch_losses: list[float] = []
        params = ParamVector(values, index)
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            xb, yb = train_x[batch], train_y[batch]
            # Divergence shows up as overflow before the finiteness check.
            with np.errstate(over="ignore", invalid="ignore"):
                loss = cross_entropy(spec, params, xb, yb)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"loss diverged at epoch {epoch}; try a smaller learning_rate"
                )
            batch_losses.append(loss)
            grad = batch_gradient(spec, params, xb, yb)
            if cfg.optimizer == "sgd_momentum":
                velocity = np.float32(_MOMENTUM) * velocity + grad.values
                step = velocity
            else:
                step = grad.values
            values = values - lr * step
            params = ParamVector(values, index)
        curves.append(
            CurvePoint(epoch, "train", float(np.mean(batch_losses)),
                       accuracy(spec, params, train_x, train_y))
        )
        for split, (xs, ys) in eval_splits.items():
            curves.append(
                CurvePoint(epoch, split, cross_entropy(spec, params, xs, ys),
                           accuracy(spec, params, xs, ys))
            )
    return TrainResult(ParamVector(values, index), tuple(curves))


def pretrain(spec: ModelSpec, suite: TaskSuite, cfg: TrainConfig) -> TrainResult:
    """Train the shared base model on the union of all task train splits."""
    train_x = np.concatenate([t.train_x for t in suite.tasks])
    train_y = np.concatenate([t.train_y for t in suite.tasks])
    test_x = np.concatenate([t.test_x for t in suite.tasks])
    test_y = np.concatenate([t.test_y for t in suite.tasks])
    start = init_params(spec, cfg.seed)
    return _fit(spec, start, train_x, train_y, cfg, {"union_test": (test_x, test_y)})


def finetune(
    spec: ModelSpec, base: ParamVector, task: TaskDataset, cfg: TrainConfig
) -> TrainResult:
    """Specialize a copy of the base model on a single task."""
    if base.index != spec.param_index():
        raise DomainError("base parameters do not match the model spec")
    return _fit(
        spec, base, task.train_x, task.train_y, cfg,
        {"test": (task.test_x, task.test_y)},
    )


def write_curves_csv(path: str | Path, curves: tuple[CurvePoint, ...]) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "accuracy"])
        for point in curves:
            writer.writerow(
                [point.epoch, point.split, f"{point.loss:.6f}", f"{point.accuracy:.6f}"]
            )
