"""Static merging: task-vector extraction, weight averaging, task addition,
and a trim/elect/merge scheme that resolves sign conflicts between experts.

Accumulation order is fixed to ascending task index so merged checkpoints
are reproducible bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ParamVector, TaskVector, axpy, index_fingerprint, require_same_index, scale
from .errors import DomainError, StructuralError

MERGE_METHODS = ("average", "task_arithmetic", "ties")
DEFAULT_LAMBDA = 0.3


@dataclass(frozen=True)
class MergeConfig:
    method: str = "task_arithmetic"
    scaling: float = DEFAULT_LAMBDA
    per_task_scaling: tuple[float, ...] | None = None
    ties_density: float = 1.0

    def __post_init__(self) -> None:
        if self.method not in MERGE_METHODS:
            raise DomainError(f"method must be one of {MERGE_METHODS}")
        if self.scaling < 0:
            raise DomainError("scaling coefficient must be >= 0")
        if self.per_task_scaling is not None and any(s < 0 for s in self.per_task_scaling):
            raise DomainError("per-task scaling coefficients must be >= 0")
        if not 0.0 < self.ties_density <= 1.0:
            raise DomainError("ties_density must lie in (0, 1]")


def task_vector(theta_i: ParamVector, theta_pt: ParamVector) -> TaskVector:
    """Delta of a fine-tuned model against its base, fingerprinted to the base index."""
    require_same_index(theta_i, theta_pt)
    delta = ParamVector(theta_i.values - theta_pt.values, theta_i.index)
    return TaskVector(delta, index_fingerprint(theta_pt.index))


def weight_average(models: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Weighted sum of whole models, accumulated in input order."""
    if len(models) == 0:
        raise DomainError("weight_average needs at least one model")
    if len(weights) != len(models):
        raise StructuralError(
            f"got {len(weights)} weights for {len(models)} models"
        )
    for m in models[1:]:
        require_same_index(models[0], m)
    acc = scale(weights[0], models[0])
    for w, m in zip(weights[1:], models[1:]):
        acc = axpy(w, m, acc)
    return acc


def _check_task_vectors(theta_pt: ParamVector, taus: Sequence[TaskVector]) -> None:
    base_print = index_fingerprint(theta_pt.index)
    for i, tau in enumerate(taus):
        if tau.base_fingerprint != base_print:
            raise StructuralError(
                f"task vector {i} was extracted against a different base "
                f"(fingerprint {tau.base_fingerprint[:12]} != {base_print[:12]})"
            )
        if tau.delta.index != theta_pt.index:
            raise StructuralError(f"task vector {i} index does not match the base model")


def task_arithmetic(
    theta_pt: ParamVector,
    taus: Sequence[TaskVector],
    scaling: float | Sequence[float],
) -> ParamVector:
    """Base plus scaled task vectors; a scalar coefficient broadcasts to every task."""
    _check_task_vectors(theta_pt, taus)
    if isinstance(scaling, (int, float)):
        lambdas = [float(scaling)] * len(taus)
    else:
        lambdas = [float(s) for s in scaling]
        if len(lambdas) != len(taus):
            raise StructuralError(
                f"got {len(lambdas)} coefficients for {len(taus)} task vectors"
            )
    acc = theta_pt
    for lam, tau in zip(lambdas, taus):
        acc = axpy(lam, tau.delta, acc)
    return acc


def ties_merge(
    theta_pt: ParamVector,
    taus: Sequence[TaskVector],
    scaling: float = DEFAULT_LAMBDA,
    density: float = 1.0,
) -> ParamVector:
    """Trim each task vector to its largest entries, elect a per-coordinate
    sign by summed magnitude, then average the sign-matching survivors.

    Sign ties elect positive; coordinates with no surviving entry merge to 0.
    """
    if not 0.0 < density <= 1.0:
        raise DomainError("density must lie in (0, 1]")
    _check_task_vectors(theta_pt, taus)
    if len(taus) == 0:
        raise DomainError("ties_merge needs at least one task vector")

    p = theta_pt.size
    stacked = np.stack([tau.delta.values.astype(np.float64) for tau in taus])

    keep = math.ceil(density * p)
    if keep < p:
        trimmed = np.zeros_like(stacked)
        for row in range(len(taus)):
            # Stable order on (-|v|, position) keeps trimming deterministic.
            order = np.argsort(-np.abs(stacked[row]), kind="stable")[:keep]
            trimmed[row, order] = stacked[row, order]
        stacked = trimmed

    positive_mass = np.where(stacked > 0, stacked, 0.0).sum(axis=0)
    negative_mass = np.where(stacked < 0, -stacked, 0.0).sum(axis=0)
    elected_positive = positive_mass >= negative_mass

    matches = np.where(elected_positive[None, :], stacked > 0, stacked < 0)
    counts = matches.sum(axis=0)
    sums = np.where(matches, stacked, 0.0).sum(axis=0)
    merged = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)

    merged_pv = ParamVector(merged.astype(np.float32), theta_pt.index)
    return axpy(scaling, merged_pv, theta_pt)


def merge(
    theta_pt: ParamVector,
    models: Sequence[ParamVector],
    taus: Sequence[TaskVector],
    cfg: MergeConfig,
) -> ParamVector:
    """Dispatch a merge config against prepared models/task vectors."""
    if cfg.method == "average":
        weights = cfg.per_task_scaling or [1.0 / len(models)] * len(models)
        return weight_average(models, weights)
    coeff: float | Sequence[float] = cfg.per_task_scaling or cfg.scaling
    if cfg.method == "task_arithmetic":
        return task_arithmetic(theta_pt, taus, coeff)
    return ties_merge(theta_pt, taus, cfg.scaling, cfg.ties_density)
