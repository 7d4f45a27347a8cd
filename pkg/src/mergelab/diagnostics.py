"""Measurement instruments for merged models.

acc@k asks how often the merged model's layer-l representation of a task-i
sample ranks expert i within the k nearest experts; representation bias is
the mean final-layer l1 gap to the matching expert; the disentanglement
residual checks how closely the jointly-merged model tracks the single-task
merge on each task's own support.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ActivationVector, ParamVector, TaskVector, l1_distance, l2_distance
from .datasets import TaskSuite, far_field_samples
from .errors import DomainError, StructuralError
from .merging import task_arithmetic
from .model import ModelSpec, forward_values
from .se_merging import (
    comparison_models,
    remerge_into,
    report_from_distances,
    representation_distances,
)


@dataclass(frozen=True)
class AccAtKReport:
    """acc@k values keyed by (task, layer, k) plus the raw per-sample ranks."""

    accuracies: dict[tuple[int, int, int], float]
    ranks: dict[tuple[int, int], tuple[int, ...]]
    scaling: float

    def acc(self, task: int, layer: int, k: int) -> float:
        return self.accuracies[(task, layer, k)]


@dataclass(frozen=True)
class BiasReport:
    """Per-task mean final-layer l1 bias for each merge configuration."""

    per_config: dict[str, dict[int, float]]


@dataclass(frozen=True)
class DisentanglementReport:
    per_task_residual: dict[int, float]
    per_task_ratio: dict[int, float]
    alphas: tuple[float, ...]
    far_field_residual: float
    far_field_ratio: float


def _rank_of_task(distances: Sequence[float], task: int) -> int:
    """1-based position of the task's distance after a stable ascending sort."""
    order = np.argsort(np.asarray(distances), kind="stable")
    return int(np.nonzero(order == task)[0][0]) + 1


def acc_at_k(
    spec: ModelSpec,
    suite: TaskSuite,
    theta_pt: ParamVector,
    taus: Sequence[TaskVector],
    scaling: float = 0.3,
    layers: int | Sequence[int] | None = None,
    ks: int | Sequence[int] | None = None,
    metric: str = "l2",
) -> AccAtKReport:
    """Rank each task's expert among representation distances to the merged model.

    ``layers``/``ks`` accept a scalar or a sweep; defaults are every layer and
    every k in [1, T]. Ties rank by ascending task index.
    """
    if len(taus) != suite.num_tasks:
        raise StructuralError(
            f"suite has {suite.num_tasks} tasks but {len(taus)} task vectors given"
        )
    layer_list = _as_list(layers, default=list(range(1, spec.depth + 1)))
    k_list = _as_list(ks, default=list(range(1, suite.num_tasks + 1)))
    for k in k_list:
        if not 1 <= k <= suite.num_tasks:
            raise DomainError(f"k={k} out of range [1, {suite.num_tasks}]")
    for l in layer_list:
        if not 1 <= l <= spec.depth:
            raise DomainError(f"layer {l} out of range [1, {spec.depth}]")

    theta_merged = task_arithmetic(theta_pt, taus, scaling)
    expert_values = [e.values for e in comparison_models(theta_pt, taus, scaling)]

    ranks: dict[tuple[int, int], list[int]] = {
        (task.task_id, l): [] for task in suite.tasks for l in layer_list
    }
    for task in suite.tasks:
        for k_sample in range(task.test_size):
            per_layer = representation_distances(
                spec, theta_merged.values, expert_values,
                task.test_x[k_sample], layer_list, metric,
            )
            for l in layer_list:
                ranks[(task.task_id, l)].append(_rank_of_task(per_layer[l], task.task_id))

    accuracies: dict[tuple[int, int, int], float] = {}
    for (task_id, l), rk in ranks.items():
        arr = np.asarray(rk)
        for k in k_list:
            accuracies[(task_id, l, k)] = float((arr <= k).mean())
    return AccAtKReport(
        accuracies=accuracies,
        ranks={key: tuple(v) for key, v in ranks.items()},
        scaling=scaling,
    )


def _as_list(value: int | Sequence[int] | None, default: list[int]) -> list[int]:
    if value is None:
        return default
    if isinstance(value, int):
        return [value]
    return [int(v) for v in value]


def representation_bias(
    spec: ModelSpec,
    suite: TaskSuite,
    merged: ParamVector,
    theta_pt: ParamVector,
    taus: Sequence[TaskVector],
    scaling: float,
) -> dict[int, float]:
    """Mean final-layer l1 distance between a fixed merged model and each
    task's comparison model over that task's test split."""
    experts = comparison_models(theta_pt, taus, scaling)
    depth = spec.depth
    biases: dict[int, float] = {}
    for task in suite.tasks:
        if task.test_size == 0:
            raise DomainError(f"task {task.task_id} has no test samples")
        expert_values = experts[task.task_id].values
        total = 0.0
        for k in range(task.test_size):
            x = task.test_x[k]
            merged_logits = forward_values(spec, merged.values, x)[depth]
            expert_logits = forward_values(spec, expert_values, x)[depth]
            total += l1_distance(
                ActivationVector(merged_logits, depth), ActivationVector(expert_logits, depth)
            )
        biases[task.task_id] = total / task.test_size
    return biases


def se_representation_bias(
    spec: ModelSpec,
    suite: TaskSuite,
    theta_pt: ParamVector,
    taus: Sequence[TaskVector],
    scaling: float,
    layer: int,
    metric: str = "l2",
) -> tuple[dict[int, float], dict[int, float]]:
    """Bias of the per-sample rescaled merge instead of a fixed merged model.

    Returns two variants: the corresponding fine-tuned model taken at the
    coefficient the rescaled merge itself assigns to the task (so the number
    isolates what the other tasks' vectors contribute), and at the fixed
    static coefficient.
    """
    theta_merged = task_arithmetic(theta_pt, taus, scaling)
    experts = comparison_models(theta_pt, taus, scaling)
    expert_values = [e.values for e in experts]
    depth = spec.depth
    scratch = np.empty_like(theta_merged.values)
    own_scratch = np.empty_like(theta_merged.values)
    sample_ref: dict[int, float] = {}
    fixed_ref: dict[int, float] = {}
    for task in suite.tasks:
        total_sample = 0.0
        total_fixed = 0.0
        for k in range(task.test_size):
            x = task.test_x[k]
            distances = representation_distances(
                spec, theta_merged.values, expert_values, x, [layer], metric
            )[layer]
            report = report_from_distances(distances, suite.num_tasks, scaling, layer)
            values = remerge_into(
                scratch, theta_merged.values, taus, report.coefficients, scaling
            )
            se_logits = ActivationVector(forward_values(spec, values, x)[depth], depth)
            own_scratch[...] = theta_pt.values
            own_scratch += (
                np.float32(report.coefficients[task.task_id])
                * taus[task.task_id].delta.values
            )
            own_logits = forward_values(spec, own_scratch, x)[depth]
            total_sample += l1_distance(se_logits, ActivationVector(own_logits, depth))
            fixed_logits = forward_values(spec, expert_values[task.task_id], x)[depth]
            total_fixed += l1_distance(se_logits, ActivationVector(fixed_logits, depth))
        sample_ref[task.task_id] = total_sample / task.test_size
        fixed_ref[task.task_id] = total_fixed / task.test_size
    return sample_ref, fixed_ref


def bias_comparison(
    spec: ModelSpec,
    suite: TaskSuite,
    theta_pt: ParamVector,
    taus: Sequence[TaskVector],
    scaling: float,
    layer: int,
    metric: str = "l2",
) -> BiasReport:
    """Static task-arithmetic bias next to the per-sample rescaled bias."""
    static = representation_bias(
        spec, suite, task_arithmetic(theta_pt, taus, scaling), theta_pt, taus, scaling
    )
    sample_ref, fixed_ref = se_representation_bias(
        spec, suite, theta_pt, taus, scaling, layer, metric
    )
    return BiasReport(
        per_config={
            "task_arithmetic": static,
            "se_merging": sample_ref,
            "se_merging_fixed_reference": fixed_ref,
        }
    )


def disentanglement_residual(
    spec: ModelSpec,
    suite: TaskSuite,
    theta_pt: ParamVector,
    taus: Sequence[TaskVector],
    alphas: Sequence[float],
    n_far_field: int = 128,
) -> DisentanglementReport:
    """How far the joint merge drifts from each single-task merge on-support.

    Per task i, the residual averages the l2 gap between logits of
    base + sum_j alpha_j tau_j and base + alpha_i tau_i over task i's test
    split; the ratio divides by the mean single-task logit norm. Off-support
    behavior is probed with far-field samples against the plain base model.
    """
    if len(alphas) != len(taus):
        raise StructuralError(f"got {len(alphas)} alphas for {len(taus)} task vectors")
    joint = task_arithmetic(theta_pt, taus, list(alphas))
    depth = spec.depth
    per_task_residual: dict[int, float] = {}
    per_task_ratio: dict[int, float] = {}
    for task in suite.tasks:
        single = task_arithmetic(theta_pt, [taus[task.task_id]], [alphas[task.task_id]])
        total = 0.0
        norm_total = 0.0
        for k in range(task.test_size):
            x = task.test_x[k]
            joint_logits = forward_values(spec, joint.values, x)[depth]
            single_logits = forward_values(spec, single.values, x)[depth]
            total += l2_distance(
                ActivationVector(joint_logits, depth), ActivationVector(single_logits, depth)
            )
            norm_total += float(np.linalg.norm(single_logits.astype(np.float64)))
        residual = total / task.test_size
        mean_norm = norm_total / task.test_size
        per_task_residual[task.task_id] = residual
        per_task_ratio[task.task_id] = residual / mean_norm if mean_norm > 0 else 0.0

    far = far_field_samples(suite, n_far_field)
    far_total = 0.0
    far_norm = 0.0
    for x in far:
        joint_logits = forward_values(spec, joint.values, x)[depth]
        base_logits = forward_values(spec, theta_pt.values, x)[depth]
        far_total += l2_distance(
            ActivationVector(joint_logits, depth), ActivationVector(base_logits, depth)
        )
        far_norm += float(np.linalg.norm(base_logits.astype(np.float64)))
    far_residual = far_total / len(far)
    return DisentanglementReport(
        per_task_residual=per_task_residual,
        per_task_ratio=per_task_ratio,
        alphas=tuple(float(a) for a in alphas),
        far_field_residual=far_residual,
        far_field_ratio=far_residual / (far_norm / len(far)) if far_norm > 0 else 0.0,
    )


def export_representations(
    spec: ModelSpec,
    suite: TaskSuite,
    models: Sequence[tuple[str, ParamVector]],
    layer: int,
    path: str | Path,
) -> int:
    """Dump layer-l representations of every test sample under every model.

    Values print with 9 significant digits, enough to reproduce the float32
    vectors bit-exactly on parse. Returns the number of data rows written.
    """
    if not 1 <= layer <= spec.depth:
        raise DomainError(f"layer {layer} out of range [1, {spec.depth}]")
    width = spec.layer_widths[layer]
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = 0
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model_name", "task_id", "sample_id", *[f"v_{i + 1}" for i in range(width)]]
        )
        for name, params in models:
            for task in suite.tasks:
                for k in range(task.test_size):
                    rep = forward_values(
                        spec, params.values, task.test_x[k], frozenset([layer])
                    )[layer]
                    writer.writerow(
                        [name, task.task_id, f"task{task.task_id}/{k:05d}"]
                        + [format(float(v), ".9g") for v in rep]
                    )
                    rows += 1
    return rows
