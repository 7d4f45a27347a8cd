"""Per-sample dynamic coefficient rescaling and re-merged inference.

For each sample the merged model's layer-l representation is compared with
each expert's; distances become similarities (d_max - d_t + d_min), are
min-max normalized, softmaxed, and scaled so the coefficients always sum to
T times the static coefficient. The sample is then evaluated under a fresh
merge built from those coefficients.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    ActivationVector,
    ParamVector,
    TaskVector,
    cosine_distance,
    l2_distance,
    minmax_normalize,
    softmax,
)
from .datasets import TaskSuite
from .errors import DomainError, StructuralError
from .merging import task_arithmetic
from .model import ModelSpec, forward_values

DISTANCE_METRICS = ("l2", "cosine")


@dataclass(frozen=True)
class SimilarityReport:
    """Distance-to-coefficient trail for one sample at one layer."""

    distances: tuple[float, ...]
    similarities: tuple[float, ...]
    normalized: tuple[float, ...]
    coefficients: tuple[float, ...]
    predicted_task: int
    layer: int


def rescale_coefficients(
    distances: Sequence[float], num_tasks: int, scaling: float
) -> list[float]:
    """Distance -> similarity -> normalize -> softmax -> scale by T * lambda.

    Smaller distances always earn strictly larger coefficients, and the
    coefficients sum to ``num_tasks * scaling``.
    """
    trail = _coefficient_trail(distances, num_tasks, scaling)
    return list(trail[2])


def _coefficient_trail(
    distances: Sequence[float], num_tasks: int, scaling: float
) -> tuple[list[float], list[float], list[float]]:
    if len(distances) != num_tasks or num_tasks < 1:
        raise DomainError(
            f"expected {num_tasks} distances, got {len(distances)}"
        )
    ds = [float(d) for d in distances]
    if any(d < 0 or not np.isfinite(d) for d in ds):
        raise DomainError("distances must be finite and non-negative")
    d_max, d_min = max(ds), min(ds)
    similarities = [d_max - d + d_min for d in ds]
    normalized = minmax_normalize(similarities)
    weights = softmax(normalized)
    coefficients = [w * num_tasks * scaling for w in weights]
    return similarities, normalized, coefficients


def representation_distances(
    spec: ModelSpec,
    merged_values: np.ndarray,
    expert_values: Sequence[np.ndarray],
    x: np.ndarray,
    layers: Sequence[int],
    metric: str = "l2",
) -> dict[int, list[float]]:
    """Per-layer distances between the merged and expert representations.

    Single shared path: every diagnostic that compares representations calls
    through here, so equal inputs give bitwise-equal distances.
    """
    if metric not in DISTANCE_METRICS:
        raise DomainError(f"metric must be one of {DISTANCE_METRICS}")
    wanted = frozenset(int(l) for l in layers)
    for l in wanted:
        if not 1 <= l <= spec.depth:
            raise DomainError(f"layer {l} out of range [1, {spec.depth}]")
    dist = l2_distance if metric == "l2" else cosine_distance
    merged_reps = forward_values(spec, merged_values, x, wanted)
    out: dict[int, list[float]] = {l: [] for l in sorted(wanted)}
    for values in expert_values:
        expert_reps = forward_values(spec, values, x, wanted)
        for l in sorted(wanted):
            out[l].append(
                dist(ActivationVector(merged_reps[l], l), ActivationVector(expert_reps[l], l))
            )
    return out


def comparison_models(
    theta_pt: ParamVector, taus: Sequence[TaskVector], scaling: float
) -> list[ParamVector]:
    """The per-task models distances are measured against: base + scaling * tau."""
    return [task_arithmetic(theta_pt, [tau], scaling) for tau in taus]


def compute_similarity(
    spec: ModelSpec,
    x: np.ndarray,
    theta_merged: ParamVector,
    theta_pt: ParamVector,
    taus: Sequence[TaskVector],
    scaling: float,
    layer: int,
    metric: str = "l2",
    expert_scale: float | None = None,
) -> SimilarityReport:
    """Full distance-to-coefficient report for one sample.

    ``expert_scale`` overrides the coefficient used to build the comparison
    models (defaults to ``scaling``, i.e. base + lambda * tau).
    """
    if len(taus) < 1:
        raise DomainError("need at least one task vector")
    experts = comparison_models(theta_pt, taus, scaling if expert_scale is None else expert_scale)
    x = np.asarray(x, dtype=np.float32)
    distances = representation_distances(
        spec, theta_merged.values, [e.values for e in experts], x, [layer], metric
    )[layer]
    return report_from_distances(distances, len(taus), scaling, layer)


def report_from_distances(
    distances: Sequence[float], num_tasks: int, scaling: float, layer: int
) -> SimilarityReport:
    similarities, normalized, coefficients = _coefficient_trail(distances, num_tasks, scaling)
    return SimilarityReport(
        distances=tuple(float(d) for d in distances),
        similarities=tuple(similarities),
        normalized=tuple(normalized),
        coefficients=tuple(coefficients),
        predicted_task=int(np.argmin(distances)),
        layer=int(layer),
    )


def remerge_into(
    scratch: np.ndarray,
    merged_values: np.ndarray,
    taus: Sequence[TaskVector],
    coefficients: Sequence[float],
    scaling: float,
) -> np.ndarray:
    """theta_merged + sum_t (lambda_t - lambda) * tau_t, accumulated in task order."""
    scratch[...] = merged_values
    for coeff, tau in zip(coefficients, taus):
        scratch += np.float32(coeff - scaling) * tau.delta.values
    return scratch


def se_infer(
    spec: ModelSpec,
    x: np.ndarray,
    theta_pt: ParamVector,
    taus: Sequence[TaskVector],
    scaling: float,
    layer: int,
    metric: str = "l2",
    expert_scale: float | None = None,
) -> tuple[ActivationVector, SimilarityReport]:
    """Rescale coefficients for one sample and evaluate it under the re-merge."""
    theta_merged = task_arithmetic(theta_pt, taus, scaling)
    report = compute_similarity(
        spec, x, theta_merged, theta_pt, taus, scaling, layer, metric, expert_scale
    )
    scratch = np.empty_like(theta_merged.values)
    remerge_into(scratch, theta_merged.values, taus, report.coefficients, scaling)
    x = np.asarray(x, dtype=np.float32)
    logits = forward_values(spec, scratch, x)[spec.depth]
    return ActivationVector(logits, spec.depth), report


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    true_task: int
    predicted_task: int
    distances: tuple[float, ...]
    coefficients: tuple[float, ...]
    correct: bool


@dataclass(frozen=True)
class SEEvaluation:
    per_task_accuracy: dict[int, float]
    mean_accuracy: float
    task_identification_accuracy: float
    records: tuple[SampleRecord, ...]
    layer: int
    scaling: float


def se_evaluate(
    spec: ModelSpec,
    suite: TaskSuite,
    theta_pt: ParamVector,
    taus: Sequence[TaskVector],
    scaling: float,
    layer: int,
    metric: str = "l2",
    threads: int = 1,
    route_hard: bool = False,
    expert_scale: float | None = None,
) -> SEEvaluation:
    """Per-sample dynamic merging over every task's test split.

    ``route_hard`` is a diagnostic mode that skips the re-merge and answers
    with the nearest comparison model instead.
    """
    if len(taus) != suite.num_tasks:
        raise StructuralError(
            f"suite has {suite.num_tasks} tasks but {len(taus)} task vectors given"
        )
    if not any(t.test_size for t in suite.tasks):
        raise DomainError("suite has no test samples")
    num_tasks = suite.num_tasks
    theta_merged = task_arithmetic(theta_pt, taus, scaling)
    experts = comparison_models(
        theta_pt, taus, scaling if expert_scale is None else expert_scale
    )
    expert_values = [e.values for e in experts]
    jobs = [
        (f"task{task.task_id}/{k:05d}", task.task_id, task.test_x[k], int(task.test_y[k]))
        for task in suite.tasks
        for k in range(task.test_size)
    ]

    def run_chunk(chunk: list[tuple[str, int, np.ndarray, int]]) -> list[SampleRecord]:
        scratch = np.empty_like(theta_merged.values)
        records = []
        for sample_id, true_task, x, y in chunk:
            distances = representation_distances(
                spec, theta_merged.values, expert_values, x, [layer], metric
            )[layer]
            report = report_from_distances(distances, num_tasks, scaling, layer)
            if route_hard:
                logits = forward_values(spec, expert_values[report.predicted_task], x)[spec.depth]
            else:
                values = remerge_into(
                    scratch, theta_merged.values, taus, report.coefficients, scaling
                )
                logits = forward_values(spec, values, x)[spec.depth]
            records.append(
                SampleRecord(
                    sample_id=sample_id,
                    true_task=true_task,
                    predicted_task=report.predicted_task,
                    distances=report.distances,
                    coefficients=report.coefficients,
                    correct=bool(int(np.argmax(logits)) == y),
                )
            )
        return records

    workers = max(1, int(threads))
    if workers == 1:
        records = run_chunk(jobs)
    else:
        step = (len(jobs) + workers - 1) // workers
        chunks = [jobs[i : i + step] for i in range(0, len(jobs), step)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_chunk, chunks))
        records = [r for part in parts for r in part]
    records.sort(key=lambda r: r.sample_id)

    per_task: dict[int, float] = {}
    for task in suite.tasks:
        hits = [r.correct for r in records if r.true_task == task.task_id]
        per_task[task.task_id] = float(np.mean(hits)) if hits else 0.0
    routed = float(np.mean([r.predicted_task == r.true_task for r in records]))
    return SEEvaluation(
        per_task_accuracy=per_task,
        mean_accuracy=float(np.mean(list(per_task.values()))),
        task_identification_accuracy=routed,
        records=tuple(records),
        layer=layer,
        scaling=scaling,
    )


def write_sample_reports_csv(path: str | Path, evaluation: SEEvaluation) -> None:
    """Per-sample report, one row per test sample sorted by sample id."""
    num_tasks = len(evaluation.records[0].distances) if evaluation.records else 0
    header = (
        ["sample_id", "true_task", "predicted_task"]
        + [f"d_{t + 1}" for t in range(num_tasks)]
        + [f"lambda_{t + 1}" for t in range(num_tasks)]
        + ["correct"]
    )
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in evaluation.records:
            writer.writerow(
                [r.sample_id, r.true_task, r.predicted_task]
                + [f"{d:.6f}" for d in r.distances]
                + [f"{c:.6f}" for c in r.coefficients]
                + [int(r.correct)]
            )
