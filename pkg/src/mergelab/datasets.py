"""Deterministic synthetic multi-task classification suites.

Each task owns c Gaussian clusters placed around a task anchor; anchors sit
on mutually orthogonal directions so tasks occupy distinct regions of input
space. All tasks share one set of class offsets relative to their anchor but
label them under a per-task cyclic shift, so expert output heads genuinely
disagree while per-task classification stays easy. Cross-task cluster
centers are kept at least ``separation_sigmas`` noise units apart: 6 sigma
(the default) gives disjoint task supports, 3 sigma gives the overlapping
"conflict" variant where task regions mix and samples become ambiguous
without task knowledge.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArtifactError, DomainError, GenerationError
from .model import philox_rng

CLUSTER_SIGMA = 0.5
# Class centers inside one task always stay >= 6 sigma apart so per-task
# experts remain accurate even when task regions overlap.
_INTRA_SEPARATION_SIGMAS = 6.0
_SUITE_TAG = 0x5EED
_FARFIELD_TAG = 0xFA12
_MAX_DRAW_ATTEMPTS = 20_000


@dataclass(frozen=True)
class TaskDataset:
    """Train/test splits for one task; labels index the shared class set."""

    task_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def test_size(self) -> int:
        return int(len(self.test_y))


@dataclass(frozen=True)
class TaskSuite:
    """T tasks sharing input dimension and class count, fully seed-determined."""

    tasks: tuple[TaskDataset, ...]
    num_tasks: int
    input_dim: int
    num_classes: int
    seed: int
    sigma: float
    separation_sigmas: float
    centers: np.ndarray  # (T, c, d) float64 cluster centers
    probe_accuracy: tuple[float, ...]


def nearest_centroid_accuracy(
    train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray
) -> float:
    """Accuracy of the centroid classifier fit on train and scored on test."""
    labels = np.unique(train_y)
    centroids = np.stack([train_x[train_y == lbl].mean(axis=0) for lbl in labels])
    dists = np.linalg.norm(test_x[:, None, :] - centroids[None, :, :], axis=2)
    predicted = labels[np.argmin(dists, axis=1)]
    return float((predicted == test_y).mean())


def _draw_class_offsets(
    rng: np.random.Generator, num_classes: int, input_dim: int, intra_min: float
) -> list[np.ndarray]:
    """Rejection-sample the shared class offsets inside a fixed-radius ball."""
    offsets: list[np.ndarray] = []
    radius = _INTRA_SEPARATION_SIGMAS * CLUSTER_SIGMA
    for _ in range(num_classes):
        for _ in range(_MAX_DRAW_ATTEMPTS):
            direction = rng.normal(size=input_dim)
            direction /= np.linalg.norm(direction)
            candidate = direction * radius * rng.uniform(0.0, 1.0) ** (1.0 / input_dim)
            if offsets and min(np.linalg.norm(candidate - o) for o in offsets) < intra_min:
                continue
            offsets.append(candidate)
            break
        else:
            raise GenerationError(
                "could not place separated class offsets; "
                "increase input_dim or reduce classes"
            )
    return offsets


def _check_cross_floor(centers: np.ndarray, cross_min: float) -> None:
    num_tasks = centers.shape[0]
    for i in range(num_tasks):
        for j in range(i + 1, num_tasks):
            diff = centers[i][:, None, :] - centers[j][None, :, :]
            if float(np.linalg.norm(diff, axis=2).min()) < cross_min:
                raise GenerationError(
                    "cross-task center separation violated; "
                    "increase input_dim or separation_sigmas"
                )


def generate_suite(
    num_tasks: int,
    input_dim: int,
    num_classes: int,
    n_train: int,
    n_test: int,
    seed: int,
    separation_sigmas: float = 6.0,
) -> TaskSuite:
    """Build T synthetic tasks of c Gaussian clusters each, seed-determined.

    Raises GenerationError when the requested geometry cannot be realized or
    when a nearest-centroid probe scores below 99% on any task.
    """
    if num_tasks < 2:
        raise DomainError("num_tasks must be >= 2")
    if input_dim < 2:
        raise DomainError("input_dim must be >= 2")
    if not 2 <= num_classes <= 255:
        raise DomainError("num_classes must be in [2, 255]")
    if n_train < num_classes or n_test < num_classes:
        raise DomainError("need at least one sample per class in each split")
    if separation_sigmas <= 0:
        raise DomainError("separation_sigmas must be positive")
    if num_tasks > input_dim:
        raise GenerationError(
            f"cannot give {num_tasks} tasks distinct regions in {input_dim} dims; "
            "increase input_dim"
        )

    rng = philox_rng(seed, _SUITE_TAG)
    sigma = CLUSTER_SIGMA
    intra_min = _INTRA_SEPARATION_SIGMAS * sigma
    cross_min = separation_sigmas * sigma
    # Anchor spacing collapses steeply with the separation setting: at 6
    # sigma the task regions are disjoint with a comfortable margin, at 3
    # sigma matching clusters of different tasks sit near the cross floor,
    # close enough that samples are ambiguous without task knowledge.
    radius = _INTRA_SEPARATION_SIGMAS * sigma
    anchor_distance = cross_min + 2.0 * radius * (separation_sigmas / 6.0) ** 4
    rho = anchor_distance / np.sqrt(2.0)

    gauss = rng.normal(size=(input_dim, num_tasks))
    q, _ = np.linalg.qr(gauss)
    anchors = rho * q.T  # (T, d), pairwise distance rho * sqrt(2)

    centers: np.ndarray | None = None
    for _ in range(50):
        offsets = _draw_class_offsets(rng, num_classes, input_dim, intra_min)
        candidate = np.stack([np.stack([a + o for o in offsets]) for a in anchors])
        try:
            _check_cross_floor(candidate, cross_min)
        except GenerationError:
            continue
        centers = candidate
        break
    if centers is None:
        raise GenerationError(
            "cross-task center separation not attainable; increase input_dim"
        )

    tasks: list[TaskDataset] = []
    probe_acc: list[float] = []
    for t in range(num_tasks):
        xs_train, ys_train = _sample_split(rng, centers[t], t, n_train, sigma)
        xs_test, ys_test = _sample_split(rng, centers[t], t, n_test, sigma)
        task = TaskDataset(t, xs_train, ys_train, xs_test, ys_test)
        acc = nearest_centroid_accuracy(xs_train, ys_train, xs_test, ys_test)
        if acc < 0.99:
            raise GenerationError(
                f"task {t} linear probe accuracy {acc:.4f} < 0.99; "
                "increase input_dim or separation"
            )
        probe_acc.append(acc)
        tasks.append(task)

    return TaskSuite(
        tasks=tuple(tasks),
        num_tasks=num_tasks,
        input_dim=input_dim,
        num_classes=num_classes,
        seed=seed,
        sigma=sigma,
        separation_sigmas=separation_sigmas,
        centers=centers,
        probe_accuracy=tuple(probe_acc),
    )


def _sample_split(
    rng: np.random.Generator, centers: np.ndarray, task_id: int, n: int, sigma: float
) -> tuple[np.ndarray, np.ndarray]:
    num_classes = len(centers)
    counts = [n // num_classes] * num_classes
    for k in range(n % num_classes):
        counts[k] += 1
    xs_parts = []
    ys_parts = []
    for k, center in enumerate(centers):
        xs_parts.append(rng.normal(loc=center, scale=sigma, size=(counts[k], len(center))))
        # Cyclic label shift: the cluster at shared offset k answers
        # differently in every task, so merged output heads must disagree.
        ys_parts.append(np.full(counts[k], (k + task_id) % num_classes, dtype=np.int64))
    xs = np.concatenate(xs_parts).astype(np.float32)
    ys = np.concatenate(ys_parts)
    order = rng.permutation(n)
    return xs[order], ys[order]


def min_cross_task_center_distance(suite: TaskSuite) -> float:
    best = np.inf
    for i in range(suite.num_tasks):
        for j in range(i + 1, suite.num_tasks):
            diff = suite.centers[i][:, None, :] - suite.centers[j][None, :, :]
            best = min(best, float(np.linalg.norm(diff, axis=2).min()))
    return best


def far_field_samples(suite: TaskSuite, n: int) -> np.ndarray:
    """Gaussian samples on a shell outside every task support."""
    rng = philox_rng(suite.seed, _FARFIELD_TAG)
    radius = float(np.linalg.norm(suite.centers.reshape(-1, suite.input_dim), axis=1).max())
    radius += 12.0 * suite.sigma
    directions = rng.normal(size=(n, suite.input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    noise = rng.normal(scale=suite.sigma, size=(n, suite.input_dim))
    return (directions * radius + noise).astype(np.float32)


# ---------------------------------------------------------------------------
# On-disk format: suite/<seed>/manifest.json plus per-task raw splits.


def _suite_dir(root: str | Path, seed: int) -> Path:
    return Path(root) / "suite" / str(seed)


def save_suite(suite: TaskSuite, root: str | Path) -> Path:
    base = _suite_dir(root, suite.seed)
    base.mkdir(parents=True, exist_ok=True)
    manifest = {
        "num_tasks": suite.num_tasks,
        "input_dim": suite.input_dim,
        "num_classes": suite.num_classes,
        "seed": suite.seed,
        "sigma": suite.sigma,
        "separation_sigmas": suite.separation_sigmas,
        "n_train": int(len(suite.tasks[0].train_y)),
        "n_test": int(len(suite.tasks[0].test_y)),
        "centers": suite.centers.tolist(),
        "probe_accuracy": list(suite.probe_accuracy),
        "format": {"inputs": "<f4", "labels": "u1"},
    }
    (base / "manifest.json").write_bytes(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    )
    for task in suite.tasks:
        for split, xs, ys in (
            ("train", task.train_x, task.train_y),
            ("test", task.test_x, task.test_y),
        ):
            split_dir = base / f"task{task.task_id}" / split
            split_dir.mkdir(parents=True, exist_ok=True)
            (split_dir / "inputs.bin").write_bytes(xs.astype("<f4").tobytes())
            (split_dir / "labels.bin").write_bytes(ys.astype(np.uint8).tobytes())
    return base


def load_suite(root: str | Path, seed: int) -> TaskSuite:
    base = _suite_dir(root, seed)
    manifest_path = base / "manifest.json"
    if not manifest_path.exists():
        raise ArtifactError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    d = int(manifest["input_dim"])
    tasks = []
    for t in range(int(manifest["num_tasks"])):
        splits = {}
        for split in ("train", "test"):
            split_dir = base / f"task{t}" / split
            xs = np.frombuffer((split_dir / "inputs.bin").read_bytes(), dtype="<f4")
            ys = np.frombuffer((split_dir / "labels.bin").read_bytes(), dtype=np.uint8)
            splits[split] = (xs.reshape(-1, d).astype(np.float32), ys.astype(np.int64))
        tasks.append(TaskDataset(t, *splits["train"], *splits["test"]))
    return TaskSuite(
        tasks=tuple(tasks),
        num_tasks=int(manifest["num_tasks"]),
        input_dim=d,
        num_classes=int(manifest["num_classes"]),
        seed=int(manifest["seed"]),
        sigma=float(manifest["sigma"]),
        separation_sigmas=float(manifest["separation_sigmas"]),
        centers=np.asarray(manifest["centers"], dtype=np.float64),
        probe_accuracy=tuple(float(a) for a in manifest["probe_accuracy"]),
    )
