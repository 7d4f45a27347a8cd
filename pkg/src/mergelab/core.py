"""Flat parameter-vector and activation-vector arithmetic.

Parameters live in a single float32 array with a named-tensor index; all
scalar reductions (distances, normalizations) accumulate in float64.
Every function here is pure, so concurrent callers may share inputs freely.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, StructuralError


@dataclass(frozen=True)
class TensorSlot:
    """One named tensor inside a flat parameter array."""

    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def end(self) -> int:
        return self.offset + self.size


Index = tuple[TensorSlot, ...]


def index_fingerprint(index: Index) -> str:
    """Content hash of a tensor index (names, offsets, shapes only)."""
    payload = [[slot.name, slot.offset, list(slot.shape)] for slot in index]
    blob = json.dumps(payload, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _check_index(values: np.ndarray, index: Index) -> None:
    expected = 0
    seen = set()
    for slot in index:
        if slot.name in seen:
            raise StructuralError(f"duplicate tensor name {slot.name!r} in index")
        seen.add(slot.name)
        if slot.offset != expected:
            raise StructuralError(
                f"tensor {slot.name!r} starts at offset {slot.offset}, expected {expected}"
            )
        expected = slot.end
    if expected != values.size:
        raise StructuralError(
            f"index covers {expected} values but array holds {values.size}"
        )


@dataclass(frozen=True)
class ParamVector:
    """Flat float32 parameter store with a named-tensor index.

    Treated as immutable: operations return new vectors instead of mutating.
    """

    values: np.ndarray
    index: Index

    def __post_init__(self) -> None:
        if self.values.ndim != 1 or self.values.dtype != np.float32:
            raise StructuralError("ParamVector values must be a 1-D float32 array")
        _check_index(self.values, self.index)
        if not np.all(np.isfinite(self.values)):
            raise StructuralError("ParamVector contains non-finite values")

    @property
    def size(self) -> int:
        return int(self.values.size)

    def tensor(self, name: str) -> np.ndarray:
        """Shaped read view of one named tensor."""
        for slot in self.index:
            if slot.name == name:
                return self.values[slot.offset : slot.end].reshape(slot.shape)
        raise StructuralError(f"no tensor named {name!r} in index")

    def fingerprint(self) -> str:
        return index_fingerprint(self.index)


@dataclass(frozen=True)
class TaskVector:
    """Parameter delta of a fine-tuned model relative to its base."""

    delta: ParamVector
    base_fingerprint: str


@dataclass(frozen=True)
class ActivationVector:
    """Per-layer activation values for one sample."""

    values: np.ndarray
    layer: int

    def __post_init__(self) -> None:
        if self.values.ndim != 1:
            raise StructuralError("ActivationVector values must be 1-D")


def _first_index_difference(a: Index, b: Index) -> str:
    for sa, sb in zip(a, b):
        if sa != sb:
            return sa.name if sa.name == sb.name else f"{sa.name!r} vs {sb.name!r}"
    return a[len(b)].name if len(a) > len(b) else b[len(a)].name


def require_same_index(x: ParamVector, y: ParamVector) -> None:
    if x.index != y.index:
        raise StructuralError(
            f"parameter index mismatch at tensor {_first_index_difference(x.index, y.index)}"
        )


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Element-wise ``a * x + y`` preserving the shared index."""
    require_same_index(x, y)
    return ParamVector(np.float32(a) * x.values + y.values, x.index)


def scale(a: float, x: ParamVector) -> ParamVector:
    """Element-wise ``a * x``."""
    return ParamVector(np.float32(a) * x.values, x.index)


def _check_lengths(a: ActivationVector, b: ActivationVector) -> None:
    if a.values.size != b.values.size:
        raise StructuralError(
            f"activation length mismatch: {a.values.size} vs {b.values.size}"
        )


def l2_distance(a: ActivationVector, b: ActivationVector) -> float:
    """Euclidean distance, accumulated in float64."""
    _check_lengths(a, b)
    diff = a.values.astype(np.float64) - b.values.astype(np.float64)
    return float(np.sqrt(np.dot(diff, diff)))


def l1_distance(a: ActivationVector, b: ActivationVector) -> float:
    """Sum of absolute differences, accumulated in float64."""
    _check_lengths(a, b)
    diff = a.values.astype(np.float64) - b.values.astype(np.float64)
    return float(np.abs(diff).sum())


def cosine_distance(a: ActivationVector, b: ActivationVector) -> float:
    """1 - cosine similarity, in [0, 2]; requires nonzero norms."""
    _check_lengths(a, b)
    av = a.values.astype(np.float64)
    bv = b.values.astype(np.float64)
    aa = float(np.dot(av, av))
    bb = float(np.dot(bv, bv))
    if aa == 0.0 or bb == 0.0:
        raise DomainError("cosine_distance undefined for zero-norm vectors")
    # sqrt(aa * bb) keeps d(a, a) == 0 exact: the ratio is then dot/dot == 1.
    value = 1.0 - float(np.dot(av, bv)) / math.sqrt(aa * bb)
    return min(max(value, 0.0), 2.0)


def minmax_normalize(values: Sequence[float]) -> list[float]:
    """Rescale to [0, 1]; a constant input maps everything to 1.0.

    The degenerate rule keeps the downstream softmax uniform, so the rescaled
    merge collapses to the static one when all similarity scores coincide.
    """
    if len(values) == 0:
        raise DomainError("minmax_normalize requires at least one value")
    vs = [float(v) for v in values]
    lo, hi = min(vs), max(vs)
    if hi == lo:
        return [1.0] * len(vs)
    span = hi - lo
    return [(v - lo) / span for v in vs]


def softmax(values: Sequence[float]) -> list[float]:
    """Numerically stable softmax over a short list of scores."""
    if len(values) == 0:
        raise DomainError("softmax requires at least one value")
    vs = [float(v) for v in values]
    if not all(math.isfinite(v) for v in vs):
        raise DomainError("softmax requires finite inputs")
    hi = max(vs)
    exps = [math.exp(v - hi) for v in vs]
    total = sum(exps)
    return [e / total for e in exps]
