"""Small fully-connected classifier with a traceable forward pass.

Layer numbering is 1-based: layer l maps width[l-1] activations to width[l],
hidden layers apply the configured nonlinearity, and the final layer emits
raw logits. The per-layer outputs are the representations the diagnostics
and dynamic-merging code compare across models.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import ActivationVector, Index, ParamVector, TensorSlot
from .errors import DomainError, StructuralError

ACTIVATIONS = ("relu", "tanh")

# Philox stream tags so parameter init never collides with data or shuffles.
_INIT_TAG = 0x1A17


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: widths [d_0, ..., d_L] plus hidden nonlinearity."""

    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise DomainError("ModelSpec needs at least an input and an output width")
        if any(w < 1 for w in self.layer_widths):
            raise DomainError("every layer width must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"activation must be one of {ACTIVATIONS}")

    @property
    def depth(self) -> int:
        """Number of affine layers L."""
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    def param_count(self) -> int:
        widths = self.layer_widths
        return sum(widths[l - 1] * widths[l] + widths[l] for l in range(1, len(widths)))

    def param_index(self) -> Index:
        slots: list[TensorSlot] = []
        offset = 0
        widths = self.layer_widths
        for l in range(1, len(widths)):
            w_shape = (widths[l - 1], widths[l])
            slots.append(TensorSlot(f"layer{l}.weight", offset, w_shape))
            offset += widths[l - 1] * widths[l]
            slots.append(TensorSlot(f"layer{l}.bias", offset, (widths[l],)))
            offset += widths[l]
        return tuple(slots)


@dataclass(frozen=True)
class RepresentationTrace:
    """Per-layer activation vectors captured for one sample."""

    per_layer: dict[int, ActivationVector]
    sample_id: str = ""


def philox_rng(seed: int, *tags: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream tags); reproducible anywhere."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, sum(tags) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Deterministic init: weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = philox_rng(seed, _INIT_TAG)
    parts: list[np.ndarray] = []
    widths = spec.layer_widths
    for l in range(1, len(widths)):
        fan_in, fan_out = widths[l - 1], widths[l]
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out).astype(np.float32))
        parts.append(np.zeros(fan_out, dtype=np.float32))
    return ParamVector(np.concatenate(parts), spec.param_index())


def _require_matching_params(spec: ModelSpec, params: ParamVector) -> None:
    if params.index != spec.param_index():
        raise StructuralError("parameter index does not match the model spec")


def _as_input(spec: ModelSpec, x: Sequence[float] | np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 1 or arr.size != spec.input_dim:
        raise StructuralError(
            f"input must have length {spec.input_dim}, got shape {arr.shape}"
        )
    return arr


def _layer_views(spec: ModelSpec, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    views = []
    offset = 0
    widths = spec.layer_widths
    for l in range(1, len(widths)):
        n_in, n_out = widths[l - 1], widths[l]
        w = values[offset : offset + n_in * n_out].reshape(n_in, n_out)
        offset += n_in * n_out
        b = values[offset : offset + n_out]
        offset += n_out
        views.append((w, b))
    return views


def _activate(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(z, np.float32(0.0))
    return np.tanh(z)


def forward_values(
    spec: ModelSpec, values: np.ndarray, x: np.ndarray, capture: frozenset[int] | None = None
) -> dict[int, np.ndarray]:
    """Single-sample forward over a raw float32 parameter array.

    Returns the captured layer outputs; always includes the final logits when
    ``capture`` is None. This is the one code path every representation
    comparison goes through, so distances stay bitwise comparable.
    """
    h = x
    captured: dict[int, np.ndarray] = {}
    depth = spec.depth
    for l, (w, b) in enumerate(_layer_views(spec, values), start=1):
        h = h @ w + b
        if l < depth:
            h = _activate(spec, h)
        if capture is None:
            if l == depth:
                captured[l] = h
        elif l in capture:
            captured[l] = h
    return captured


def forward(spec: ModelSpec, params: ParamVector, x: Sequence[float] | np.ndarray) -> ActivationVector:
    """Logits for one sample."""
    _require_matching_params(spec, params)
    xin = _as_input(spec, x)
    logits = forward_values(spec, params.values, xin)[spec.depth]
    return ActivationVector(logits, spec.depth)


def forward_traced(
    spec: ModelSpec,
    params: ParamVector,
    x: Sequence[float] | np.ndarray,
    layers: Iterable[int],
    sample_id: str = "",
) -> RepresentationTrace:
    """Forward pass capturing the requested per-layer representations."""
    _require_matching_params(spec, params)
    wanted = frozenset(int(l) for l in layers)
    for l in wanted:
        if not 1 <= l <= spec.depth:
            raise DomainError(f"layer {l} out of range [1, {spec.depth}]")
    xin = _as_input(spec, x)
    captured = forward_values(spec, params.values, xin, wanted)
    per_layer = {l: ActivationVector(captured[l], l) for l in sorted(wanted)}
    return RepresentationTrace(per_layer, sample_id)


def forward_batch(spec: ModelSpec, params: ParamVector, xs: np.ndarray) -> np.ndarray:
    """Logits for a batch of rows, shape (n, c)."""
    _require_matching_params(spec, params)
    h = np.asarray(xs, dtype=np.float32)
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise StructuralError(f"batch must have shape (n, {spec.input_dim})")
    depth = spec.depth
    for l, (w, b) in enumerate(_layer_views(spec, params.values), start=1):
        h = h @ w + b
        if l < depth:
            h = _activate(spec, h)
    return h


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(spec: ModelSpec, params: ParamVector, xs: np.ndarray, ys: np.ndarray) -> float:
    """Mean cross-entropy of a batch, log-sum-exp evaluated in float64."""
    logits = forward_batch(spec, params, xs).astype(np.float64)
    ys = np.asarray(ys)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(ys)), ys].mean())


def batch_gradient(
    spec: ModelSpec, params: ParamVector, xs: np.ndarray, ys: np.ndarray
) -> ParamVector:
    """Mean-reduced cross-entropy gradient over a batch.

    Backprop runs in float64 so per-entry error stays at cast level; the
    result is stored back at parameter precision.
    """
    _require_matching_params(spec, params)
    xs = np.asarray(xs, dtype=np.float32)
    ys = np.asarray(ys)
    if xs.ndim != 2 or xs.shape[1] != spec.input_dim:
        raise StructuralError(f"batch must have shape (n, {spec.input_dim})")
    if ys.ndim != 1 or len(ys) != len(xs):
        raise StructuralError("labels must be a vector aligned with the batch")
    if np.any(ys < 0) or np.any(ys >= spec.num_classes):
        raise DomainError(f"labels must lie in [0, {spec.num_classes})")

    depth = spec.depth
    views = _layer_views(spec, params.values)
    acts: list[np.ndarray] = [xs.astype(np.float64)]
    h = acts[0]
    for l, (w, b) in enumerate(views, start=1):
        z = h @ w.astype(np.float64) + b.astype(np.float64)
        if l < depth:
            if spec.activation == "relu":
                h = np.maximum(z, 0.0)
            else:
                h = np.tanh(z)
        else:
            h = z
        acts.append(h)

    n = len(xs)
    probs = _softmax_rows(acts[-1])
    grad_z = probs
    grad_z[np.arange(n), ys] -= 1.0
    grad_z /= n

    grad_values = np.empty(params.size, dtype=np.float32)
    grad_views = _layer_views(spec, grad_values)
    for l in range(depth, 0, -1):
        w, _ = views[l - 1]
        gw, gb = grad_views[l - 1]
        gw[...] = (acts[l - 1].T @ grad_z).astype(np.float32)
        gb[...] = grad_z.sum(axis=0).astype(np.float32)
        if l > 1:
            upstream = grad_z @ w.astype(np.float64).T
            h_prev = acts[l - 1]
            if spec.activation == "relu":
                grad_z = upstream * (h_prev > 0.0)
            else:
                grad_z = upstream * (1.0 - h_prev * h_prev)
    return ParamVector(grad_values, spec.param_index())


def backward(
    spec: ModelSpec, params: ParamVector, x: Sequence[float] | np.ndarray, y: int
) -> ParamVector:
    """Cross-entropy gradient for a single labeled sample."""
    if not 0 <= int(y) < spec.num_classes:
        raise DomainError(f"label {y} out of range [0, {spec.num_classes})")
    xin = _as_input(spec, x)
    return batch_gradient(spec, params, xin[None, :], np.array([int(y)]))
