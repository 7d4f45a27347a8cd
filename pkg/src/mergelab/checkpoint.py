"""Checkpoint container: JSON manifest + raw little-endian float32 payload.

Layout (single file):
    8 bytes   magic ``MLCKPT01``
    4 bytes   u32 little-endian manifest length
    N bytes   canonical JSON manifest
    rest      float32 little-endian values in index order

The writer is fully deterministic so identical models serialize to
byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

from .core import ParamVector, TensorSlot, index_fingerprint
from .errors import ArtifactError
from .model import ModelSpec

MAGIC = b"MLCKPT01"


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def value_hash(params: ParamVector) -> str:
    """Content hash of the raw parameter bytes."""
    return hashlib.sha256(params.values.astype("<f4").tobytes()).hexdigest()


def build_manifest(
    spec: ModelSpec,
    params: ParamVector,
    seed: int | None,
    provenance: dict[str, Any] | None = None,
) -> dict[str, Any]:
    manifest: dict[str, Any] = {
        "spec": {"layer_widths": list(spec.layer_widths), "activation": spec.activation},
        "seed": seed,
        "index": [
            {"name": s.name, "offset": s.offset, "shape": list(s.shape)} for s in params.index
        ],
        "index_fingerprint": index_fingerprint(params.index),
        "value_hash": value_hash(params),
    }
    if provenance is not None:
        manifest["provenance"] = provenance
    return manifest


def save_checkpoint(
    path: str | Path,
    spec: ModelSpec,
    params: ParamVector,
    seed: int | None,
    provenance: dict[str, Any] | None = None,
) -> None:
    manifest = _canonical_json(build_manifest(spec, params, seed, provenance))
    payload = params.values.astype("<f4").tobytes()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(manifest).to_bytes(4, "little"))
        fh.write(manifest)
        fh.write(payload)


def load_checkpoint(path: str | Path) -> tuple[ModelSpec, ParamVector, dict[str, Any]]:
    """Load and verify a checkpoint; returns (spec, params, manifest)."""
    p = Path(path)
    if not p.exists():
        raise ArtifactError(f"checkpoint not found: {p}")
    blob = p.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ArtifactError(f"not a mergelab checkpoint: {p}")
    cursor = len(MAGIC)
    manifest_len = int.from_bytes(blob[cursor : cursor + 4], "little")
    cursor += 4
    try:
        manifest = json.loads(blob[cursor : cursor + manifest_len])
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupt checkpoint manifest in {p}: {exc}") from exc
    cursor += manifest_len
    values = np.frombuffer(blob[cursor:], dtype="<f4").astype(np.float32)
    index = tuple(
        TensorSlot(e["name"], int(e["offset"]), tuple(int(d) for d in e["shape"]))
        for e in manifest["index"]
    )
    params = ParamVector(values, index)
    if value_hash(params) != manifest["value_hash"]:
        raise ArtifactError(f"checkpoint value hash mismatch in {p}")
    spec = ModelSpec(
        tuple(manifest["spec"]["layer_widths"]), manifest["spec"]["activation"]
    )
    if params.index != spec.param_index():
        raise ArtifactError(f"checkpoint index does not match its spec in {p}")
    return spec, params, manifest
