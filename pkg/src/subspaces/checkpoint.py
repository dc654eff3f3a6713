"""Checkpoint persistence.

A checkpoint is a JSON manifest (network description, segment table, blob
names) next to one raw little-endian float64 blob per parameter vector.
Batch-norm statistics are never stored; they are recomputed on load.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .nn import NetworkSpec, ParamVector, Segment
from .subspace import Subspace, parse_kind

PARAMS_FORMAT = "subspaces-params/1"
SUBSPACE_FORMAT = "subspaces-subspace/1"


def _segment_table(segments) -> list:
    return [[s.layer_index, s.kind, s.offset, s.length] for s in segments]


def _read_manifest(path: Path, fmt: str) -> dict:
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("format") != fmt:
        raise FormatError(f"{path}: expected format {fmt!r}, found {manifest.get('format')!r}")
    return manifest


def _spec_from_manifest(manifest: dict, path) -> NetworkSpec:
    spec = NetworkSpec.from_dict(manifest["network"])
    table = [Segment(int(a), str(b), int(c), int(d)) for a, b, c, d in manifest["segments"]]
    if tuple(table) != spec.segments:
        raise ConfigError(f"{path}: segment table does not match the network description")
    return spec


def _write_blob(path: Path, params: ParamVector) -> None:
    path.write_bytes(np.ascontiguousarray(params.values, dtype="<f8").tobytes())


def _read_blob(path: Path, spec: NetworkSpec) -> ParamVector:
    raw = path.read_bytes()
    if len(raw) != 8 * spec.num_params:
        raise FormatError(f"{path}: expected {8 * spec.num_params} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return ParamVector(values, spec.segments)


def save_params(path, spec: NetworkSpec, params: ParamVector) -> Path:
    """Write ``path`` (manifest) and ``path`` with suffix ``.bin`` (weights)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".bin")
    _write_blob(blob, params)
    manifest = {
        "format": PARAMS_FORMAT,
        "network": spec.to_dict(),
        "segments": _segment_table(params.segments),
        "blob": blob.name,
        "dtype": "<f8",
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_params(path):
    path = Path(path)
    manifest = _read_manifest(path, PARAMS_FORMAT)
    spec = _spec_from_manifest(manifest, path)
    return spec, _read_blob(path.parent / manifest["blob"], spec)


def save_subspace(directory, spec: NetworkSpec, subspace: Subspace, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, e in enumerate(subspace.endpoints):
        name = f"endpoint_{i}.bin"
        _write_blob(d / name, e)
        names.append(name)
    manifest = {
        "format": SUBSPACE_FORMAT,
        "kind": str(subspace.kind),
        "network": spec.to_dict(),
        "segments": _segment_table(subspace.segments),
        "endpoints": names,
        "dtype": "<f8",
    }
    if extra:
        manifest["extra"] = extra
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return d


def load_subspace(directory):
    """Return ``(spec, subspace, extra)`` from a checkpoint directory."""
    d = Path(directory)
    manifest = _read_manifest(d / "manifest.json", SUBSPACE_FORMAT)
    spec = _spec_from_manifest(manifest, d)
    kind = parse_kind(manifest["kind"])
    endpoints = [_read_blob(d / name, spec) for name in manifest["endpoints"]]
    return spec, Subspace(kind, endpoints), manifest.get("extra", {})
