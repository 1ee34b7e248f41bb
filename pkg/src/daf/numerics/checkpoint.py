"""Checkpoint files: a one-line UTF-8 JSON manifest, then raw float64 data.

The manifest lists (name, shape, offset) per parameter; offsets are byte
positions into the payload that follows the newline. Values are little-endian
64-bit floats in row-major order, so save/load round-trips bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import CheckpointMismatchError, ParseError
from .params import ParamStore

FORMAT = "daf-checkpoint-v1"


def save_params(store: ParamStore, path: str | Path) -> None:
    entries = []
    payload = bytearray()
    for name, t in store.items():
        entries.append({"name": name, "shape": list(t.shape), "offset": len(payload)})
        payload += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    manifest = {"format": FORMAT, "dtype": "<f8", "params": entries}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(bytes(payload))


def read_manifest(path: str | Path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"not a checkpoint file: {exc}", line=1) from exc
    if manifest.get("format") != FORMAT:
        raise ParseError(f"unknown checkpoint format {manifest.get('format')!r}", line=1)
    return manifest, payload


def load_params(path: str | Path) -> ParamStore:
    manifest, payload = read_manifest(path)
    store = ParamStore()
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        raw = payload[start : start + 8 * count]
        if len(raw) != 8 * count:
            raise ParseError(f"truncated payload for parameter {entry['name']!r}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        store.add(entry["name"], arr)
    return store


def load_into(store: ParamStore, path: str | Path) -> None:
    """Load a checkpoint into an existing store, validating its layout."""
    loaded = load_params(path)
    if loaded.names() != store.names():
        raise CheckpointMismatchError(
            "checkpoint parameters do not match the configured model "
            f"({len(loaded.names())} vs {len(store.names())} tensors)"
        )
    for name, t in store.items():
        src = loaded[name]
        if src.shape != t.shape:
            raise CheckpointMismatchError(
                f"checkpoint parameter {name!r} has shape {src.shape}, expected {t.shape}"
            )
        t.data[...] = src.data
