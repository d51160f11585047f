"""Checkpoint persistence: JSON manifest plus a sibling little-endian f32 blob.

Manifest layout::

    {"version": 1, "kind": "refiner", "config": {...}, "global_step": 0,
     "blob": "model.ckpt.bin", "crc32": 123,
     "tensors": [{"name": "input.w", "shape": [32, 1, 7], "offset": 0, "len": 224}, ...]}

``offset`` and ``len`` count f32 elements. Optimizer moments, when saved, are
stored as extra tensors named ``adam.m/<name>`` and ``adam.v/<name>``.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict
    global_step: int = 0
    optimizer: dict | None = None
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def blob_path(path):
    path = Path(path)
    return path.with_name(path.name + ".bin")


def save_checkpoint(path, kind, params, config, global_step=0, optimizer=None, meta=None):
    """Write ``path`` (manifest) and ``path + '.bin'`` (tensor data)."""
    path = Path(path)
    entries, chunks = [], []
    offset = 0

    def put(name, value):
        nonlocal offset
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "len": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size

    for name, p in params.items():
        put(name, p.data if hasattr(p, "data") else p)
    opt_meta = None
    if optimizer is not None:
        opt_meta = {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                    "eps": optimizer.eps, "weight_decay": optimizer.weight_decay, "steps": {}}
        for name, state in optimizer.states.items():
            put(f"adam.m/{name}", state.m)
            put(f"adam.v/{name}", state.v)
            opt_meta["steps"][name] = state.step_count
    blob = b"".join(chunks)
    manifest = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "global_step": int(global_step),
        "optimizer": opt_meta,
        "meta": meta or {},
        "blob": blob_path(path).name,
        "crc32": zlib.crc32(blob),
        "tensors": entries,
    }
    blob_path(path).write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=1) + "\n")


def load_checkpoint(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON ({exc})") from exc
    version = manifest.get("version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    blob = (path.parent / manifest["blob"]).read_bytes()
    needed = 4 * sum(e["len"] for e in manifest["tensors"])
    if len(blob) < needed:
        raise CheckpointTruncatedError(f"{path}: blob holds {len(blob)} bytes, manifest needs {needed}")
    if zlib.crc32(blob) != manifest["crc32"]:
        raise CheckpointChecksumError(f"{path}: blob CRC32 mismatch (file corrupted or edited)")
    tensors, moments = {}, {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=e["len"], offset=4 * e["offset"]).reshape(e["shape"])
        if e["name"].startswith("adam."):
            moments[e["name"]] = arr.copy()
        else:
            tensors[e["name"]] = arr.copy()
    optimizer = None
    if manifest.get("optimizer"):
        optimizer = dict(manifest["optimizer"], moments=moments)
    return Checkpoint(manifest["kind"], manifest["config"], tensors, manifest.get("global_step", 0),
                      optimizer, manifest.get("meta", {}), version)


def load_into(store, ckpt):
    """Copy checkpoint tensors into a ParamStore, failing loudly on any mismatch."""
    missing = [n for n in store if n not in ckpt.tensors]
    extra = [n for n in ckpt.tensors if n not in store]
    if missing or extra:
        raise CheckpointShapeError(f"tensor set mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in store.items():
        value = ckpt.tensors[name]
        if tuple(value.shape) != p.data.shape:
            raise CheckpointShapeError(
                f"tensor {name!r}: checkpoint shape {tuple(value.shape)} != model shape {p.data.shape}")
        p.data[...] = value


def restore_optimizer(optimizer, ckpt):
    from .optim import AdamState

    if not ckpt.optimizer:
        return optimizer
    moments = ckpt.optimizer["moments"]
    for name, steps in ckpt.optimizer["steps"].items():
        optimizer.states[name] = AdamState(moments[f"adam.m/{name}"].astype(np.float64),
                                           moments[f"adam.v/{name}"].astype(np.float64), int(steps))
    return optimizer


def file_checksum(path):
    """CRC32 of a checkpoint's manifest and blob together."""
    path = Path(path)
    crc = zlib.crc32(path.read_bytes())
    return zlib.crc32(blob_path(path).read_bytes(), crc)
