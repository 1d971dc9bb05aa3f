"""Checkpoint files: ``manifest.json`` plus ``tensors.bin`` (little-endian float64)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kg_data import EmbeddingTable

FORMAT_VERSION = "gana-fkgc-ckpt/1"
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_DTYPE = np.dtype("<f8")


class CheckpointError(Exception):
    pass


class VersionMismatchError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    best_val_mrr: float | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)
    version: str = FORMAT_VERSION


def write_tensor_file(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float64 tensors and a JSON manifest into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.array(arr, dtype=_DTYPE, order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = data.tobytes()
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {**meta, "tensors": entries, "blob_size": len(blob),
                "sha256": hashlib.sha256(blob).hexdigest()}
    (root / BLOB).write_bytes(blob)
    with open(root / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def read_tensor_file(path: str | Path, expect_version: str | None = FORMAT_VERSION
                     ) -> tuple[dict, dict[str, np.ndarray]]:
    root = Path(path)
    mpath, bpath = root / MANIFEST, root / BLOB
    for p in (mpath, bpath):
        if not p.is_file():
            raise CheckpointError(f"missing checkpoint file: {p}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{mpath}: corrupt manifest ({exc})") from exc
    if expect_version is not None and manifest.get("version") != expect_version:
        raise VersionMismatchError(f"{root}: version {manifest.get('version')!r}, expected {expect_version!r}")
    blob = bpath.read_bytes()
    if len(blob) != manifest.get("blob_size"):
        raise IntegrityError(f"{bpath}: {len(blob)} bytes, manifest says {manifest.get('blob_size')}")
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise IntegrityError(f"{bpath}: checksum mismatch")
    tensors = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start:start + n], dtype=_DTYPE).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float64)
    return manifest, tensors


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    tensors = {f"model/{k}": v for k, v in ckpt.tensors.items()}
    tensors.update({f"optim/{k}": v for k, v in ckpt.optimizer.items()})
    meta = {"version": ckpt.version, "config": ckpt.config, "step": ckpt.step,
            "best_val_mrr": ckpt.best_val_mrr, "rng_state": ckpt.rng_state, "extra": ckpt.extra}
    write_tensor_file(path, tensors, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    manifest, tensors = read_tensor_file(path)
    model = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    optim = {k[len("optim/"):]: v for k, v in tensors.items() if k.startswith("optim/")}
    return Checkpoint(manifest["config"], model, optim, manifest["step"], manifest["best_val_mrr"],
                      manifest["rng_state"], manifest.get("extra", {}), manifest["version"])


def save_embeddings(table: EmbeddingTable, path: str | Path, meta: dict | None = None) -> None:
    """Store an EmbeddingTable in the checkpoint tensor format."""
    write_tensor_file(path, {"entity": table.entity_vectors, "relation": table.relation_vectors},
                      {"version": FORMAT_VERSION, "kind": "embeddings", **(meta or {})})


def load_embeddings(path: str | Path) -> EmbeddingTable:
    manifest, tensors = read_tensor_file(path)
    if manifest.get("kind") != "embeddings":
        raise CheckpointError(f"{path}: not an embedding file")
    return EmbeddingTable(tensors["entity"], tensors["relation"])
