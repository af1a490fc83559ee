"""Checkpoints: a JSON manifest plus one little-endian float64 blob.

Layout on disk (a directory)::

    manifest.json   format tag, version, metadata, array table
    arrays.bin      every array, raveled in C order, concatenated

The manifest lists each array's name, shape and offset (in elements), and
the blob's SHA-256 so truncation or corruption is caught on load.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .codebook import Codebook
from .model import ModelConfig
from .training import VQCState

FORMAT = "vqc-checkpoint"
VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=_DTYPE)
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.ravel().tobytes())
        offset += a.size
    blob = b"".join(chunks)
    manifest = {"format": FORMAT, "version": VERSION, "meta": meta, "arrays": table,
                "count": offset, "sha256": hashlib.sha256(blob).hexdigest()}
    (path / "arrays.bin").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    mpath, bpath = path / "manifest.json", path / "arrays.bin"
    if not mpath.is_file() or not bpath.is_file():
        raise CheckpointError(f"{path}: not a checkpoint directory (manifest.json and arrays.bin expected)")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{mpath}: unreadable manifest ({e})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mpath}: unknown format {manifest.get('format')!r}")
    version = manifest.get("version")
    if not isinstance(version, int) or version > VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version} is newer than this "
                              f"reader (version {VERSION}); upgrade the vqc package to load it")
    blob = bpath.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError(f"{bpath}: checksum mismatch, file is corrupt or truncated")
    flat = np.frombuffer(blob, dtype=_DTYPE)
    if flat.size != manifest["count"]:
        raise CheckpointError(f"{bpath}: expected {manifest['count']} values, found {flat.size}")
    arrays = {}
    for entry in manifest["arrays"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        arrays[entry["name"]] = flat[start:start + size].reshape(entry["shape"]).astype(np.float64)
    return arrays, manifest["meta"]


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**{**d, "pos_head_widths": tuple(d["pos_head_widths"]),
                          "position_bias": tuple(d["position_bias"])})


def save_state(path, state: VQCState, meta: dict | None = None) -> Path:
    info = {"kind": "vqc", "model": asdict(state.model_cfg), "step": state.step, **(meta or {})}
    return save_arrays(path, state.arrays(), info)


def load_state(path) -> tuple[VQCState, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "vqc":
        raise CheckpointError(f"{path}: holds a {meta.get('kind')!r} model, not a VQ-C model")
    cfg = model_config_from_dict(meta["model"])
    codebooks = {"ris": Codebook(ad.parameter(arrays.pop("codebook.ris"))),
                 "bs": Codebook(ad.parameter(arrays.pop("codebook.bs")))}
    params = {k: ad.parameter(v, name=k) for k, v in arrays.items()}
    return VQCState(cfg, params, codebooks, int(meta.get("step", 0))), meta
