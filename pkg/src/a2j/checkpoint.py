"""Parameter checkpoints: a UTF-8 JSON manifest plus a little-endian float32 blob."""

from __future__ import annotations

import json
import os
from typing import Dict, Optional, Tuple

import numpy as np

from .model import A2JConfig, Module, build_model

FORMAT_NAME = "a2j-checkpoint"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.f32"


class CheckpointError(ValueError):
    pass


def save_tensors(path: str, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write named tensors; each occupies its own contiguous segment of the blob."""
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    tmp_blob = os.path.join(path, BLOB + ".tmp")
    with open(tmp_blob, "wb") as fh:
        for name in sorted(tensors):
            raw = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(np.shape(tensors[name])), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "blob": BLOB, "blob_bytes": offset,
                "tensors": entries, "meta": meta or {}}
    tmp_manifest = os.path.join(path, MANIFEST + ".tmp")
    with open(tmp_manifest, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp_blob, os.path.join(path, BLOB))
    os.replace(tmp_manifest, os.path.join(path, MANIFEST))


def load_tensors(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    try:
        with open(os.path.join(path, MANIFEST), encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path} is not a checkpoint (format={manifest.get('format')!r})")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    blob_path = os.path.join(path, manifest["blob"])
    try:
        with open(blob_path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint blob {blob_path}: {exc}") from exc
    if len(raw) != manifest["blob_bytes"]:
        raise CheckpointError(f"checkpoint blob is {len(raw)} bytes, manifest says {manifest['blob_bytes']}")
    out = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if nbytes != e["nbytes"] or e["offset"] + nbytes > len(raw):
            raise CheckpointError(f"tensor {e['name']} segment is inconsistent with its shape {shape}")
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=e["offset"])
        out[e["name"]] = arr.reshape(shape).astype(np.float32)
    return out, manifest.get("meta", {})


def save_checkpoint(path: str, model: Module, meta: Optional[dict] = None,
                    extra: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Model parameters and buffers, plus optional extra tensors (e.g. optimizer moments)."""
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra or {}).items():
        tensors[f"extra/{k}"] = v
    m = dict(meta or {})
    m["model_config"] = model.cfg.to_dict()
    save_tensors(path, tensors, m)


def load_checkpoint(path: str) -> Tuple[Module, dict, Dict[str, np.ndarray]]:
    """Rebuild the model from the recorded config and restore its state."""
    tensors, meta = load_tensors(path)
    if "model_config" not in meta:
        raise CheckpointError("checkpoint has no model config")
    try:
        cfg = A2JConfig.from_dict(meta["model_config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid model config in checkpoint: {exc}") from exc
    model = build_model(cfg)
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    extra = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
    return model, meta, extra
