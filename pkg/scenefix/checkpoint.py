"""
Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic           8 bytes   b"SCNFXCKP"
    schema_version  uint32
    header_len      uint64
    header          UTF-8 JSON: stage, kind, config, tensor table, extra
    blobs           float32 LE tensors, concatenated in table order
    trailer         32-byte SHA-256 of everything above

Tensors are stored as float32 regardless of the in-memory dtype; integer
buffers are not part of the models.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np
import torch

from scenefix.errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointVersionError,
    StageMismatch,
)
from scenefix.flow_model import BaseDenoiser, ModelConfig, StageModel

log = logging.getLogger("scenefix.checkpoint")

MAGIC = b"SCNFXCKP"
SCHEMA_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_LEN = 32

MODEL_KINDS = {"prior": BaseDenoiser, "stage": StageModel}


def save_checkpoint(model, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        data = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        table.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "stage": model.cfg.stage,
        "kind": model.kind,
        "config": model.cfg.model_dump(mode="json"),
        "tensors": table,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, SCHEMA_VERSION, len(header_bytes)) + header_bytes + b"".join(blobs)
    path.write_bytes(body + hashlib.sha256(body).digest())
    log.info(f"  Saved {model.kind} checkpoint ({model.cfg.stage}) → {path}  [{len(body) / 1e6:.1f} MB]")
    return path


def read_header(path) -> tuple[dict, bytes]:
    """Validated header and the raw blob section of a checkpoint file."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _PREFIX.size + _DIGEST_LEN:
        raise CheckpointFormatError(f"{path}: file too short ({len(data)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    if version != SCHEMA_VERSION:
        raise CheckpointVersionError(f"{path}: schema_version {version}, expected {SCHEMA_VERSION}")
    body, trailer = data[:-_DIGEST_LEN], data[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointChecksumError(f"{path}: SHA-256 trailer mismatch (truncated or corrupted)")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: malformed header ({e})")
    return header, body[start + header_len:]


def load_checkpoint(path, expected_stage: str | None = None, expected_kind: str | None = None):
    """Rebuild the model stored at ``path``; returns ``(model, extra)``."""
    header, blobs = read_header(path)
    if expected_stage is not None and header.get("stage") != expected_stage:
        raise StageMismatch(f"{path}: checkpoint is for stage {header.get('stage')!r}, expected {expected_stage!r}")
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise StageMismatch(f"{path}: checkpoint holds a {header.get('kind')!r} model, expected {expected_kind!r}")
    if header.get("kind") not in MODEL_KINDS:
        raise CheckpointFormatError(f"{path}: unknown model kind {header.get('kind')!r}")

    cfg = ModelConfig.model_validate(header["config"])
    model = MODEL_KINDS[header["kind"]](cfg)
    state = {}
    for entry in header["tensors"]:
        chunk = blobs[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointFormatError(f"{path}: tensor {entry['name']} is truncated")
        arr = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointFormatError(f"{path}: tensors do not match the config ({e})")
    if isinstance(model, StageModel):
        model.apply_freeze()
    model.eval()
    return model, header.get("extra", {})
