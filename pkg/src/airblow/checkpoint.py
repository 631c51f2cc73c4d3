"""Versioned binary checkpoints for models and their optimiser state.

Layout (all integers little-endian):

    magic      8 bytes  b"AIRBLOW\\0"
    version    u32
    header_len u32
    header     UTF-8 JSON: per-model architecture, parameter count, Adam scalars, extra metadata
    payload    per model, in header order: params, m, v as little-endian float32
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .policy import AdamState, BlowScoreModel, GraspValueModel, MLPModel

MAGIC = b"AIRBLOW\0"
FORMAT_VERSION = 1
MODEL_CLASSES = {c.__name__: c for c in (GraspValueModel, BlowScoreModel, MLPModel)}
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """Corrupt or truncated checkpoint."""


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint file (bad magic)."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


def _adam_header(opt: AdamState) -> dict:
    return {"t": opt.t, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "weight_decay": opt.weight_decay}


def save_checkpoint(path, entries: dict, meta: dict | None = None) -> None:
    """``entries`` maps a name to ``(model, AdamState | None)``."""
    header = {"models": [], "meta": meta or {}}
    chunks = []
    for name, (model, opt) in entries.items():
        n = model.n_params
        if opt is None:
            opt = AdamState.for_params(model.params)
        header["models"].append({"name": name, "architecture": model.architecture(), "n_params": n,
                                 "adam": _adam_header(opt)})
        for arr in (model.params, opt.m, opt.v):
            chunks.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def _build_model(arch: dict):
    cls = MODEL_CLASSES.get(arch.get("class"))
    if cls is None:
        raise CheckpointError(f"unknown model class {arch.get('class')!r}")
    return cls(**arch["config"])


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns ``({name: (model, AdamState)}, meta)``; models are float32."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    off = len(MAGIC) + 8
    if len(data) < off + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt header ({err})") from None
    off += hlen
    expected = off + sum(3 * m["n_params"] * 4 for m in header["models"])
    if len(data) != expected:
        raise CheckpointError(f"{path}: payload is {len(data) - off} bytes, expected {expected - off}")
    out = {}
    for m in header["models"]:
        model = _build_model(m["architecture"])
        n = m["n_params"]
        if model.n_params != n:
            raise CheckpointError(f"{path}: architecture of {m['name']} has {model.n_params} parameters, file has {n}")
        arrs = []
        for _ in range(3):
            arrs.append(np.frombuffer(data, dtype=_F32, count=n, offset=off).astype(np.float32))
            off += 4 * n
        model.set_params(arrs[0])
        opt = AdamState(arrs[1], arrs[2], **m["adam"])
        out[m["name"]] = (model, opt)
    return out, header["meta"]
