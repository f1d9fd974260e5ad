"""Deterministic checkpoint container.

Layout: one magic line, one ASCII header-length line, a JSON header, then
the raw little-endian tensor bytes back to back.  Byte-for-byte output is
a function of the content alone, so equal runs produce equal files.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from typing import Any, Optional

import numpy as np

from .layers import Model, ModelConfig, ParamSet
from .optim import AdamState

MAGIC = b"restorekit-ckpt v1\n"


class CheckpointError(ValueError):
    pass


def _tensor_entries(group: str, tensors: dict[str, np.ndarray], offset: int):
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append(
            {
                "group": group,
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    return entries, blobs, offset


def save_checkpoint(
    path: str,
    model: Model,
    opt_state: Optional[AdamState] = None,
    rng_state: Optional[dict] = None,
    seed: Optional[int] = None,
    config_hash: Optional[str] = None,
    meta: Optional[dict[str, Any]] = None,
) -> None:
    entries: list[dict] = []
    blobs: list[bytes] = []
    offset = 0
    e, b, offset = _tensor_entries("param", model.params.tensors, offset)
    entries += e
    blobs += b
    optimizer = None
    if opt_state is not None:
        e, b, offset = _tensor_entries("adam.m", opt_state.m, offset)
        entries += e
        blobs += b
        e, b, offset = _tensor_entries("adam.v", opt_state.v, offset)
        entries += e
        blobs += b
        optimizer = {"type": "adam", "step": opt_state.step}

    header = {
        "model_config": asdict(model.config),
        "tensors": entries,
        "optimizer": optimizer,
        "rng_state": rng_state,
        "seed": seed,
        "config_hash": config_hash,
        "meta": meta or {},
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":"), default=_json_default).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(payload)}\n".encode())
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value)}")


def load_checkpoint(path: str) -> dict[str, Any]:
    """Read a checkpoint back; returns model, optimizer state, and header."""
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != MAGIC:
            raise CheckpointError(f"bad magic in {path!r}: not a checkpoint or wrong version")
        try:
            header_len = int(fh.readline().strip())
        except ValueError as exc:
            raise CheckpointError(f"corrupt header length in {path!r}") from exc
        header = json.loads(fh.read(header_len).decode())
        body = fh.read()

    groups: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        raw = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"truncated checkpoint {path!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        arr = arr.astype(entry["dtype"]).reshape(entry["shape"])
        groups.setdefault(entry["group"], {})[entry["name"]] = arr

    cfg_kwargs = dict(header["model_config"])
    cfg_kwargs["dilations"] = tuple(cfg_kwargs["dilations"])
    config = ModelConfig(**cfg_kwargs)
    model = Model(config=config, params=ParamSet(groups.get("param", {})))
    if set(model.params.tensors) == set():
        raise CheckpointError(f"checkpoint {path!r} has no parameters")

    opt_state = None
    if header.get("optimizer"):
        opt_state = AdamState(
            step=header["optimizer"]["step"],
            m=groups.get("adam.m", {}),
            v=groups.get("adam.v", {}),
        )
    return {
        "model": model,
        "opt_state": opt_state,
        "rng_state": header.get("rng_state"),
        "seed": header.get("seed"),
        "config_hash": header.get("config_hash"),
        "meta": header.get("meta", {}),
    }
