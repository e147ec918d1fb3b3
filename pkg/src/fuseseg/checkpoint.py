"""Deterministic single-file checkpoint format.

Layout: 4-byte magic, 4-byte little-endian header length, canonical JSON
header (sorted keys), then raw little-endian tensor bytes in header order.
Saving the result of a load reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch

from .errors import CheckpointVersionError

MAGIC = b"FSCK"
FORMAT_VERSION = 1


def save_checkpoint(path: Path, params: Dict[str, np.ndarray], meta: dict):
    """Write a name->array mapping plus JSON-serializable metadata."""
    names = sorted(params)
    tensors = {}
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params[name])
        blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        tensors[name] = {
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        }
        offset += len(blob)
        blobs.append(blob)
    header = {"format_version": FORMAT_VERSION, "meta": meta, "tensors": tensors}
    header_json = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_json)))
        fh.write(header_json)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], dict]:
    """Read back the parameter mapping and metadata; validates magic and version."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointVersionError(f"{path} is not a checkpoint file (bad magic {raw[:4]!r})")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint format version {header.get('format_version')}, "
            f"expected {FORMAT_VERSION}"
        )
    body = raw[8 + header_len :]
    params = {}
    for name, info in header["tensors"].items():
        blob = body[info["offset"] : info["offset"] + info["nbytes"]]
        arr = np.frombuffer(blob, dtype=np.dtype(info["dtype"]).newbyteorder("<"))
        params[name] = arr.reshape(info["shape"]).astype(info["dtype"]).copy()
    return params, header["meta"]


def state_to_arrays(module: torch.nn.Module) -> Dict[str, np.ndarray]:
    """Full state dict (parameters and buffers) as numpy arrays."""
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def arrays_to_state(module: torch.nn.Module, params: Dict[str, np.ndarray]):
    """Load a saved mapping back into a module; shapes must match exactly."""
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in params.items()}
    module.load_state_dict(state)
