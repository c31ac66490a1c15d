"""Versioned checkpoint container.

Layout::

    b"LVSRCKPT"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length in bytes
    header                 UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
    payload                concatenated little-endian float64 arrays, offsets in elements

The header is written with sorted keys so equal content gives equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"LVSRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float64).numpy().astype("<f8", copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(arr).tobytes())
        offset += arr.size
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + 12
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = np.frombuffer(raw, dtype="<f8", offset=start + hlen)
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + n > payload.size:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = payload[e["offset"]:e["offset"] + n].reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float64))
    return tensors, header["meta"]


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


@torch.no_grad()
def load_module_tensors(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str) -> None:
    state = module.state_dict()
    missing = [k for k in state if f"{prefix}.{k}" not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks {prefix}.{missing[0]} (and {len(missing) - 1} more)")
    for k, v in state.items():
        src = tensors[f"{prefix}.{k}"]
        if tuple(src.shape) != tuple(v.shape):
            raise CheckpointError(f"shape mismatch for {prefix}.{k}: {tuple(src.shape)} vs {tuple(v.shape)}")
        v.copy_(src.to(v.dtype))
