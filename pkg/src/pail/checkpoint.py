"""Flat named-tensor archive: magic, JSON header, row-major little-endian fp32 payload.

Layout::

    b"PAILTNSR"                 8 bytes
    header_len                  uint64 little-endian
    header                      UTF-8 JSON {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
    payload                     concatenated float32 tensors, offsets relative to payload start
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

MAGIC = b"PAILTNSR"


def save_tensors(path: str | Path, tensors: Mapping[str, torch.Tensor | np.ndarray], meta: dict | None = None) -> None:
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"meta": meta or {}, "tensors": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a tensor archive")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    base = 16 + n
    out = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(entry["shape"])
        out[entry["name"]] = torch.from_numpy(arr.copy())
    return out, header["meta"]


def read_meta(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a tensor archive")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))["meta"]


def save_module(path: str | Path, module: nn.Module, meta: dict | None = None) -> None:
    save_tensors(path, module.state_dict(), meta)


def load_module(path: str | Path, module: nn.Module) -> dict:
    tensors, meta = load_tensors(path)
    state = module.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    module.load_state_dict({k: tensors[k].to(state[k].dtype) for k in state})
    return meta


def optimizer_tensors(opt: torch.optim.Optimizer, prefix: str) -> dict[str, torch.Tensor]:
    out = {}
    for i, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{prefix}/{i}/{key}"] = torch.as_tensor(val, dtype=torch.float32)
    return out


def load_optimizer(opt: torch.optim.Optimizer, tensors: Mapping[str, torch.Tensor], prefix: str) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for name, t in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, i, key = name.rsplit("/", 2)
        state.setdefault(int(i), {})[key] = t.clone() if t.dim() else t.reshape(())
    sd["state"] = state
    opt.load_state_dict(sd)


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
