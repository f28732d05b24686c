"""Binary checkpoint container.

Layout::

    b"X2I1" | u32 LE version | u64 LE header length | UTF-8 JSON header | arrays

The header carries the run-config echo, the step counter, the seed state and
a manifest of ``{name, shape, dtype, offset, nbytes}`` entries; array
payloads follow in manifest order as raw little-endian bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from alignlab.errors import CheckpointError

MAGIC = b"X2I1"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed_state: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def header(self) -> dict:
        manifest, offset = [], 0
        for name in sorted(self.arrays):
            arr = self.arrays[name]
            code = _code(arr.dtype)
            nbytes = int(arr.size * arr.dtype.itemsize)
            manifest.append({"name": name, "shape": list(arr.shape), "dtype": code,
                             "offset": offset, "nbytes": nbytes})
            offset += nbytes
        return {"config": self.config, "step": self.step, "seed_state": self.seed_state,
                "arrays": manifest}

    def to_bytes(self) -> bytes:
        header = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        chunks = [_PREAMBLE.pack(MAGIC, self.version, len(header)), header]
        for name in sorted(self.arrays):
            arr = self.arrays[name]
            chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[_code(arr.dtype)]).tobytes())
        return b"".join(chunks)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.arrays.items() if k.startswith(prefix + ".")}


def _code(dtype) -> str:
    kind = np.dtype(dtype)
    for code, spec in _DTYPES.items():
        if kind == np.dtype(spec).newbyteorder("=") or kind == np.dtype(spec):
            return code
    raise CheckpointError(f"unsupported array dtype {dtype}")


def save(ckpt: Checkpoint, path) -> str:
    """Write atomically; returns the sha256 of the written bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = ckpt.to_bytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _PREAMBLE.size:
        raise CheckpointError("checkpoint truncated before header")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    start = _PREAMBLE.size
    if len(data) < start + hlen:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    body = memoryview(data)[start + hlen:]
    total = sum(e["nbytes"] for e in header["arrays"])
    if len(body) != total:
        raise CheckpointError(f"checkpoint payload has {len(body)} bytes, manifest declares {total}")
    arrays = {}
    for entry in header["arrays"]:
        raw = body[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return Checkpoint(header["config"], arrays, header["step"], header["seed_state"], version)


def load(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def module_arrays(module: torch.nn.Module, prefix: str, names=None) -> dict[str, np.ndarray]:
    state = module.state_dict()
    keys = names if names is not None else state.keys()
    return {f"{prefix}.{k}": state[k].detach().cpu().numpy().copy() for k in keys}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
    state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    missing, unexpected = module.load_state_dict(state, strict=False)
    if strict and (unexpected or (missing and set(missing) & set(module.state_dict()) - set(state))):
        raise CheckpointError(f"checkpoint arrays do not match module: missing={missing} unexpected={unexpected}")
