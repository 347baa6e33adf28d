"""Binary checkpoint format shared by the backbone and the adapter.

Layout (all integers little-endian):

    magic   4 bytes  b"MVAK"
    version u32      currently 1
    digest  u16+utf8 backbone-config digest the weights were built for
    meta    u16 count, then count x (u16+utf8 key, u16+utf8 value)
    tensors u32 count, then per tensor, sorted by name:
        u16+utf8 name   ("<section>.<parameter path>")
        u8 dtype code    0 = float32, 1 = float64
        u8 rank, then u32 per extent
        raw little-endian payload

Sections are name prefixes ("backbone." / "adapter."); adapter-only files carry
no backbone-section tensors. Serialization is canonical, so save -> load -> save
is byte-identical.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MVAK"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(RuntimeError):
    """Unreadable, mismatched, or incompatible checkpoint."""


@dataclass
class Checkpoint:
    config_digest: str
    meta: dict
    sections: dict  # section name -> {param name: np.ndarray}
    version: int = VERSION

    def section(self, name: str) -> dict:
        if name not in self.sections:
            raise CheckpointError(f"checkpoint has no {name!r} section")
        return self.sections[name]


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<H", len(raw)) + raw


def _read_str(buf: bytes, pos: int) -> tuple[str, int]:
    (length,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    return buf[pos : pos + length].decode(), pos + length


def save_checkpoint(path, sections: dict, config_digest: str, meta: dict | None = None) -> None:
    """sections: {"backbone": {name: array}, "adapter": {...}} (any subset)."""
    meta = dict(meta or {})
    flat = {}
    for section, tensors in sections.items():
        for name, arr in tensors.items():
            flat[f"{section}.{name}"] = np.asarray(arr)

    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += _pack_str(config_digest)
    out += struct.pack("<H", len(meta))
    for key in sorted(meta):
        out += _pack_str(key)
        out += _pack_str(str(meta[key]))
    out += struct.pack("<I", len(flat))
    for name in sorted(flat):
        arr = flat[name]
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        out += _pack_str(name)
        out += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (reader supports {VERSION})")
    pos = 8
    digest, pos = _read_str(buf, pos)
    (meta_count,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    meta = {}
    for _ in range(meta_count):
        key, pos = _read_str(buf, pos)
        val, pos = _read_str(buf, pos)
        meta[key] = val
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    sections: dict = {}
    for _ in range(count):
        name, pos = _read_str(buf, pos)
        code, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dtype = _DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(buf, dtype=dtype, count=size, offset=pos).reshape(shape).copy()
        pos += size * dtype.itemsize
        section, param = name.split(".", 1)
        sections.setdefault(section, {})[param] = arr
    return Checkpoint(config_digest=digest, meta=meta, sections=sections, version=version)


def module_arrays(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_into_module(module: torch.nn.Module, tensors: dict) -> None:
    state = module.state_dict()
    missing = set(state) - set(tensors)
    extra = set(tensors) - set(state)
    if missing or extra:
        raise CheckpointError(
            f"parameter names do not match module (missing {sorted(missing)[:3]}, "
            f"extra {sorted(extra)[:3]})"
        )
    with torch.no_grad():
        for name, param in state.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {tuple(param.shape)}")
            param.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(param.dtype))


def weights_checksum(module: torch.nn.Module) -> str:
    """Order-stable sha256 over every named tensor's bytes."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def check_adapter_compat(ckpt: Checkpoint, backbone_digest: str) -> None:
    if ckpt.config_digest != backbone_digest:
        raise CheckpointError(
            f"adapter was built for backbone config {ckpt.config_digest}, "
            f"got {backbone_digest}"
        )
