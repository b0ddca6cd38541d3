"""Named float32 parameter sets and their ``TPNN`` binary file format.

Layout (little-endian)::

    b"TPNN"  u16 version  u64 seed  u32 meta_len  meta (UTF-8 JSON)
    u32 count, then per record:
        u16 name_len  name (UTF-8)  u8 ndim  u32 dims[ndim]  f32 payload
    u32 CRC-32 of every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np
import torch

MAGIC = b"TPNN"
VERSION = 1


class ParamFileError(ValueError):
    pass


class ParamStore:
    def __init__(self, params: Optional[dict] = None, seed: int = 0, meta: Optional[dict] = None):
        self.params: dict[str, np.ndarray] = {}
        for name, arr in (params or {}).items():
            if name in self.params:
                raise ValueError(f"duplicate parameter {name}")
            self.params[name] = np.ascontiguousarray(arr, dtype="<f4")
        self.seed = int(seed)
        self.meta = dict(meta or {})

    @classmethod
    def from_module(cls, module: torch.nn.Module, seed: int = 0, meta: Optional[dict] = None) -> "ParamStore":
        state = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()
                 if v.dtype.is_floating_point}
        return cls(state, seed, meta)

    def apply_to(self, module: torch.nn.Module) -> torch.nn.Module:
        state = module.state_dict()
        missing = [k for k, v in state.items() if v.dtype.is_floating_point and k not in self.params]
        if missing:
            raise ParamFileError(f"parameter store lacks {missing[:5]}")
        new_state = {k: (torch.from_numpy(self.params[k].astype(np.float32).copy()) if k in self.params else v)
                     for k, v in state.items()}
        module.load_state_dict(new_state)
        return module

    def __eq__(self, other) -> bool:
        return (isinstance(other, ParamStore) and self.params.keys() == other.params.keys()
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True).encode()
        out = bytearray(MAGIC + struct.pack("<HQI", VERSION, self.seed, len(meta)) + meta)
        out += struct.pack("<I", len(self.params))
        for name, arr in self.params.items():
            nb = name.encode()
            out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.astype("<f4").tobytes()
        out += struct.pack("<I", zlib.crc32(bytes(out)))
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        if data[:4] != MAGIC:
            raise ParamFileError("not a TPNN parameter file")
        if len(data) < 22 or struct.unpack("<I", data[-4:])[0] != zlib.crc32(data[:-4]):
            raise ParamFileError("checksum mismatch")
        version, seed, meta_len = struct.unpack_from("<HQI", data, 4)
        if version != VERSION:
            raise ParamFileError(f"unsupported TPNN version {version}")
        pos = 18
        meta = json.loads(data[pos:pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            pos += 4 * n
        if pos != len(data) - 4:
            raise ParamFileError("trailing bytes in parameter file")
        return cls(params, seed, meta)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())
