"""Binary volume/field files (FVOL), weight checkpoints (FRWT) and text manifests.

Both binary formats are little-endian regardless of host byte order.

FVOL layout::

    b"FVOL" | u8 version=1 | u32 nx, ny, nz, channels, dtype | f32 sx, sy, sz | payload

``dtype`` is 0 for float32 and 1 for uint8 labels. The payload is channel
major with x varying fastest inside a channel.

FRWT layout::

    b"FRWT" | u8 version=1 | u32 len + utf-8 JSON config echo | u32 n_entries
    then per entry: u32 len + utf-8 name | u32 ndim | u32 shape[ndim] | f32 data (C order)
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .volume import DisplacementField, LabelMap, Volume

FVOL_MAGIC = b"FVOL"
FRWT_MAGIC = b"FRWT"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1

_HEADER = struct.Struct("<4sB5I3f")


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_fvol(obj: Union[Volume, DisplacementField, LabelMap]) -> bytes:
    if isinstance(obj, DisplacementField):
        channels = obj.data
        dtype_code = DTYPE_F32
    elif isinstance(obj, LabelMap):
        channels = obj.data[None]
        dtype_code = DTYPE_U8
    elif isinstance(obj, Volume):
        channels = obj.data[None]
        dtype_code = DTYPE_F32
    else:
        raise TypeError(f"cannot encode {type(obj).__name__} as FVOL")
    nc = channels.shape[0]
    nx, ny, nz = channels.shape[1:]
    header = _HEADER.pack(FVOL_MAGIC, VERSION, nx, ny, nz, nc, dtype_code, *obj.spacing)
    np_dtype = "<f4" if dtype_code == DTYPE_F32 else "u1"
    # transpose so that x is the fastest-varying index in C order
    body = np.ascontiguousarray(channels.transpose(0, 3, 2, 1), dtype=np_dtype).tobytes()
    return header + body


def decode_fvol(payload: bytes):
    if len(payload) < _HEADER.size:
        raise FormatError("truncated FVOL header")
    magic, version, nx, ny, nz, nc, dtype_code, sx, sy, sz = _HEADER.unpack_from(payload)
    if magic != FVOL_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported FVOL version {version}")
    if dtype_code not in (DTYPE_F32, DTYPE_U8):
        raise FormatError(f"unknown dtype code {dtype_code}")
    np_dtype = np.dtype("<f4") if dtype_code == DTYPE_F32 else np.dtype("u1")
    count = nc * nx * ny * nz
    expected = _HEADER.size + count * np_dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"FVOL payload has {len(payload)} bytes, expected {expected}")
    raw = np.frombuffer(payload, dtype=np_dtype, count=count, offset=_HEADER.size)
    data = raw.reshape(nc, nz, ny, nx).transpose(0, 3, 2, 1)
    spacing = (float(sx), float(sy), float(sz))
    if dtype_code == DTYPE_U8:
        if nc != 1:
            raise FormatError("label files must have one channel")
        return LabelMap(data[0].copy(), spacing)
    if nc == 3:
        return DisplacementField(data.astype(np.float64), spacing)
    if nc == 1:
        return Volume(data[0].astype(np.float64), spacing)
    raise FormatError(f"unsupported channel count {nc}")


def write_fvol(path, obj) -> None:
    atomic_write_bytes(path, encode_fvol(obj))


def read_fvol(path):
    return decode_fvol(Path(path).read_bytes())


def encode_frwt(params: Mapping[str, np.ndarray], config: Mapping) -> bytes:
    cfg = json.dumps(dict(config), sort_keys=True).encode("utf-8")
    parts = [FRWT_MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(cfg)), cfg]
    parts.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f4")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)))
        parts.append(key)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_frwt(payload: bytes):
    """Return ``(params, config)``; params keep file order."""
    view = memoryview(payload)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated FRWT file")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != FRWT_MAGIC:
        raise FormatError("bad FRWT magic")
    (version,) = struct.unpack("<B", take(1))
    if version != VERSION:
        raise FormatError(f"unsupported FRWT version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = json.loads(bytes(take(cfg_len)).decode("utf-8"))
    (n_entries,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(bytes(take(4 * count)), dtype="<f4").reshape(shape)
        params[name] = data.astype(np.float32)
    if pos != len(view):
        raise FormatError("trailing bytes after FRWT entries")
    return params, config


def write_frwt(path, params, config) -> None:
    atomic_write_bytes(path, encode_frwt(params, config))


def read_frwt(path):
    return decode_frwt(Path(path).read_bytes())


def format_manifest(values: Mapping) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_manifest(path, values: Mapping) -> None:
    atomic_write_text(path, format_manifest(values))


def read_manifest(path) -> dict:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))
