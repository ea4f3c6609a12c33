"""Binary tensor container ("UMTC1").

Layout, all little-endian::

    b"UMTC1" | u32 count | count x (u16 name_len | name | u8 dtype | u8 rank | rank x u32 dim | payload)

dtype codes: 0 = f32 (the only code used for model data), 1 = u8, 2 = i32, 3 = i64.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ValidationError

MAGIC = b"UMTC1"

_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("u1"),
    2: np.dtype("<i4"),
    3: np.dtype("<i8"),
}
_BY_DTYPE = {v: k for k, v in _CODES.items()}


def _code_for(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt.kind == "f":
        return 0
    for code, d in _CODES.items():
        if d.kind == dt.kind and d.itemsize == dt.itemsize:
            return code
    raise ValidationError(f"unsupported dtype {arr.dtype}")


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code_for(arr)
        arr = np.asarray(arr, dtype=_CODES[code])  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError("array name too long")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:5] != MAGIC:
        raise ValidationError("not a UMTC1 container")
    off = 5
    try:
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + n].decode("utf-8")
            off += n
            code, rank = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            dt = _CODES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + size > len(data):
                raise ValidationError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape).copy()
            off += size
    except (struct.error, KeyError) as exc:
        raise ValidationError(f"corrupt container: {exc}") from exc
    return out


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
