"""Little-endian binary helpers shared by the dataset and checkpoint files.

Integers are unsigned 32-bit unless noted, arrays are float32 row-major
with an ``ndim`` + shape header, strings and JSON documents are
length-prefixed UTF-8.
"""

import json
import struct
from typing import Any, BinaryIO, Tuple

import numpy as np

from .errors import CorruptionError, SchemaError

_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_F32 = np.dtype("<f4")


class BinaryWriter:
    def __init__(self, stream: BinaryIO):
        self.stream = stream

    def magic(self, tag: bytes) -> None:
        self.stream.write(tag)

    def u32(self, value: int) -> None:
        self.stream.write(_U32.pack(int(value)))

    def i64(self, value: int) -> None:
        self.stream.write(_I64.pack(int(value)))

    def blob(self, payload: bytes) -> None:
        self.u32(len(payload))
        self.stream.write(payload)

    def text(self, value: str) -> None:
        self.blob(value.encode("utf-8"))

    def json(self, value: Any) -> None:
        self.text(json.dumps(value, sort_keys=True))

    def array(self, values: np.ndarray) -> None:
        """float32 array with its shape."""
        arr = np.ascontiguousarray(values, dtype=_F32)
        self.u32(arr.ndim)
        for dim in arr.shape:
            self.u32(dim)
        self.stream.write(arr.tobytes())


class BinaryReader:
    """Reads what ``BinaryWriter`` wrote; short reads are corruption."""

    def __init__(self, stream: BinaryIO, source: str = "<stream>"):
        self.stream = stream
        self.source = source

    def _read(self, n: int) -> bytes:
        data = self.stream.read(n)
        if len(data) != n:
            raise CorruptionError(
                f"{self.source}: truncated, wanted {n} bytes, got {len(data)}"
            )
        return data

    def magic(self, tag: bytes) -> None:
        found = self.stream.read(len(tag))
        if found != tag:
            raise SchemaError(f"{self.source}: bad magic {found!r}, expected {tag!r}")

    def version(self, supported: int) -> int:
        version = self.u32()
        if version != supported:
            raise SchemaError(
                f"{self.source}: format version {version} not supported (expected {supported})"
            )
        return version

    def u32(self) -> int:
        return int(_U32.unpack(self._read(_U32.size))[0])

    def i64(self) -> int:
        return int(_I64.unpack(self._read(_I64.size))[0])

    def blob(self) -> bytes:
        return self._read(self.u32())

    def text(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptionError(f"{self.source}: invalid UTF-8 payload") from exc

    def json(self) -> Any:
        try:
            return json.loads(self.text())
        except json.JSONDecodeError as exc:
            raise CorruptionError(f"{self.source}: invalid JSON payload: {exc}") from exc

    def shape(self) -> Tuple[int, ...]:
        ndim = self.u32()
        if ndim > 8:
            raise CorruptionError(f"{self.source}: implausible array rank {ndim}")
        return tuple(self.u32() for _ in range(ndim))

    def array(self) -> np.ndarray:
        shape = self.shape()
        count = int(np.prod(shape)) if shape else 1
        data = self._read(count * _F32.itemsize)
        return np.frombuffer(data, dtype=_F32).reshape(shape).copy()

    def at_end(self) -> bool:
        return self.stream.read(1) == b""
