"""Little-endian binary reader/writer helpers used by the artifact formats."""

from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagicError, TruncatedFileError, VersionMismatchError


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def raw(self, data: bytes) -> None:
        self._parts.append(bytes(data))

    def pack(self, fmt: str, *values) -> None:
        self._parts.append(struct.pack("<" + fmt, *values))

    def name(self, name: str) -> None:
        encoded = name.encode("utf-8")
        self.pack("H", len(encoded))
        self.raw(encoded)

    def array(self, arr: np.ndarray, dtype: str) -> None:
        self._parts.append(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = memoryview(data)
        self.pos = 0

    def remaining(self) -> int:
        return len(self._data) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self._data):
            raise TruncatedFileError(f"truncated while reading {what}")
        out = bytes(self._data[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def name(self, what: str) -> str:
        (n,) = self.unpack("H", what)
        return self.take(n, what).decode("utf-8")

    def array(self, count: int, dtype: str, what: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        buf = self.take(count * dt.itemsize, what)
        return np.frombuffer(buf, dtype=dt).astype(np.dtype(dtype), copy=True)


def check_header(reader: Reader, magic: bytes, version: int) -> None:
    if reader.remaining() < len(magic):
        raise TruncatedFileError("truncated while reading magic")
    got = reader.take(len(magic), "magic")
    if got != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {got!r}")
    (v,) = reader.unpack("I", "version")
    if v != version:
        raise VersionMismatchError(f"version mismatch: expected {version}, got {v}")
