"""Canonical byte encoding shared by ledger transactions, blocks and payloads.

Integers are fixed-width big-endian; byte strings carry a 4-byte big-endian
length prefix. Decoding is strict: any leftover or missing byte is an error,
so every value has exactly one encoding.
"""

from __future__ import annotations

import struct

_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")

U64_MAX = (1 << 64) - 1


class DecodeError(ValueError):
    """Raised when bytes do not form a canonical encoding."""


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        self._parts.append(_U8.pack(value))
        return self

    def u16(self, value: int) -> "Writer":
        self._parts.append(_U16.pack(value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(_U32.pack(value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(_U64.pack(value))
        return self

    def fixed(self, data: bytes, size: int) -> "Writer":
        if len(data) != size:
            raise ValueError(f"expected {size} bytes, got {len(data)}")
        self._parts.append(bytes(data))
        return self

    def blob(self, data: bytes) -> "Writer":
        self._parts.append(_U32.pack(len(data)))
        self._parts.append(bytes(data))
        return self

    def text(self, value: str) -> "Writer":
        return self.blob(value.encode("utf-8"))

    def raw(self, data: bytes) -> "Writer":
        self._parts.append(bytes(data))
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    """Cursor over a byte buffer; every read raises DecodeError on underrun."""

    __slots__ = ("_buf", "_pos")

    def __init__(self, data: bytes, pos: int = 0) -> None:
        self._buf = data
        self._pos = pos

    @property
    def pos(self) -> int:
        return self._pos

    def remaining(self) -> int:
        return len(self._buf) - self._pos

    def _take(self, size: int) -> bytes:
        end = self._pos + size
        if end > len(self._buf):
            raise DecodeError(f"need {size} bytes at offset {self._pos}, have {self.remaining()}")
        chunk = self._buf[self._pos:end]
        self._pos = end
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self._take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def fixed(self, size: int) -> bytes:
        return bytes(self._take(size))

    def blob(self, limit: int | None = None) -> bytes:
        size = self.u32()
        if limit is not None and size > limit:
            raise DecodeError(f"byte string of {size} bytes exceeds limit {limit}")
        return bytes(self._take(size))

    def text(self, limit: int | None = None) -> str:
        raw = self.blob(limit)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid UTF-8: {exc}") from None

    def rest(self) -> bytes:
        return bytes(self._take(self.remaining()))

    def expect_end(self) -> None:
        if self.remaining():
            raise DecodeError(f"{self.remaining()} trailing bytes")
