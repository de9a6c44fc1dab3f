"""SDPP frames.

Layout (big-endian)::

    'S' 'D' | version 0x01 | variant u8 | payload length u32 | payload

The payload is ``session_id (16 bytes) ‖ seq u64`` followed by the variant's
fields in declaration order; byte strings and text carry a u32 length prefix.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields
from typing import ClassVar, Iterator

from ..codec import DecodeError, Reader, Writer

MAGIC = b"SD"
VERSION = 0x01
HEADER_SIZE = 8
MAX_PAYLOAD = 1 << 20
SESSION_ID_SIZE = 16


class FrameError(Exception):
    pass


class NotSdpp(FrameError):
    pass


class FrameTooLarge(FrameError):
    pass


class UnknownMessage(FrameError):
    pass


class Incomplete(FrameError):
    """More bytes are needed; retry once they arrive."""


class MalformedFrame(FrameError):
    pass


class Variant(enum.IntEnum):
    HELLO = 1
    MENU = 2
    ORDER = 3
    DATA = 4
    INVOICE = 5
    PAYMENT_REF = 6
    RECEIPT = 7
    CLOSE = 8
    ERROR = 9


class ErrorCode(enum.IntEnum):
    PROTOCOL_VIOLATION = 1
    BAD_INVOICE = 2
    PAYMENT_INVALID = 3
    PAYMENT_TIMEOUT = 4
    TIMEOUT = 5
    TRANSPORT = 6


# field kinds: "u16", "u32", "u64", "key" (32 raw bytes), "hash" (32 raw bytes), "blob", "text"
@dataclass(frozen=True)
class Message:
    session_id: bytes
    seq: int

    variant: ClassVar[Variant]
    layout: ClassVar[tuple[tuple[str, str], ...]] = ()


@dataclass(frozen=True)
class Hello(Message):
    peer: bytes
    variant = Variant.HELLO
    layout = (("peer", "key"),)


@dataclass(frozen=True)
class Menu(Message):
    price_per_record: int
    invoice_interval: int
    currency_label: str
    variant = Variant.MENU
    layout = (("price_per_record", "u64"), ("invoice_interval", "u32"), ("currency_label", "text"))


@dataclass(frozen=True)
class Order(Message):
    record_count: int
    variant = Variant.ORDER
    layout = (("record_count", "u64"),)


@dataclass(frozen=True)
class Data(Message):
    record: bytes
    variant = Variant.DATA
    layout = (("record", "blob"),)


@dataclass(frozen=True)
class Invoice(Message):
    from_seq: int
    to_seq: int
    amount_due: int
    variant = Variant.INVOICE
    layout = (("from_seq", "u64"), ("to_seq", "u64"), ("amount_due", "u64"))


@dataclass(frozen=True)
class PaymentRef(Message):
    tx_id: bytes
    variant = Variant.PAYMENT_REF
    layout = (("tx_id", "hash"),)


@dataclass(frozen=True)
class Receipt(Message):
    tx_id: bytes
    variant = Variant.RECEIPT
    layout = (("tx_id", "hash"),)


@dataclass(frozen=True)
class Close(Message):
    reason: str
    variant = Variant.CLOSE
    layout = (("reason", "text"),)


@dataclass(frozen=True)
class Error(Message):
    code: int
    reason: str
    variant = Variant.ERROR
    layout = (("code", "u16"), ("reason", "text"))


MESSAGE_TYPES: dict[Variant, type[Message]] = {
    cls.variant: cls for cls in (Hello, Menu, Order, Data, Invoice, PaymentRef, Receipt, Close, Error)
}

_WRITE = {
    "u16": lambda w, v: w.u16(v),
    "u32": lambda w, v: w.u32(v),
    "u64": lambda w, v: w.u64(v),
    "key": lambda w, v: w.fixed(v, 32),
    "hash": lambda w, v: w.fixed(v, 32),
    "blob": lambda w, v: w.blob(v),
    "text": lambda w, v: w.text(v),
}
_READ = {
    "u16": Reader.u16,
    "u32": Reader.u32,
    "u64": Reader.u64,
    "key": lambda r: r.fixed(32),
    "hash": lambda r: r.fixed(32),
    "blob": lambda r: r.blob(MAX_PAYLOAD),
    "text": lambda r: r.text(MAX_PAYLOAD),
}


def encode_frame(msg: Message) -> bytes:
    w = Writer().fixed(msg.session_id, SESSION_ID_SIZE).u64(msg.seq)
    for name, kind in msg.layout:
        _WRITE[kind](w, getattr(msg, name))
    payload = w.getvalue()
    if len(payload) > MAX_PAYLOAD:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds 1 MiB")
    return MAGIC + bytes([VERSION, msg.variant]) + len(payload).to_bytes(4, "big") + payload


def _parse_header(data: bytes) -> tuple[type[Message], int]:
    head = bytes(data[:HEADER_SIZE])
    if not head:
        raise Incomplete("no bytes")
    if head[:2] != MAGIC[:len(head[:2])]:
        raise NotSdpp("bad magic")
    if len(head) >= 3 and head[2] != VERSION:
        raise NotSdpp(f"unsupported version {head[2]}")
    if len(head) < HEADER_SIZE:
        raise Incomplete(f"header needs {HEADER_SIZE} bytes, have {len(head)}")
    length = int.from_bytes(head[4:8], "big")
    if length > MAX_PAYLOAD:
        raise FrameTooLarge(f"declared payload {length} exceeds 1 MiB")
    try:
        cls = MESSAGE_TYPES[Variant(head[3])]
    except ValueError:
        raise UnknownMessage(f"variant byte {head[3]:#04x}") from None
    return cls, length


def read_frame(data: bytes) -> tuple[Message, int]:
    """Decode the first frame in ``data``; returns the message and bytes consumed."""
    cls, length = _parse_header(data)
    end = HEADER_SIZE + length
    if len(data) < end:
        raise Incomplete(f"frame needs {end} bytes, have {len(data)}")
    r = Reader(bytes(data[HEADER_SIZE:end]))
    try:
        session_id = r.fixed(SESSION_ID_SIZE)
        seq = r.u64()
        values = {name: _READ[kind](r) for name, kind in cls.layout}
        r.expect_end()
    except DecodeError as exc:
        raise MalformedFrame(f"{cls.variant.name}: {exc}") from None
    return cls(session_id=session_id, seq=seq, **values), end


def decode_frame(data: bytes) -> Message:
    """Decode exactly one frame; trailing bytes are an error."""
    msg, used = read_frame(data)
    if used != len(data):
        raise MalformedFrame(f"{len(data) - used} bytes after frame")
    return msg


class FrameBuffer:
    """Accumulates stream bytes and yields whole frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf += data

    def __iter__(self) -> Iterator[Message]:
        while self._buf:
            try:
                msg, used = read_frame(bytes(self._buf))
            except Incomplete:
                return
            del self._buf[:used]
            yield msg

    def __len__(self) -> int:
        return len(self._buf)


def message_fields(msg: Message) -> dict:
    return {f.name: getattr(msg, f.name) for f in fields(msg)}
