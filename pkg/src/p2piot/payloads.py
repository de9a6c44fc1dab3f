"""Byte layouts of the per-channel transaction payloads.

Every payload starts with a one-byte opcode. A gateway relaying for a device
that cannot sign prefixes the device's payload with ``0xFF ‖ origin key``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .codec import DecodeError, Reader, Writer
from .ledger import HASH_SIZE, KEY_SIZE, Channel, PeerId

MAX_MEMO = 64
MAX_METADATA = 256
MAX_DESCRIPTION = 256
MAX_REFERENCE = 256
MAX_TOPIC = 64
MAX_ENDPOINT = 256
MAX_CURRENCY = 16

DELEGATED = 0xFF


class PayloadError(DecodeError):
    pass


class Role(enum.IntEnum):
    DEVICE = 1
    GATEWAY = 2
    EDGE_PROVIDER = 3
    CLOUD_PROVIDER = 4
    BUYER = 5
    SELLER = 6


class RecordKind(enum.IntEnum):
    ORDER = 1
    INVOICE = 2
    PAYMENT_RECEIPT = 3
    DELIVERY_RECEIPT = 4
    DISPUTE = 5
    CLOSE = 6


class Delivery(enum.IntEnum):
    SDPP_STREAM = 1
    ESCROWED_BATCH = 2


class Op(enum.IntEnum):
    MINT = 0x01
    TRANSFER = 0x02
    REGISTER = 0x03
    RATE = 0x04
    RECORD = 0x05
    CONFIG = 0x10
    ESCROW_OPEN = 0x20
    ESCROW_FUND = 0x21
    ESCROW_CONFIRM = 0x22
    ESCROW_SETTLE = 0x23
    ESCROW_DISPUTE = 0x24
    ESCROW_EXPIRE = 0x25
    PRODUCT_POST = 0x30
    PRODUCT_RETIRE = 0x31


CHANNEL_OPS = {
    Channel.PAYMENT: {Op.MINT, Op.TRANSFER},
    Channel.IDENTITY: {Op.REGISTER},
    Channel.RATING: {Op.RATE},
    Channel.RECORDS: {Op.RECORD},
    Channel.APP_SPECIFIC: {
        Op.CONFIG,
        Op.ESCROW_OPEN,
        Op.ESCROW_FUND,
        Op.ESCROW_CONFIRM,
        Op.ESCROW_SETTLE,
        Op.ESCROW_DISPUTE,
        Op.ESCROW_EXPIRE,
        Op.PRODUCT_POST,
        Op.PRODUCT_RETIRE,
    },
}


def _peer(r: Reader) -> PeerId:
    return PeerId(r.fixed(KEY_SIZE))


def _enum(kind, value: int):
    try:
        return kind(value)
    except ValueError:
        raise PayloadError(f"bad {kind.__name__} value {value}") from None


@dataclass(frozen=True)
class Mint:
    to: PeerId
    amount: int
    op = Op.MINT

    def write(self, w: Writer) -> None:
        w.fixed(self.to.public_key, KEY_SIZE).u64(self.amount)

    @classmethod
    def read(cls, r: Reader) -> "Mint":
        return cls(_peer(r), r.u64())


@dataclass(frozen=True)
class Transfer:
    to: PeerId
    amount: int
    memo: bytes = b""
    op = Op.TRANSFER

    def write(self, w: Writer) -> None:
        if len(self.memo) > MAX_MEMO:
            raise ValueError("memo longer than 64 bytes")
        w.fixed(self.to.public_key, KEY_SIZE).u64(self.amount).blob(self.memo)

    @classmethod
    def read(cls, r: Reader) -> "Transfer":
        return cls(_peer(r), r.u64(), r.blob(MAX_MEMO))


@dataclass(frozen=True)
class Register:
    role: Role
    metadata: str = ""
    op = Op.REGISTER

    def write(self, w: Writer) -> None:
        if len(self.metadata.encode("utf-8")) > MAX_METADATA:
            raise ValueError("metadata longer than 256 bytes")
        w.u8(self.role).text(self.metadata)

    @classmethod
    def read(cls, r: Reader) -> "Register":
        return cls(_enum(Role, r.u8()), r.text(MAX_METADATA))


@dataclass(frozen=True)
class Rate:
    subject: PeerId
    score: int
    tx_ref: bytes
    op = Op.RATE

    def write(self, w: Writer) -> None:
        w.fixed(self.subject.public_key, KEY_SIZE).u8(self.score).fixed(self.tx_ref, HASH_SIZE)

    @classmethod
    def read(cls, r: Reader) -> "Rate":
        return cls(_peer(r), r.u8(), r.fixed(HASH_SIZE))


@dataclass(frozen=True)
class Record:
    kind: RecordKind
    parties: tuple[PeerId, PeerId]
    reference: bytes
    digest: bytes = b""
    op = Op.RECORD

    def write(self, w: Writer) -> None:
        if len(self.reference) > MAX_REFERENCE:
            raise ValueError("reference longer than 256 bytes")
        w.u8(self.kind)
        w.fixed(self.parties[0].public_key, KEY_SIZE).fixed(self.parties[1].public_key, KEY_SIZE)
        w.blob(self.reference).blob(self.digest)

    @classmethod
    def read(cls, r: Reader) -> "Record":
        kind = _enum(RecordKind, r.u8())
        parties = (_peer(r), _peer(r))
        return cls(kind, parties, r.blob(MAX_REFERENCE), r.blob(HASH_SIZE))


@dataclass(frozen=True)
class Config:
    fee: int
    currency_label: str
    ban_min_count: int = 5
    ban_mean_num: int = 2
    ban_mean_den: int = 1
    op = Op.CONFIG

    def write(self, w: Writer) -> None:
        w.u64(self.fee).text(self.currency_label)
        w.u32(self.ban_min_count).u32(self.ban_mean_num).u32(self.ban_mean_den)

    @classmethod
    def read(cls, r: Reader) -> "Config":
        cfg = cls(r.u64(), r.text(MAX_CURRENCY), r.u32(), r.u32(), r.u32())
        if cfg.ban_mean_den == 0:
            raise PayloadError("zero denominator in ban threshold")
        return cfg


@dataclass(frozen=True)
class EscrowOpen:
    escrow_id: bytes
    seller: PeerId
    buyer: PeerId
    price: int
    deposit: int
    deadline: int
    op = Op.ESCROW_OPEN

    def write(self, w: Writer) -> None:
        w.fixed(self.escrow_id, HASH_SIZE)
        w.fixed(self.seller.public_key, KEY_SIZE).fixed(self.buyer.public_key, KEY_SIZE)
        w.u64(self.price).u64(self.deposit).u64(self.deadline)

    @classmethod
    def read(cls, r: Reader) -> "EscrowOpen":
        return cls(r.fixed(HASH_SIZE), _peer(r), _peer(r), r.u64(), r.u64(), r.u64())


@dataclass(frozen=True)
class EscrowAction:
    """fund / confirm / settle / dispute / expire; ``at_height`` is only used by expire."""

    op: Op
    escrow_id: bytes
    at_height: int = 0

    def write(self, w: Writer) -> None:
        w.fixed(self.escrow_id, HASH_SIZE).u64(self.at_height)

    @classmethod
    def reader(cls, op: Op):
        def read(r: Reader) -> "EscrowAction":
            return cls(op, r.fixed(HASH_SIZE), r.u64())

        return read


@dataclass(frozen=True)
class ProductPost:
    product_id: bytes
    topic: str
    description: str
    price_per_record: int
    delivery: Delivery
    endpoint: bytes = b""
    op = Op.PRODUCT_POST

    def write(self, w: Writer) -> None:
        if len(self.description.encode("utf-8")) > MAX_DESCRIPTION:
            raise ValueError("description longer than 256 bytes")
        if len(self.topic.encode("utf-8")) > MAX_TOPIC:
            raise ValueError("topic longer than 64 bytes")
        w.fixed(self.product_id, HASH_SIZE).text(self.topic).text(self.description)
        w.u64(self.price_per_record).u8(self.delivery).blob(self.endpoint)

    @classmethod
    def read(cls, r: Reader) -> "ProductPost":
        return cls(
            r.fixed(HASH_SIZE),
            r.text(MAX_TOPIC),
            r.text(MAX_DESCRIPTION),
            r.u64(),
            _enum(Delivery, r.u8()),
            r.blob(MAX_ENDPOINT),
        )


@dataclass(frozen=True)
class ProductRetire:
    product_id: bytes
    op = Op.PRODUCT_RETIRE

    def write(self, w: Writer) -> None:
        w.fixed(self.product_id, HASH_SIZE)

    @classmethod
    def read(cls, r: Reader) -> "ProductRetire":
        return cls(r.fixed(HASH_SIZE))


_READERS = {
    Op.MINT: Mint.read,
    Op.TRANSFER: Transfer.read,
    Op.REGISTER: Register.read,
    Op.RATE: Rate.read,
    Op.RECORD: Record.read,
    Op.CONFIG: Config.read,
    Op.ESCROW_OPEN: EscrowOpen.read,
    Op.PRODUCT_POST: ProductPost.read,
    Op.PRODUCT_RETIRE: ProductRetire.read,
}
for _op in (Op.ESCROW_FUND, Op.ESCROW_CONFIRM, Op.ESCROW_SETTLE, Op.ESCROW_DISPUTE, Op.ESCROW_EXPIRE):
    _READERS[_op] = EscrowAction.reader(_op)


def encode_op(body) -> bytes:
    w = Writer().u8(body.op)
    body.write(w)
    return w.getvalue()


def encode_delegated(origin: PeerId, inner: bytes) -> bytes:
    if inner[:1] == bytes([DELEGATED]):
        raise ValueError("delegation envelopes do not nest")
    return bytes([DELEGATED]) + origin.public_key + inner


def split_delegation(payload: bytes) -> tuple[PeerId | None, bytes]:
    if payload[:1] == bytes([DELEGATED]):
        if len(payload) < 1 + KEY_SIZE:
            raise PayloadError("truncated delegation envelope")
        return PeerId(payload[1:1 + KEY_SIZE]), payload[1 + KEY_SIZE:]
    return None, payload


def delegation_origin(payload: bytes) -> PeerId | None:
    try:
        return split_delegation(payload)[0]
    except PayloadError:
        return None


def decode_op(channel: Channel, payload: bytes):
    """Decode a payload without envelope; raises PayloadError on anything off."""
    r = Reader(payload)
    try:
        op = Op(r.u8())
    except (ValueError, DecodeError):
        raise PayloadError("unknown opcode") from None
    if op not in CHANNEL_OPS[Channel(channel)]:
        raise PayloadError(f"{op.name} not allowed on {Channel(channel).name}")
    try:
        body = _READERS[op](r)
        r.expect_end()
    except PayloadError:
        raise
    except DecodeError as exc:
        raise PayloadError(str(exc)) from None
    return body


def decode_payload(channel: Channel, payload: bytes):
    """Returns ``(origin, body)``; origin is None unless relayed by a gateway."""
    origin, inner = split_delegation(payload)
    return origin, decode_op(channel, inner)


def named_peers(channel: Channel, payload: bytes) -> set[bytes]:
    """Public keys of counterparties named inside a payload."""
    try:
        _, body = decode_payload(channel, payload)
    except PayloadError:
        return set()
    if isinstance(body, (Mint, Transfer)):
        return {body.to.public_key}
    if isinstance(body, Rate):
        return {body.subject.public_key}
    if isinstance(body, Record):
        return {p.public_key for p in body.parties}
    if isinstance(body, EscrowOpen):
        return {body.seller.public_key, body.buyer.public_key}
    return set()
