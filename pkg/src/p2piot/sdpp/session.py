"""Seller and buyer automata for pay-per-record streaming.

Both sides are immutable session records advanced by pure step functions::

    new_session, outgoing_messages, effects = seller_step(session, event)

Effects are requests for the host (submit a ledger transaction, anchor a
record, check a payment, close the transport); the host feeds the outcome back
as another event. Nothing here touches a clock, socket or ledger.

Seller automaton::

    Handshake --HELLO--> Streaming --ORDER--> (DATA* INVOICE)* ... --> Closed
                             |  ^                  |
                             |  +---- RECEIPT -----+ AwaitingPayment
                             +--> Faulted on any protocol violation or timeout
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from ..ledger import Channel, PeerId, Transaction, sha256
from ..payloads import PayloadError, RecordKind, Transfer, decode_payload
from ..services import transfer
from .messages import (
    Close,
    Data,
    Error,
    ErrorCode,
    Hello,
    Invoice,
    Menu,
    Message,
    Order,
    PaymentRef,
    Receipt,
)


class Phase(enum.Enum):
    HANDSHAKE = "Handshake"
    STREAMING = "Streaming"
    AWAITING_PAYMENT = "AwaitingPayment"
    CLOSED = "Closed"
    FAULTED = "Faulted"


TERMINAL = (Phase.CLOSED, Phase.FAULTED)


# -- events -----------------------------------------------------------------


@dataclass(frozen=True)
class Start:
    pass


@dataclass(frozen=True)
class Received:
    msg: Message


@dataclass(frozen=True)
class Tick:
    now: int


@dataclass(frozen=True)
class DataAvailable:
    record: bytes


@dataclass(frozen=True)
class PaymentLookup:
    """Host's answer to CheckPayment: the committed tx (or None) and whether replay applied it."""

    tx_id: bytes
    tx: Transaction | None
    applied: bool


@dataclass(frozen=True)
class PaymentSubmitted:
    tx_id: bytes


@dataclass(frozen=True)
class PaymentFailed:
    reason: str


@dataclass(frozen=True)
class TransportError:
    reason: str


# -- effects ----------------------------------------------------------------


@dataclass(frozen=True)
class SubmitLedgerTx:
    tx: Transaction


@dataclass(frozen=True)
class RecordEvent:
    kind: RecordKind
    parties: tuple[PeerId, PeerId]
    reference: bytes
    digest: bytes = b""


@dataclass(frozen=True)
class CheckPayment:
    tx_id: bytes


@dataclass(frozen=True)
class CloseTransport:
    pass


@dataclass(frozen=True)
class InvoiceLine:
    from_seq: int
    to_seq: int
    amount: int


# -- seller -----------------------------------------------------------------


@dataclass(frozen=True)
class SellerSession:
    seller: PeerId
    price_per_record: int
    invoice_interval: int = 10
    currency_label: str = "TOK"
    max_outstanding: int = 1
    timeout: int = 100
    session_id: bytes = b""
    counterparty: PeerId | None = None
    phase: Phase = Phase.HANDSHAKE
    requested: int | None = None
    records_sent: int = 0
    invoiced_upto: int = 0
    invoices_issued: int = 0
    invoices_paid: int = 0
    unpaid_invoices: tuple[InvoiceLine, ...] = ()
    range_hashes: tuple[bytes, ...] = ()
    pending_ref: bytes | None = None
    used_payments: frozenset[bytes] = frozenset()
    send_seq: int = 0
    recv_seq: int = -1
    clock: int = 0
    last_heard: int = 0

    @property
    def ready_for_data(self) -> bool:
        return (
            self.phase is Phase.STREAMING
            and self.requested is not None
            and self.records_sent < self.requested
            and len(self.unpaid_invoices) < self.max_outstanding
        )

    @property
    def paid_records(self) -> int:
        unpaid = sum(i.to_seq - i.from_seq + 1 for i in self.unpaid_invoices)
        return self.invoiced_upto - unpaid


@dataclass(frozen=True)
class BuyerSession:
    buyer: PeerId
    session_id: bytes
    requested: int
    expected_seller: PeerId | None = None
    expected_price: int | None = None
    timeout: int = 100
    counterparty: PeerId | None = None
    price_per_record: int | None = None
    invoice_interval: int | None = None
    currency_label: str = ""
    phase: Phase = Phase.HANDSHAKE
    records_received: int = 0
    invoiced_upto: int = 0
    paid_upto: int = 0
    invoices_received: int = 0
    invoices_paid: int = 0
    unpaid_invoices: tuple[InvoiceLine, ...] = ()
    in_flight_tx: bytes | None = None
    paying: bool = False
    send_seq: int = 0
    recv_seq: int = -1
    clock: int = 0
    last_heard: int = 0


Step = tuple[object, list[Message], list[object]]


class _Out:
    """Collects messages with per-direction sequence numbers."""

    def __init__(self, session) -> None:
        self.session = session
        self.msgs: list[Message] = []
        self.effects: list[object] = []

    def send(self, cls, **fields) -> None:
        s = self.session
        self.msgs.append(cls(session_id=s.session_id, seq=s.send_seq, **fields))
        self.session = replace(s, send_seq=s.send_seq + 1)

    def set(self, **changes) -> None:
        self.session = replace(self.session, **changes)

    def done(self) -> Step:
        return self.session, self.msgs, self.effects


def _parties(s) -> tuple[PeerId, PeerId] | None:
    if s.counterparty is None:
        return None
    if isinstance(s, SellerSession):
        return (s.seller, s.counterparty)
    return (s.counterparty, s.buyer)


def _fault(out: _Out, code: ErrorCode, reason: str) -> Step:
    if out.session.session_id:  # before HELLO there is nobody to address
        out.send(Error, code=int(code), reason=reason)
    parties = _parties(out.session)
    if parties is not None and out.session.session_id:
        out.effects.append(RecordEvent(RecordKind.DISPUTE, parties, out.session.session_id))
    out.effects.append(CloseTransport())
    out.set(phase=Phase.FAULTED)
    return out.done()


def _accept_header(out: _Out, msg: Message) -> bool:
    """Common sequencing checks; returns False after faulting the session."""
    s = out.session
    if s.session_id and msg.session_id != s.session_id:
        _fault(out, ErrorCode.PROTOCOL_VIOLATION, "session id mismatch")
        return False
    if msg.seq <= s.recv_seq:
        _fault(out, ErrorCode.PROTOCOL_VIOLATION, f"sequence {msg.seq} not after {s.recv_seq}")
        return False
    out.set(recv_seq=msg.seq, last_heard=s.clock)
    return True


def _seller_finish_if_done(out: _Out) -> None:
    s = out.session
    if s.phase is Phase.STREAMING and s.requested is not None and s.records_sent == s.requested and not s.unpaid_invoices:
        out.send(Close, reason="complete")
        out.effects.append(RecordEvent(RecordKind.CLOSE, _parties(s), s.session_id))
        out.effects.append(CloseTransport())
        out.set(phase=Phase.CLOSED)


def _check_payment(s: SellerSession, lookup: PaymentLookup) -> str | None:
    """Reason the looked-up payment is unacceptable, or None if it pays the head invoice."""
    tx = lookup.tx
    if tx is None:
        return "payment not found on ledger"
    if not lookup.applied:
        return "payment was not applied by the ledger"
    if tx.channel != Channel.PAYMENT:
        return "referenced transaction is not a payment"
    try:
        origin, body = decode_payload(tx.channel, tx.payload)
    except PayloadError:
        return "undecodable payment"
    if not isinstance(body, Transfer):
        return "referenced transaction is not a transfer"
    payer = origin or tx.sender
    if payer != s.counterparty or body.to != s.seller:
        return "payment between the wrong parties"
    if body.memo != s.session_id:
        return "payment not bound to this session"
    if body.amount != s.unpaid_invoices[0].amount:
        return f"paid {body.amount}, invoiced {s.unpaid_invoices[0].amount}"
    return None


def seller_step(session: SellerSession, event) -> Step:
    out = _Out(session)
    s = session
    if s.phase in TERMINAL:
        if isinstance(event, Tick):
            out.set(clock=event.now)
        return out.done()

    if isinstance(event, Tick):
        out.set(clock=event.now)
        waiting = s.phase is Phase.AWAITING_PAYMENT or s.requested is None
        if waiting and s.pending_ref is None and event.now - s.last_heard > s.timeout:
            code = ErrorCode.PAYMENT_TIMEOUT if s.phase is Phase.AWAITING_PAYMENT else ErrorCode.TIMEOUT
            return _fault(out, code, "peer silent past timeout")
        return out.done()

    if isinstance(event, TransportError):
        return _fault(out, ErrorCode.TRANSPORT, event.reason)

    if isinstance(event, DataAvailable):
        if not s.ready_for_data:
            return out.done()
        out.send(Data, record=event.record)
        sent = s.records_sent + 1
        hashes = s.range_hashes + (sha256(event.record),)
        out.set(records_sent=sent, range_hashes=hashes)
        if sent - s.invoiced_upto == s.invoice_interval or sent == s.requested:
            line = InvoiceLine(s.invoiced_upto + 1, sent, (sent - s.invoiced_upto) * s.price_per_record)
            out.send(Invoice, from_seq=line.from_seq, to_seq=line.to_seq, amount_due=line.amount)
            out.effects.append(RecordEvent(RecordKind.INVOICE, _parties(s), s.session_id, sha256(b"".join(hashes))))
            unpaid = s.unpaid_invoices + (line,)
            out.set(
                invoiced_upto=sent,
                invoices_issued=s.invoices_issued + 1,
                unpaid_invoices=unpaid,
                range_hashes=(),
                phase=Phase.AWAITING_PAYMENT if len(unpaid) >= s.max_outstanding else Phase.STREAMING,
                last_heard=s.clock,
            )
        return out.done()

    if isinstance(event, PaymentLookup):
        if event.tx_id != s.pending_ref:
            return out.done()
        problem = _check_payment(s, event)
        if problem is not None:
            return _fault(out, ErrorCode.PAYMENT_INVALID, problem)
        out.send(Receipt, tx_id=event.tx_id)
        out.effects.append(RecordEvent(RecordKind.PAYMENT_RECEIPT, _parties(s), s.session_id, event.tx_id))
        unpaid = s.unpaid_invoices[1:]
        out.set(
            unpaid_invoices=unpaid,
            invoices_paid=s.invoices_paid + 1,
            used_payments=s.used_payments | {event.tx_id},
            pending_ref=None,
            phase=Phase.STREAMING if len(unpaid) < s.max_outstanding else Phase.AWAITING_PAYMENT,
            last_heard=s.clock,
        )
        _seller_finish_if_done(out)
        return out.done()

    if not isinstance(event, Received):
        raise TypeError(f"unexpected seller event {event!r}")

    msg = event.msg
    if s.phase is Phase.HANDSHAKE:
        if not isinstance(msg, Hello):
            return _fault(out, ErrorCode.PROTOCOL_VIOLATION, f"expected HELLO, got {msg.variant.name}")
        if msg.seq <= s.recv_seq:
            return _fault(out, ErrorCode.PROTOCOL_VIOLATION, "bad sequence")
        out.set(session_id=msg.session_id, counterparty=PeerId(msg.peer), recv_seq=msg.seq,
                last_heard=s.clock, phase=Phase.STREAMING)
        out.send(Hello, peer=s.seller.public_key)
        out.send(Menu, price_per_record=s.price_per_record, invoice_interval=s.invoice_interval,
                 currency_label=s.currency_label)
        return out.done()

    if not _accept_header(out, msg):
        return out.done()
    s = out.session

    if isinstance(msg, Error):
        out.effects.append(CloseTransport())
        out.set(phase=Phase.FAULTED)
        return out.done()
    if isinstance(msg, Close):
        if s.unpaid_invoices or s.pending_ref is not None:
            out.effects.append(RecordEvent(RecordKind.DISPUTE, _parties(s), s.session_id))
        else:
            out.effects.append(RecordEvent(RecordKind.CLOSE, _parties(s), s.session_id))
        out.effects.append(CloseTransport())
        out.set(phase=Phase.CLOSED)
        return out.done()
    if isinstance(msg, Order):
        if s.requested is not None:
            return _fault(out, ErrorCode.PROTOCOL_VIOLATION, "duplicate ORDER")
        out.set(requested=msg.record_count)
        out.effects.append(RecordEvent(RecordKind.ORDER, _parties(s), s.session_id))
        _seller_finish_if_done(out)
        return out.done()
    if isinstance(msg, PaymentRef):
        if not s.unpaid_invoices or s.pending_ref is not None:
            return _fault(out, ErrorCode.PROTOCOL_VIOLATION, "unexpected PAYMENT_REF")
        if msg.tx_id in s.used_payments:
            return _fault(out, ErrorCode.PAYMENT_INVALID, "payment reused")
        out.set(pending_ref=msg.tx_id)
        out.effects.append(CheckPayment(msg.tx_id))
        return out.done()
    return _fault(out, ErrorCode.PROTOCOL_VIOLATION, f"unexpected {msg.variant.name} from buyer")


# -- buyer ------------------------------------------------------------------


def _buyer_pay_next(out: _Out) -> None:
    b = out.session
    if b.paying or not b.unpaid_invoices:
        return
    line = b.unpaid_invoices[0]
    tx = transfer(b.buyer, b.counterparty, line.amount, memo=b.session_id)
    out.effects.append(SubmitLedgerTx(tx))
    out.set(paying=True, in_flight_tx=None, phase=Phase.AWAITING_PAYMENT)


def buyer_start(session: BuyerSession) -> Step:
    return buyer_step(session, Start())


def buyer_step(session: BuyerSession, event) -> Step:
    out = _Out(session)
    b = session
    if b.phase in TERMINAL:
        if isinstance(event, Tick):
            out.set(clock=event.now)
        return out.done()

    if isinstance(event, Start):
        if b.send_seq:
            return out.done()
        out.send(Hello, peer=b.buyer.public_key)
        out.set(last_heard=b.clock)
        return out.done()

    if isinstance(event, Tick):
        out.set(clock=event.now)
        if event.now - b.last_heard > b.timeout:
            out.send(Close, reason="timeout")
            if b.counterparty is not None:
                out.effects.append(RecordEvent(RecordKind.DISPUTE, _parties(b), b.session_id))
            out.effects.append(CloseTransport())
            out.set(phase=Phase.CLOSED)
        return out.done()

    if isinstance(event, TransportError):
        return _fault(out, ErrorCode.TRANSPORT, event.reason)

    if isinstance(event, PaymentSubmitted):
        if not b.paying or b.in_flight_tx is not None:
            return out.done()
        out.send(PaymentRef, tx_id=event.tx_id)
        out.set(in_flight_tx=event.tx_id)
        return out.done()

    if isinstance(event, PaymentFailed):
        out.send(Close, reason=f"cannot pay: {event.reason}")
        out.effects.append(CloseTransport())
        out.set(phase=Phase.CLOSED, paying=False)
        return out.done()

    if not isinstance(event, Received):
        raise TypeError(f"unexpected buyer event {event!r}")

    msg = event.msg
    if not _accept_header(out, msg):
        return out.done()
    b = out.session

    if isinstance(msg, Error):
        out.effects.append(CloseTransport())
        out.set(phase=Phase.FAULTED)
        return out.done()
    if isinstance(msg, Close):
        out.effects.append(CloseTransport())
        out.set(phase=Phase.CLOSED)
        return out.done()

    if b.phase is Phase.HANDSHAKE:
        if isinstance(msg, Hello) and b.counterparty is None:
            seller = PeerId(msg.peer)
            if b.expected_seller is not None and seller != b.expected_seller:
                return _fault(out, ErrorCode.PROTOCOL_VIOLATION, "unexpected seller identity")
            out.set(counterparty=seller)
            return out.done()
        if isinstance(msg, Menu) and b.counterparty is not None:
            if b.expected_price is not None and msg.price_per_record != b.expected_price:
                out.send(Close, reason="price differs from listing")
                out.effects.append(CloseTransport())
                out.set(phase=Phase.CLOSED)
                return out.done()
            out.set(price_per_record=msg.price_per_record, invoice_interval=msg.invoice_interval,
                    currency_label=msg.currency_label, phase=Phase.STREAMING)
            out.send(Order, record_count=b.requested)
            return out.done()
        return _fault(out, ErrorCode.PROTOCOL_VIOLATION, f"unexpected {msg.variant.name} during handshake")

    if isinstance(msg, Data):
        if b.records_received >= b.requested:
            return _fault(out, ErrorCode.PROTOCOL_VIOLATION, "more records than ordered")
        out.set(records_received=b.records_received + 1)
        return out.done()
    if isinstance(msg, Invoice):
        count = msg.to_seq - msg.from_seq + 1
        if (
            msg.from_seq != b.invoiced_upto + 1
            or msg.to_seq < msg.from_seq
            or msg.to_seq > b.records_received
            or msg.amount_due != count * b.price_per_record
        ):
            return _fault(out, ErrorCode.BAD_INVOICE,
                          f"invoice [{msg.from_seq},{msg.to_seq}] for {msg.amount_due} does not match delivery")
        out.set(
            invoiced_upto=msg.to_seq,
            invoices_received=b.invoices_received + 1,
            unpaid_invoices=b.unpaid_invoices + (InvoiceLine(msg.from_seq, msg.to_seq, msg.amount_due),),
        )
        _buyer_pay_next(out)
        return out.done()
    if isinstance(msg, Receipt):
        if not b.paying or msg.tx_id != b.in_flight_tx:
            return _fault(out, ErrorCode.PROTOCOL_VIOLATION, "receipt for unknown payment")
        line = b.unpaid_invoices[0]
        out.set(
            paid_upto=line.to_seq,
            invoices_paid=b.invoices_paid + 1,
            unpaid_invoices=b.unpaid_invoices[1:],
            paying=False,
            in_flight_tx=None,
            phase=Phase.STREAMING,
        )
        _buyer_pay_next(out)
        return out.done()
    return _fault(out, ErrorCode.PROTOCOL_VIOLATION, f"unexpected {msg.variant.name} from seller")
