"""Hosting SDPP sessions: executing effects against a ledger and moving frames.

An :class:`Endpoint` owns one side's session and turns its declarative
effects into ledger submissions and lookups. :class:`SdppLink` wires a seller
and buyer endpoint through an in-memory delayed pipe and is driven tick by tick
alongside a :class:`~p2piot.client.LedgerClient`.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable

from ..client import Account
from ..ledger import Channel, PeerId, QueryFilter, read_query, sha256
from ..payloads import PayloadError, Transfer, decode_payload
from ..services import audit_trail, record_event
from .messages import FrameBuffer, FrameError, encode_frame
from .session import (
    BuyerSession,
    CheckPayment,
    CloseTransport,
    DataAvailable,
    PaymentFailed,
    PaymentLookup,
    PaymentSubmitted,
    Phase,
    Received,
    RecordEvent,
    SellerSession,
    Start,
    SubmitLedgerTx,
    TERMINAL,
    Tick,
    TransportError,
    buyer_step,
    seller_step,
)

log = logging.getLogger(__name__)

PaymentPolicy = Callable[[int, int], bool]
"""``(now, payment_index) -> bool``: whether the buyer pays this invoice."""

DeliveryPolicy = Callable[[int], bool]
"""``now -> bool``: whether the seller releases data this tick."""

RecordSource = Callable[[int], bytes]


def always_pay(now: int, index: int) -> bool:
    return True


def always_deliver(now: int) -> bool:
    return True


def default_records(seq: int) -> bytes:
    return f"record {seq}".encode()


def derive_session_id(seller: PeerId, buyer: PeerId, salt: bytes = b"") -> bytes:
    return sha256(b"sdpp-session" + seller.public_key + buyer.public_key + salt)[:16]


class Endpoint:
    """One side of a session plus the ledger plumbing its effects need.

    ``ledger`` carries payments and ``records`` the anchored records; both
    default to the same instance.
    """

    def __init__(self, session, account: Account, ledger, send: Callable[[bytes], None], *,
                 records=None, pays: PaymentPolicy = always_pay) -> None:
        self.session = session
        self.step = seller_step if isinstance(session, SellerSession) else buyer_step
        self.account = account
        self.ledger = ledger
        self.records = records if records is not None else ledger
        self.send = send
        self.pays = pays
        self.now = 0
        self.closed = False
        self.buffer = FrameBuffer()
        self.payments_attempted = 0
        self.anchors: list[bytes] = []
        self._checks: dict[bytes, int] = {}
        self._queue: deque = deque()

    @property
    def finished(self) -> bool:
        return self.session.phase in TERMINAL and not self._checks

    def feed(self, event) -> None:
        self._queue.append(event)
        while self._queue:
            self.session, msgs, effects = self.step(self.session, self._queue.popleft())
            # anchor before announcing, and close only after the last frame is out
            closing = [e for e in effects if isinstance(e, CloseTransport)]
            for effect in effects:
                if not isinstance(effect, CloseTransport):
                    self._execute(effect)
            for msg in msgs:
                if not self.closed:
                    self.send(encode_frame(msg))
            for effect in closing:
                self._execute(effect)

    def receive(self, data: bytes) -> None:
        if self.closed or not data:
            return
        self.buffer.feed(data)
        try:
            for msg in self.buffer:
                self.feed(Received(msg))
                if self.closed:
                    return
        except FrameError as exc:
            self.feed(TransportError(f"{type(exc).__name__}: {exc}"))

    def poll(self, now: int) -> None:
        self.now = now
        self.feed(Tick(now))
        for tx_id, deadline in list(self._checks.items()):
            if self.ledger.is_committed(tx_id) or now >= deadline:
                del self._checks[tx_id]
                self._resolve(tx_id)

    def _resolve(self, tx_id: bytes) -> None:
        tx, applied = self.ledger.lookup(tx_id)
        self.feed(PaymentLookup(tx_id, tx, applied))

    def _execute(self, effect) -> None:
        if isinstance(effect, SubmitLedgerTx):
            index = self.payments_attempted
            self.payments_attempted += 1
            if not self.pays(self.now, index):
                log.debug("buyer withholds payment %d", index)
                return
            body = decode_payload(effect.tx.channel, effect.tx.payload)[1]
            need = body.amount + self.ledger.fee
            have = self.ledger.state().balance(self.account.peer)
            if have < need:
                self._queue.append(PaymentFailed(f"balance {have} below {need}"))
                return
            signed = self.ledger.issue(self.account, effect.tx)
            self._queue.append(PaymentSubmitted(signed.tx_id))
        elif isinstance(effect, RecordEvent):
            tx = record_event(self.account.peer, effect.kind, effect.parties, effect.reference, effect.digest)
            self.anchors.append(self.records.issue(self.account, tx).tx_id)
        elif isinstance(effect, CheckPayment):
            if self.ledger.is_committed(effect.tx_id) or not self.ledger.is_pending(effect.tx_id):
                self._resolve(effect.tx_id)
            else:
                self._checks[effect.tx_id] = self.now + self.session.timeout
        elif isinstance(effect, CloseTransport):
            self.closed = True
        else:
            raise TypeError(f"unknown effect {effect!r}")


class Pipe:
    """One-directional byte queue with a fixed delivery delay in ticks."""

    def __init__(self, delay: int = 1) -> None:
        self.delay = delay
        self.dropping = False
        self._queue: deque[tuple[int, bytes]] = deque()

    def put(self, now: int, data: bytes) -> None:
        if not self.dropping:
            self._queue.append((now + self.delay, data))

    def take(self, now: int) -> bytes:
        out = bytearray()
        while self._queue and self._queue[0][0] <= now:
            out += self._queue.popleft()[1]
        return bytes(out)


@dataclass(frozen=True)
class SessionReport:
    session_id: bytes
    seller: PeerId
    buyer: PeerId
    records_delivered: int
    records_sent: int
    total_paid: int
    invoices_issued: int
    invoices_paid: int
    records_anchored: int
    seller_phase: Phase
    buyer_phase: Phase
    anchor: bytes | None = None

    @property
    def faulted(self) -> bool:
        return Phase.FAULTED in (self.seller_phase, self.buyer_phase)


def session_payments(ledger, session_id: bytes, buyer: PeerId, seller: PeerId) -> int:
    """Sum of applied ledger transfers from buyer to seller bound to ``session_id``."""
    rejected = ledger.state().rejected_ids()
    total = 0
    for _, tx in read_query(ledger.chain, QueryFilter(channel=Channel.PAYMENT, sender=buyer)):
        if tx.tx_id in rejected:
            continue
        try:
            origin, body = decode_payload(tx.channel, tx.payload)
        except PayloadError:
            continue
        if isinstance(body, Transfer) and (origin or tx.sender) == buyer and body.to == seller and body.memo == session_id:
            total += body.amount
    return total


class SdppLink:
    """Seller and buyer endpoints joined by two in-memory pipes.

    Implements the client's ``Driver`` protocol; ``step`` is called once per tick.
    """

    def __init__(self, seller: Account, buyer: Account, ledger, *, records_wanted: int,
                 price: int, k: int = 10, session_id: bytes | None = None,
                 record_source: RecordSource = default_records, max_outstanding: int = 1,
                 timeout: int = 100, delay: int = 1, records_per_tick: int = 1,
                 pays: PaymentPolicy = always_pay, delivers: DeliveryPolicy = always_deliver,
                 expected_price: int | None = None, records=None) -> None:
        currency = ledger.state().config.currency_label
        sid = session_id or derive_session_id(seller.peer, buyer.peer)
        self.session_id = sid
        self.ledger = ledger
        self.records_ledger = records if records is not None else ledger
        self.to_seller = Pipe(delay)
        self.to_buyer = Pipe(delay)
        self.now = ledger.now if hasattr(ledger, "now") else 0
        self.record_source = record_source
        self.records_per_tick = records_per_tick
        self.delivers = delivers
        self.seller = Endpoint(
            SellerSession(seller.peer, price, k, currency, max_outstanding, timeout, clock=self.now,
                          last_heard=self.now),
            seller, ledger, lambda b: self.to_buyer.put(self.now, b), records=records,
        )
        self.buyer = Endpoint(
            BuyerSession(buyer.peer, sid, records_wanted, expected_seller=seller.peer,
                         expected_price=expected_price, timeout=timeout, clock=self.now, last_heard=self.now),
            buyer, ledger, lambda b: self.to_seller.put(self.now, b), records=records, pays=pays,
        )
        self._started = False

    def drop_transport(self) -> None:
        self.to_seller.dropping = self.to_buyer.dropping = True
        self.to_seller._queue.clear()
        self.to_buyer._queue.clear()

    @property
    def done(self) -> bool:
        return self.seller.finished and self.buyer.finished

    def step(self, now: int) -> None:
        self.now = now
        if not self._started:
            self._started = True
            self.buyer.now = now
            self.buyer.feed(Start())
        self.seller.receive(self.to_seller.take(now))
        self.buyer.receive(self.to_buyer.take(now))
        self.seller.poll(now)
        self.buyer.poll(now)
        released = 0
        while (released < self.records_per_tick and self.seller.session.ready_for_data
               and not self.seller.closed and self.delivers(now)):
            seq = self.seller.session.records_sent + 1
            self.seller.feed(DataAvailable(self.record_source(seq)))
            released += 1

    def report(self) -> SessionReport:
        s, b = self.seller.session, self.buyer.session
        state = self.records_ledger.state()
        trail = audit_trail(state, self.session_id)
        return SessionReport(
            session_id=self.session_id,
            seller=s.seller,
            buyer=b.buyer,
            records_delivered=b.records_received,
            records_sent=s.records_sent,
            total_paid=session_payments(self.ledger, self.session_id, b.buyer, s.seller),
            invoices_issued=s.invoices_issued,
            invoices_paid=s.invoices_paid,
            records_anchored=len(trail),
            seller_phase=s.phase,
            buyer_phase=b.phase,
            anchor=trail[-1].tx_id if trail else None,
        )


def run_session(seller: Account, buyer: Account, ledger, record_source: RecordSource = default_records,
                n: int = 0, k: int = 10, price: int = 1, *, tick_limit: int = 10_000, **options) -> SessionReport:
    """Run one session to completion on ``ledger`` and report what happened on-chain."""
    link = SdppLink(seller, buyer, ledger, records_wanted=n, price=price, k=k,
                    record_source=record_source, **options)
    ledger.run([link], tick_limit=tick_limit)
    return link.report()


__all__ = [
    "Endpoint",
    "Pipe",
    "SdppLink",
    "SessionReport",
    "always_deliver",
    "always_pay",
    "default_records",
    "derive_session_id",
    "run_session",
    "session_payments",
]
