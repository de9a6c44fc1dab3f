"""SDPP over TCP with a file-backed ledger shared by both processes.

Socket read timeouts double as the logical clock: each ``tick_seconds`` of
silence is one tick for the session timeouts.
"""

from __future__ import annotations

import logging
import os
import socket
import time
from dataclasses import dataclass
from typing import Callable

from ..client import Account, FileLedger
from ..ledger import PeerId
from ..services import audit_trail
from .host import Endpoint, RecordSource, default_records, session_payments
from .session import BuyerSession, DataAvailable, Phase, SellerSession, Start, TransportError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EndpointReport:
    """What one side of a TCP session observed, plus the ledger's view of payments."""

    role: str
    session_id: bytes
    counterparty: PeerId | None
    records: int
    total_paid: int
    invoices: int
    invoices_paid: int
    records_anchored: int
    phase: Phase

    def line(self) -> str:
        verb = "delivered" if self.role == "buyer" else "sent"
        return (f"session={self.session_id.hex()} {verb}={self.records} paid={self.total_paid} "
                f"invoices={self.invoices} invoices_paid={self.invoices_paid} "
                f"anchored={self.records_anchored} phase={self.phase.value}")


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _pump(sock: socket.socket, endpoint: Endpoint, tick_seconds: float,
          produce: Callable[[], None] | None = None, initiate: bool = False) -> None:
    start = time.monotonic()
    sock.settimeout(tick_seconds)
    broken: list[str] = []

    def send(data: bytes) -> None:
        if broken:
            return
        try:
            sock.sendall(data)
        except OSError as exc:
            broken.append(str(exc))

    endpoint.send = send
    if initiate:
        endpoint.feed(Start())
    while not endpoint.finished:
        try:
            data = sock.recv(65536)
        except socket.timeout:
            data = None
        except OSError as exc:
            broken.append(str(exc))
            data = None
        if data == b"" and not broken:
            broken.append("connection closed by peer")
        if data:
            endpoint.receive(data)
        if broken and endpoint.session.phase not in (Phase.CLOSED, Phase.FAULTED):
            endpoint.feed(TransportError(broken[0]))
            break
        if broken:
            break
        endpoint.poll(int((time.monotonic() - start) / tick_seconds))
        if produce:
            produce()


def _report(role: str, endpoint: Endpoint, ledger: FileLedger) -> EndpointReport:
    s = endpoint.session
    if role == "seller":
        buyer, seller = s.counterparty, s.seller
        records, invoices = s.records_sent, s.invoices_issued
    else:
        buyer, seller = s.buyer, s.counterparty
        records, invoices = s.records_received, s.invoices_received
    paid = session_payments(ledger, s.session_id, buyer, seller) if buyer and seller else 0
    return EndpointReport(
        role=role,
        session_id=s.session_id,
        counterparty=s.counterparty,
        records=records,
        total_paid=paid,
        invoices=invoices,
        invoices_paid=s.invoices_paid,
        records_anchored=len(audit_trail(ledger.state(), s.session_id)) if s.session_id else 0,
        phase=s.phase,
    )


def serve(ledger: FileLedger, seller: Account, price: int, k: int, address: tuple[str, int], *,
          sessions: int = 1, record_source: RecordSource = default_records, max_outstanding: int = 1,
          timeout: int = 100, tick_seconds: float = 0.05,
          on_listen: Callable[[tuple[str, int]], None] | None = None) -> list[EndpointReport]:
    """Accept ``sessions`` buyers one after another and stream records to each."""
    currency = ledger.state().config.currency_label
    reports = []
    with socket.create_server(address) as server:
        if on_listen:
            on_listen(server.getsockname()[:2])
        for _ in range(sessions):
            conn, peer = server.accept()
            log.info("buyer connected from %s", peer)
            with conn:
                session = SellerSession(seller.peer, price, k, currency, max_outstanding, timeout)
                endpoint = Endpoint(session, seller, ledger, lambda b: None)

                def produce(ep=endpoint) -> None:
                    while ep.session.ready_for_data and not ep.closed:
                        ep.feed(DataAvailable(record_source(ep.session.records_sent + 1)))

                _pump(conn, endpoint, tick_seconds, produce)
            reports.append(_report("seller", endpoint, ledger))
    return reports


def buy(ledger: FileLedger, buyer: Account, records: int, address: tuple[str, int], *,
        expected_seller: PeerId | None = None, expected_price: int | None = None,
        timeout: int = 100, tick_seconds: float = 0.05, session_id: bytes | None = None) -> EndpointReport:
    sid = session_id or os.urandom(16)
    session = BuyerSession(buyer.peer, sid, records, expected_seller=expected_seller,
                           expected_price=expected_price, timeout=timeout)
    endpoint = Endpoint(session, buyer, ledger, lambda b: None)
    with socket.create_connection(address, timeout=10) as sock:
        _pump(sock, endpoint, tick_seconds, initiate=True)
    return _report("buyer", endpoint, ledger)
