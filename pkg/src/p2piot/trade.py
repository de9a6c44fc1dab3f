"""Purchase orchestration: from a discovered listing to a settled, rateable trade.

A purchase runs either as an SDPP stream or as an escrowed batch, depending on
the product's delivery mode. Both paths leave Records-channel entries naming
buyer and seller, and the last of those entries is the anchor each side may
cite exactly once in a rating.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable, Union

from . import escrow
from .client import Account, LedgerClient
from .escrow import BuyerStrategy, EscrowState, SellerStrategy
from .ledger import PeerId, sha256
from .marketplace import DataProduct
from .payloads import Delivery, RecordKind
from .sdpp.host import (
    DeliveryPolicy,
    PaymentPolicy,
    SdppLink,
    SessionReport,
    always_deliver,
    always_pay,
    default_records,
)
from .services import audit_trail, record_event, submit_rating

log = logging.getLogger(__name__)


class PurchaseError(Exception):
    pass


class ProductUnavailable(PurchaseError):
    pass


class PurchaseRefused(PurchaseError):
    def __init__(self, reason: str, anchor: bytes | None = None):
        super().__init__(reason)
        self.reason = reason
        self.anchor = anchor


@dataclass(frozen=True)
class EscrowOutcome:
    escrow_id: bytes
    seller: PeerId
    buyer: PeerId
    state: EscrowState | None
    quantity: int
    price: int
    buyer_delta: int
    seller_delta: int
    anchor: bytes | None = None


Outcome = Union[SessionReport, EscrowOutcome]


class _Stage(enum.Enum):
    OPEN = "open"
    OPENING = "opening"
    FUNDING = "funding"
    DELIVERING = "delivering"
    SETTLING = "settling"
    DONE = "done"


class EscrowTrade:
    """Drives one escrowed batch trade through the ledger, one tick at a time."""

    def __init__(self, ledger: LedgerClient, seller: Account, buyer: Account, price: int, deposit: int, *,
                 quantity: int = 1, window: int = 5, salt: bytes = b"",
                 buyer_strategy: BuyerStrategy = BuyerStrategy.HONEST,
                 seller_strategy: SellerStrategy = SellerStrategy.DELIVER) -> None:
        self.ledger = ledger
        self.seller = seller
        self.buyer = buyer
        self.price = price
        self.deposit = deposit
        self.quantity = quantity
        self.buyer_strategy = buyer_strategy
        self.seller_strategy = seller_strategy
        state = ledger.state()
        self.deadline = state.height + window
        self.escrow_id = escrow.derive_escrow_id(seller.peer, buyer.peer, price, deposit, self.deadline, salt)
        self._before = (state.balance(buyer.peer), state.balance(seller.peer))
        self._stage = _Stage.OPEN
        self._open_height = state.height

    @property
    def done(self) -> bool:
        return self._stage is _Stage.DONE

    def _issue(self, account: Account, tx) -> None:
        self.ledger.issue(account, tx)

    def step(self, now: int) -> None:
        state = self.ledger.state()
        c = state.escrows.get(self.escrow_id)
        eid, b, s = self.escrow_id, self.buyer, self.seller
        if self._stage is _Stage.OPEN:
            self._issue(b, escrow.open_escrow(s.peer, b.peer, self.price, self.deposit, self.deadline,
                                              escrow_id=eid))
            self._stage = _Stage.OPENING
            return
        if c is None:
            if self._stage is _Stage.OPENING and state.height > self._open_height and not self.ledger.pending():
                log.info("escrow open was rejected")
                self._stage = _Stage.DONE
            return
        if c.state in escrow.TERMINAL:
            self._stage = _Stage.DONE
            return
        stuck = self._stage in (_Stage.FUNDING, _Stage.DELIVERING) and c.state in (EscrowState.CREATED, EscrowState.FUNDED)
        if stuck and not self.ledger.pending():
            # nothing else will move the chain; keep proposing expiry until the deadline has passed
            self._issue(s, escrow.expire(eid, state.height + 1, s.peer))
            return
        if self._stage is _Stage.OPENING and c.state is EscrowState.CREATED:
            self._issue(b, escrow.fund(eid, b.peer))
            self._issue(s, escrow.fund(eid, s.peer))
            self._stage = _Stage.FUNDING
        elif self._stage is _Stage.FUNDING and c.state is EscrowState.FUNDED:
            delivered = self.seller_strategy is SellerStrategy.DELIVER
            if self.buyer_strategy is BuyerStrategy.DISPUTE_ALWAYS:
                self._issue(b, escrow.confirm_delivery(eid, b.peer))
                self._issue(b, escrow.dispute(eid, b.peer))
            elif self.buyer_strategy is BuyerStrategy.HONEST and delivered:
                self._issue(b, escrow.confirm_delivery(eid, b.peer))
            self._stage = _Stage.DELIVERING
        elif self._stage is _Stage.DELIVERING and c.state is EscrowState.DELIVERED:
            if self.buyer_strategy is BuyerStrategy.HONEST:
                self._issue(s, escrow.settle(eid, s.peer))
            self._stage = _Stage.SETTLING

    def outcome(self) -> EscrowOutcome:
        state = self.ledger.state()
        c = state.escrows.get(self.escrow_id)
        trail = audit_trail(state, self.escrow_id)
        return EscrowOutcome(
            escrow_id=self.escrow_id,
            seller=self.seller.peer,
            buyer=self.buyer.peer,
            state=c.state if c else None,
            quantity=self.quantity,
            price=self.price,
            buyer_delta=state.balance(self.buyer.peer) - self._before[0],
            seller_delta=state.balance(self.seller.peer) - self._before[1],
            anchor=trail[-1].tx_id if trail else None,
        )


@dataclass(frozen=True)
class TradeTerms:
    """Per-purchase behaviour knobs; the defaults describe an honest trade."""

    pays: PaymentPolicy = always_pay
    delivers: DeliveryPolicy = always_deliver
    buyer_strategy: BuyerStrategy = BuyerStrategy.HONEST
    seller_strategy: SellerStrategy = SellerStrategy.DELIVER
    k: int = 10
    max_outstanding: int = 1
    timeout: int = 100
    delay: int = 1
    deposit: int | None = None
    escrow_window: int = 5
    record_source: Callable[[int], bytes] = default_records


class Market:
    """Buys listed products on behalf of accounts registered in ``directory``."""

    def __init__(self, ledger: LedgerClient, directory: dict[PeerId, Account] | None = None) -> None:
        self.ledger = ledger
        self.directory: dict[PeerId, Account] = dict(directory or {})
        self._trades = 0

    def add(self, account: Account) -> Account:
        self.directory[account.peer] = account
        return account

    def account(self, peer: PeerId) -> Account:
        try:
            return self.directory[peer]
        except KeyError:
            raise PurchaseError(f"no local endpoint for {peer.short()}") from None

    def start(self, buyer: Account, product_id: bytes, quantity: int, terms: TradeTerms = TradeTerms()):
        """Validate the purchase and return a driver that carries it out."""
        state = self.ledger.state()
        product: DataProduct | None = state.products.get(product_id)
        if product is None or not product.active:
            raise ProductUnavailable(f"product {product_id.hex()[:12]} is not listed")
        if state.is_banned(buyer.peer):
            raise PurchaseRefused("buyer is banned")
        seller = self.account(product.seller)
        if state.is_banned(product.seller):
            tx = record_event(buyer.peer, RecordKind.DISPUTE, (product.seller, buyer.peer), product_id)
            anchor = self.ledger.issue(buyer, tx).tx_id
            raise PurchaseRefused(f"seller {product.seller.short()} is banned", anchor)
        self._trades += 1
        salt = self._trades.to_bytes(8, "big") + product_id
        if product.delivery is Delivery.SDPP_STREAM:
            return SdppLink(
                seller, buyer, self.ledger, records_wanted=quantity, price=product.price_per_record,
                k=terms.k, session_id=sha256(b"purchase" + buyer.peer.public_key + salt)[:16],
                record_source=terms.record_source, max_outstanding=terms.max_outstanding,
                timeout=terms.timeout, delay=terms.delay, pays=terms.pays, delivers=terms.delivers,
                expected_price=product.price_per_record,
            )
        price = product.price_per_record * quantity
        return EscrowTrade(
            self.ledger, seller, buyer, price, price if terms.deposit is None else terms.deposit,
            quantity=quantity, window=terms.escrow_window, salt=salt,
            buyer_strategy=terms.buyer_strategy, seller_strategy=terms.seller_strategy,
        )

    def purchase(self, buyer: Account, product_id: bytes, quantity: int, terms: TradeTerms = TradeTerms(),
                 *, tick_limit: int = 10_000) -> Outcome:
        try:
            driver = self.start(buyer, product_id, quantity, terms)
        except PurchaseRefused:
            self.ledger.run(tick_limit=tick_limit)
            raise
        self.ledger.run([driver], tick_limit=tick_limit)
        return driver.report() if isinstance(driver, SdppLink) else driver.outcome()

    def rate(self, rater: Account, subject: PeerId, score: int, outcome: Outcome) -> bytes:
        """Rate the other side of a completed trade; returns the rating tx id."""
        if outcome.anchor is None:
            raise PurchaseError("trade left no record to anchor a rating")
        return self.ledger.issue(rater, submit_rating(rater.peer, subject, score, outcome.anchor)).tx_id
