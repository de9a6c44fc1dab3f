"""Service state derived from the committed chain, plus shared helpers for the
channel handlers that mutate it during replay."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING

from .ledger import PeerId, Transaction
from .payloads import RecordKind, Role

if TYPE_CHECKING:
    from .escrow import EscrowContract
    from .marketplace import DataProduct


@dataclass(frozen=True)
class ServiceConfig:
    fee: int = 0
    currency_label: str = "TOK"
    authority: PeerId | None = None
    ban_min_count: int = 5
    ban_mean_below: Fraction = Fraction(2)


@dataclass(frozen=True)
class Wallet:
    owner: PeerId
    balance: int
    currency_label: str


@dataclass(frozen=True)
class IdentityRecord:
    peer: PeerId
    role: Role
    metadata: str
    registered_at: int
    gateway: PeerId | None = None


@dataclass(frozen=True)
class Rating:
    rater: PeerId
    score: int
    tx_ref: bytes


@dataclass(frozen=True)
class ReputationRecord:
    subject: PeerId
    ratings: tuple[Rating, ...] = ()
    banned: bool = False


@dataclass(frozen=True)
class Reputation:
    mean_score: Fraction | None
    count: int
    banned: bool

    @property
    def rated(self) -> bool:
        return self.mean_score is not None


@dataclass(frozen=True)
class RecordEntry:
    kind: RecordKind
    parties: tuple[PeerId, PeerId]
    reference: bytes
    tx_id: bytes
    reporter: PeerId
    height: int
    digest: bytes = b""


@dataclass(frozen=True)
class Rejection:
    height: int
    tx_id: bytes
    reason: str


class Skip(Exception):
    """A committed transaction that is infeasible when applied."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


@dataclass(frozen=True)
class Ctx:
    """Who is acting in the transaction being applied."""

    tx: Transaction
    actor: PeerId
    signer: PeerId
    height: int

    @property
    def delegated(self) -> bool:
        return self.actor != self.signer


@dataclass
class ServiceState:
    config: ServiceConfig = field(default_factory=ServiceConfig)
    config_locked: bool = False
    height: int = 0
    balances: dict[PeerId, int] = field(default_factory=dict)
    minted: int = 0
    fee_sink: int = 0
    burned: int = 0
    identities: dict[PeerId, IdentityRecord] = field(default_factory=dict)
    reputations: dict[PeerId, ReputationRecord] = field(default_factory=dict)
    records: list[RecordEntry] = field(default_factory=list)
    escrows: dict[bytes, "EscrowContract"] = field(default_factory=dict)
    products: dict[bytes, "DataProduct"] = field(default_factory=dict)
    rejections: list[Rejection] = field(default_factory=list)

    def copy(self) -> "ServiceState":
        # values are frozen dataclasses, so copying the containers is enough
        return ServiceState(
            config=self.config,
            config_locked=self.config_locked,
            height=self.height,
            balances=dict(self.balances),
            minted=self.minted,
            fee_sink=self.fee_sink,
            burned=self.burned,
            identities=dict(self.identities),
            reputations=dict(self.reputations),
            records=list(self.records),
            escrows=dict(self.escrows),
            products=dict(self.products),
            rejections=list(self.rejections),
        )

    @property
    def escrow_held(self) -> int:
        return sum(c.held for c in self.escrows.values())

    def total_balances(self) -> int:
        return sum(self.balances.values())

    def conserved(self) -> bool:
        return self.total_balances() + self.fee_sink + self.escrow_held + self.burned == self.minted

    def is_banned(self, peer: PeerId) -> bool:
        rec = self.reputations.get(peer)
        return rec is not None and rec.banned

    def banned_peers(self) -> set[PeerId]:
        return {p for p, rec in self.reputations.items() if rec.banned}

    def rejected_ids(self) -> set[bytes]:
        return {r.tx_id for r in self.rejections}

    # -- mutation helpers for handlers -------------------------------------

    def balance(self, peer: PeerId) -> int:
        return self.balances.get(peer, 0)

    def require_funds(self, peer: PeerId, amount: int) -> None:
        need = amount + self.config.fee
        if self.balance(peer) < need:
            raise Skip(f"InsufficientFunds: {peer.short()} has {self.balance(peer)}, needs {need}")

    def debit(self, peer: PeerId, amount: int) -> None:
        bal = self.balance(peer)
        assert bal >= amount, "debit without funds check"
        self.balances[peer] = bal - amount

    def credit(self, peer: PeerId, amount: int) -> None:
        self.balances[peer] = self.balance(peer) + amount

    def charge_fee(self, peer: PeerId) -> None:
        if self.config.fee:
            self.debit(peer, self.config.fee)
            self.fee_sink += self.config.fee

    def add_record(self, ctx: Ctx, kind: RecordKind, parties: tuple[PeerId, PeerId],
                   reference: bytes, digest: bytes = b"") -> RecordEntry:
        entry = RecordEntry(kind, parties, reference, ctx.tx.tx_id, ctx.actor, ctx.height, digest)
        self.records.append(entry)
        return entry


def mean_of(ratings: tuple[Rating, ...]) -> Fraction | None:
    if not ratings:
        return None
    return Fraction(sum(r.score for r in ratings), len(ratings))


def reputation_of(state: ServiceState, peer: PeerId) -> Reputation:
    rec = state.reputations.get(peer)
    if rec is None:
        return Reputation(None, 0, False)
    return Reputation(mean_of(rec.ratings), len(rec.ratings), rec.banned)


def wallet_of(state: ServiceState, peer: PeerId) -> Wallet:
    return Wallet(peer, state.balance(peer), state.config.currency_label)
