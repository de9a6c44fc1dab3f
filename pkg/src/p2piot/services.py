"""Platform services replayed from the committed chain.

Every committed transaction triggers its channel handler in commit order.
Signatures and ordering are the ledger's business; here we only judge whether
a transaction is feasible (funds, roles, references) and skip it with a logged
reason if not.
"""

from __future__ import annotations

import logging
from fractions import Fraction
from typing import Iterable, Sequence

from . import escrow, marketplace
from .ledger import Block, Channel, PeerId, Transaction, unsigned_transaction, validate_chain
from .payloads import (
    Config,
    EscrowAction,
    EscrowOpen,
    Mint,
    PayloadError,
    ProductPost,
    ProductRetire,
    Rate,
    Record,
    RecordKind,
    Register,
    Role,
    Transfer,
    decode_payload,
    encode_op,
)
from .state import (
    Ctx,
    IdentityRecord,
    Rating,
    RecordEntry,
    Rejection,
    ReputationRecord,
    Reputation,
    ServiceConfig,
    ServiceState,
    Skip,
    mean_of,
    reputation_of,
    wallet_of,
)

log = logging.getLogger(__name__)

__all__ = [
    "InvalidChain",
    "ServiceState",
    "ServiceConfig",
    "Reputation",
    "replay",
    "apply_blocks",
    "apply_block",
    "apply_transaction",
    "configure",
    "mint",
    "transfer",
    "register_identity",
    "submit_rating",
    "record_event",
    "balance_of",
    "resolve_identity",
    "reputation_of",
    "audit_trail",
    "wallet_of",
    "format_report",
]


class InvalidChain(Exception):
    pass


# --------------------------------------------------------------------------
# builders


def configure(authority: PeerId, fee: int = 0, currency_label: str = "TOK", ban_min_count: int = 5,
              ban_mean_below: Fraction = Fraction(2)) -> Transaction:
    """First transaction of a chain: names the minting authority and fee schedule."""
    body = Config(fee, currency_label, ban_min_count, ban_mean_below.numerator, ban_mean_below.denominator)
    return unsigned_transaction(Channel.APP_SPECIFIC, authority, encode_op(body))


def mint(authority: PeerId, to: PeerId, amount: int) -> Transaction:
    return unsigned_transaction(Channel.PAYMENT, authority, encode_op(Mint(to, amount)))


def transfer(sender: PeerId, to: PeerId, amount: int, memo: bytes = b"") -> Transaction:
    return unsigned_transaction(Channel.PAYMENT, sender, encode_op(Transfer(to, amount, memo)))


def register_identity(peer: PeerId, role: Role, metadata: str = "") -> Transaction:
    return unsigned_transaction(Channel.IDENTITY, peer, encode_op(Register(Role(role), metadata)))


def submit_rating(rater: PeerId, subject: PeerId, score: int, tx_ref: bytes) -> Transaction:
    if not 1 <= score <= 5:
        raise ValueError("score must be 1..5")
    return unsigned_transaction(Channel.RATING, rater, encode_op(Rate(subject, score, tx_ref)))


def record_event(reporter: PeerId, kind: RecordKind, parties: tuple[PeerId, PeerId], reference: bytes,
                 digest: bytes = b"") -> Transaction:
    body = Record(RecordKind(kind), tuple(parties), reference, digest)
    return unsigned_transaction(Channel.RECORDS, reporter, encode_op(body))


# --------------------------------------------------------------------------
# handlers


def _apply_config(state: ServiceState, ctx: Ctx, body: Config) -> None:
    if state.config_locked:
        raise Skip("ConfigLocked: configuration must be the first transaction")
    state.config = ServiceConfig(
        fee=body.fee,
        currency_label=body.currency_label,
        authority=ctx.actor,
        ban_min_count=body.ban_min_count,
        ban_mean_below=Fraction(body.ban_mean_num, body.ban_mean_den),
    )


def _apply_mint(state: ServiceState, ctx: Ctx, body: Mint) -> None:
    if state.config.authority is None or ctx.actor != state.config.authority or ctx.delegated:
        raise Skip("NotAuthority: only the genesis authority mints")
    state.credit(body.to, body.amount)
    state.minted += body.amount


def _apply_transfer(state: ServiceState, ctx: Ctx, body: Transfer) -> None:
    state.require_funds(ctx.actor, body.amount)
    state.debit(ctx.actor, body.amount)
    state.credit(body.to, body.amount)
    state.charge_fee(ctx.actor)


def _apply_register(state: ServiceState, ctx: Ctx, body: Register) -> None:
    if ctx.actor in state.identities:
        raise Skip("AlreadyRegistered")
    state.require_funds(ctx.actor, 0)
    gateway = ctx.signer if ctx.delegated else None
    state.identities[ctx.actor] = IdentityRecord(ctx.actor, body.role, body.metadata, ctx.height, gateway)
    state.charge_fee(ctx.actor)


def _anchor_ok(state: ServiceState, tx_ref: bytes, a: PeerId, b: PeerId) -> bool:
    return any(e.tx_id == tx_ref and a in e.parties and b in e.parties for e in reversed(state.records))


def _apply_rate(state: ServiceState, ctx: Ctx, body: Rate) -> None:
    rater, subject = ctx.actor, body.subject
    if rater == subject:
        raise Skip("SelfRating")
    if not 1 <= body.score <= 5:
        raise Skip(f"ScoreOutOfRange: {body.score}")
    if rater not in state.identities or subject not in state.identities:
        raise Skip("UnknownParty: rater and subject must be registered")
    if not _anchor_ok(state, body.tx_ref, rater, subject):
        raise Skip("DanglingReference: tx_ref is not a trade record between rater and subject")
    rec = state.reputations.get(subject, ReputationRecord(subject))
    if any(r.rater == rater and r.tx_ref == body.tx_ref for r in rec.ratings):
        raise Skip("DuplicateRating")
    state.require_funds(rater, 0)
    ratings = rec.ratings + (Rating(rater, body.score, body.tx_ref),)
    cfg = state.config
    banned = rec.banned or (len(ratings) >= cfg.ban_min_count and mean_of(ratings) < cfg.ban_mean_below)
    if banned and not rec.banned:
        log.info("peer %s banned at height %d", subject.short(), ctx.height)
    state.reputations[subject] = ReputationRecord(subject, ratings, banned)
    state.charge_fee(rater)


def _apply_record(state: ServiceState, ctx: Ctx, body: Record) -> None:
    if ctx.actor not in body.parties:
        raise Skip("ReporterNotParty")
    state.require_funds(ctx.actor, 0)
    state.add_record(ctx, body.kind, body.parties, body.reference, body.digest)
    state.charge_fee(ctx.actor)


_HANDLERS = {
    Config: _apply_config,
    Mint: _apply_mint,
    Transfer: _apply_transfer,
    Register: _apply_register,
    Rate: _apply_rate,
    Record: _apply_record,
    EscrowOpen: escrow.apply_open,
    EscrowAction: escrow.apply_action,
    ProductPost: marketplace.apply_post,
    ProductRetire: marketplace.apply_retire,
}

_BAN_GATED = (Channel.PAYMENT, Channel.APP_SPECIFIC)


def apply_transaction(state: ServiceState, tx: Transaction, height: int) -> bool:
    """Apply one committed transaction in place; returns False if it was skipped."""
    try:
        try:
            origin, body = decode_payload(tx.channel, tx.payload)
        except PayloadError as exc:
            raise Skip(f"MalformedPayload: {exc}") from None
        signer = tx.sender
        if origin is not None:
            if origin == signer:
                raise Skip("DelegationRefused: gateway cannot relay for itself")
            if state.is_banned(signer):
                raise Skip("DelegationRefused: gateway is banned")
            record = state.identities.get(origin)
            first_registration = record is None and isinstance(body, Register)
            if not first_registration and (record is None or record.gateway != signer):
                raise Skip("DelegationRefused: signer is not the device's gateway")
        actor = origin or signer
        ctx = Ctx(tx, actor, signer, height)
        if tx.channel in _BAN_GATED and state.is_banned(actor):
            raise Skip(f"Banned: {actor.short()}")
        _HANDLERS[type(body)](state, ctx, body)
    except Skip as skip:
        state.rejections.append(Rejection(height, tx.tx_id, skip.reason))
        log.debug("height %d: skipped %s: %s", height, tx.tx_id.hex()[:12], skip.reason)
        ok = False
    else:
        ok = True
    state.config_locked = True
    return ok


def apply_block(state: ServiceState, block: Block) -> None:
    for tx in block.tx_list:
        apply_transaction(state, tx, block.height)
    state.height = block.height


def apply_blocks(state: ServiceState, blocks: Iterable[Block]) -> ServiceState:
    """New snapshot: ``state`` advanced by ``blocks`` (``state`` is untouched)."""
    out = state.copy()
    for block in blocks:
        apply_block(out, block)
    return out


def initial_state(config: ServiceConfig | None = None) -> ServiceState:
    if config is None:
        return ServiceState()
    return ServiceState(config=config, config_locked=True)


def replay(chain: Sequence[Block], config: ServiceConfig | None = None, *, validate: bool = True) -> ServiceState:
    """Derive service state from a chain.

    Without ``config`` the chain's leading configuration transaction (if any)
    sets the authority, fee and ban thresholds; with it, that transaction is
    skipped as ``ConfigLocked``.
    """
    if validate and not validate_chain(chain):
        raise InvalidChain("chain failed validation")
    state = initial_state(config)
    for block in chain[1:]:
        apply_block(state, block)
    return state


# --------------------------------------------------------------------------
# reads


def balance_of(state: ServiceState, peer: PeerId) -> int:
    return state.balance(peer)


def resolve_identity(state: ServiceState, peer: PeerId) -> IdentityRecord | None:
    return state.identities.get(peer)


def audit_trail(state: ServiceState, reference: bytes) -> list[RecordEntry]:
    return [e for e in state.records if e.reference == reference]


def _fmt_mean(rep: Reputation) -> str:
    if rep.mean_score is None:
        return "unrated"
    m = rep.mean_score
    return str(m.numerator) if m.denominator == 1 else f"{m.numerator}/{m.denominator}"


def format_report(state: ServiceState, names: dict[PeerId, str] | None = None) -> str:
    """Deterministic text export of balances, identities and reputations."""
    names = names or {}

    def label(peer: PeerId) -> str:
        return names.get(peer) or peer.display_name or "-"

    lines = [
        f"currency {state.config.currency_label}",
        f"fee {state.config.fee}",
        f"height {state.height}",
        f"minted {state.minted}",
        f"fee_sink {state.fee_sink}",
        f"escrow_held {state.escrow_held}",
        f"burned {state.burned}",
        "[wallets]",
    ]
    for peer in sorted(state.balances, key=lambda p: p.public_key):
        lines.append(f"{peer.hex()} {label(peer)} {state.balances[peer]}")
    lines.append("[identities]")
    for peer in sorted(state.identities, key=lambda p: p.public_key):
        rec = state.identities[peer]
        gw = rec.gateway.hex() if rec.gateway else "-"
        lines.append(f"{peer.hex()} {label(peer)} {rec.role.name.lower()} registered_at={rec.registered_at} gateway={gw}")
    lines.append("[reputations]")
    for peer in sorted(state.reputations, key=lambda p: p.public_key):
        rep = reputation_of(state, peer)
        lines.append(f"{peer.hex()} {label(peer)} mean={_fmt_mean(rep)} count={rep.count} banned={str(rep.banned).lower()}")
    return "\n".join(lines) + "\n"
