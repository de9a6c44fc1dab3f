"""Dual-deposit escrow for one-shot data trades.

Both sides lock a deposit of at least the price; the buyer also locks the
price. Confirmed delivery followed by settle returns the deposits and pays the
seller; a dispute after delivery burns everything held, so neither side gains
by walking away or crying foul once the trade is honest.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, replace

from .codec import Writer
from .ledger import Channel, PeerId, Transaction, sha256, unsigned_transaction
from .payloads import EscrowAction, EscrowOpen, Op, RecordKind, encode_op
from .state import Ctx, ServiceState, Skip


class EscrowState(enum.Enum):
    CREATED = "Created"
    FUNDED = "Funded"
    DELIVERED = "Delivered"
    SETTLED = "Settled"
    BURNED = "Burned"
    EXPIRED = "Expired"


TERMINAL = {EscrowState.SETTLED, EscrowState.BURNED, EscrowState.EXPIRED}

LEGAL_TRANSITIONS = {
    (EscrowState.CREATED, EscrowState.FUNDED),
    (EscrowState.FUNDED, EscrowState.DELIVERED),
    (EscrowState.DELIVERED, EscrowState.SETTLED),
    (EscrowState.CREATED, EscrowState.EXPIRED),
    (EscrowState.FUNDED, EscrowState.EXPIRED),
    (EscrowState.DELIVERED, EscrowState.BURNED),
}


@dataclass(frozen=True)
class EscrowContract:
    escrow_id: bytes
    seller: PeerId
    buyer: PeerId
    price: int
    deposit: int
    state: EscrowState
    deadline: int
    seller_funded: bool = False
    buyer_funded: bool = False
    held: int = 0

    def parties(self) -> tuple[PeerId, PeerId]:
        return (self.seller, self.buyer)


def derive_escrow_id(seller: PeerId, buyer: PeerId, price: int, deposit: int, deadline: int,
                     salt: bytes = b"") -> bytes:
    w = Writer().raw(b"escrow").fixed(seller.public_key, 32).fixed(buyer.public_key, 32)
    return sha256(w.u64(price).u64(deposit).u64(deadline).blob(salt).getvalue())


# --------------------------------------------------------------------------
# transaction builders (unsigned; the issuing account stamps nonce and signs)


def open_escrow(seller: PeerId, buyer: PeerId, price: int, deposit: int, deadline: int, *,
                opener: PeerId | None = None, escrow_id: bytes | None = None,
                salt: bytes = b"") -> Transaction:
    eid = escrow_id or derive_escrow_id(seller, buyer, price, deposit, deadline, salt)
    body = EscrowOpen(eid, seller, buyer, price, deposit, deadline)
    return unsigned_transaction(Channel.APP_SPECIFIC, opener or buyer, encode_op(body))


def _action(op: Op, escrow_id: bytes, sender: PeerId, at_height: int = 0) -> Transaction:
    return unsigned_transaction(Channel.APP_SPECIFIC, sender, encode_op(EscrowAction(op, escrow_id, at_height)))


def fund(escrow_id: bytes, party: PeerId) -> Transaction:
    return _action(Op.ESCROW_FUND, escrow_id, party)


def confirm_delivery(escrow_id: bytes, buyer: PeerId) -> Transaction:
    return _action(Op.ESCROW_CONFIRM, escrow_id, buyer)


def settle(escrow_id: bytes, party: PeerId) -> Transaction:
    return _action(Op.ESCROW_SETTLE, escrow_id, party)


def dispute(escrow_id: bytes, party: PeerId) -> Transaction:
    return _action(Op.ESCROW_DISPUTE, escrow_id, party)


def expire(escrow_id: bytes, current_height: int, party: PeerId) -> Transaction:
    return _action(Op.ESCROW_EXPIRE, escrow_id, party, current_height)


# --------------------------------------------------------------------------
# replay handlers


def apply_open(state: ServiceState, ctx: Ctx, body: EscrowOpen) -> None:
    if ctx.actor not in (body.seller, body.buyer):
        raise Skip("NotAParty: only seller or buyer may open an escrow")
    if body.seller == body.buyer:
        raise Skip("SelfTrade: seller and buyer are the same peer")
    if body.deposit < body.price:
        raise Skip(f"DepositTooSmall: deposit {body.deposit} < price {body.price}")
    if body.deadline <= ctx.height:
        raise Skip(f"DeadlinePassed: deadline {body.deadline} <= height {ctx.height}")
    if body.escrow_id in state.escrows:
        raise Skip("DuplicateEscrow")
    state.require_funds(ctx.actor, 0)
    state.escrows[body.escrow_id] = EscrowContract(
        body.escrow_id, body.seller, body.buyer, body.price, body.deposit, EscrowState.CREATED, body.deadline
    )
    state.add_record(ctx, RecordKind.ORDER, (body.seller, body.buyer), body.escrow_id)
    state.charge_fee(ctx.actor)


def apply_action(state: ServiceState, ctx: Ctx, body: EscrowAction) -> None:
    c = state.escrows.get(body.escrow_id)
    if c is None:
        raise Skip("UnknownEscrow")
    actor = ctx.actor
    op = body.op

    if op is Op.ESCROW_FUND:
        if c.state is not EscrowState.CREATED:
            raise Skip(f"WrongState: fund in {c.state.value}")
        if ctx.height > c.deadline:
            raise Skip("DeadlinePassed")
        if actor == c.buyer:
            if c.buyer_funded:
                raise Skip("AlreadyFunded")
            amount = c.price + c.deposit
            c = replace(c, buyer_funded=True)
        elif actor == c.seller:
            if c.seller_funded:
                raise Skip("AlreadyFunded")
            amount = c.deposit
            c = replace(c, seller_funded=True)
        else:
            raise Skip("NotAParty")
        state.require_funds(actor, amount)
        state.debit(actor, amount)
        c = replace(c, held=c.held + amount)
        if c.buyer_funded and c.seller_funded:
            c = replace(c, state=EscrowState.FUNDED)

    elif op is Op.ESCROW_CONFIRM:
        if actor != c.buyer:
            raise Skip("NotBuyer")
        if c.state is not EscrowState.FUNDED:
            raise Skip(f"WrongState: confirm in {c.state.value}")
        if ctx.height > c.deadline:
            raise Skip("DeadlinePassed")
        state.require_funds(actor, 0)
        c = replace(c, state=EscrowState.DELIVERED)
        state.add_record(ctx, RecordKind.DELIVERY_RECEIPT, c.parties(), c.escrow_id)

    elif op is Op.ESCROW_SETTLE:
        if actor not in c.parties():
            raise Skip("NotAParty")
        if c.state is not EscrowState.DELIVERED:
            raise Skip(f"WrongState: settle in {c.state.value}")
        state.require_funds(actor, 0)
        state.credit(c.seller, c.price + c.deposit)
        state.credit(c.buyer, c.deposit)
        c = replace(c, state=EscrowState.SETTLED, held=0)
        state.add_record(ctx, RecordKind.PAYMENT_RECEIPT, c.parties(), c.escrow_id)

    elif op is Op.ESCROW_DISPUTE:
        if actor not in c.parties():
            raise Skip("NotAParty")
        if c.state is not EscrowState.DELIVERED:
            raise Skip(f"WrongState: dispute in {c.state.value}")
        state.require_funds(actor, 0)
        state.burned += c.held
        c = replace(c, state=EscrowState.BURNED, held=0)
        state.add_record(ctx, RecordKind.DISPUTE, c.parties(), c.escrow_id)

    elif op is Op.ESCROW_EXPIRE:
        if c.state not in (EscrowState.CREATED, EscrowState.FUNDED):
            raise Skip(f"WrongState: expire in {c.state.value}")
        if ctx.height <= c.deadline:
            raise Skip(f"NotExpired: height {ctx.height} <= deadline {c.deadline}")
        state.require_funds(actor, 0)
        if c.seller_funded:
            state.credit(c.seller, c.deposit)
        if c.buyer_funded:
            state.credit(c.buyer, c.price + c.deposit)
        c = replace(c, state=EscrowState.EXPIRED, held=0)

    else:  # pragma: no cover - decode_op only yields escrow ops here
        raise Skip(f"UnknownEscrowOp {op}")

    state.escrows[c.escrow_id] = c
    state.charge_fee(actor)


# --------------------------------------------------------------------------
# strategy game


class BuyerStrategy(enum.Enum):
    HONEST = "honest"
    ABORT_AFTER_FUND = "abort-after-fund"
    DISPUTE_ALWAYS = "dispute-always"


class SellerStrategy(enum.Enum):
    DELIVER = "deliver"
    WITHHOLD = "withhold"


def play(buyer_strategy: BuyerStrategy, seller_strategy: SellerStrategy, price: int, deposit: int,
         valuation: int | None = None) -> tuple[int, int]:
    """Run one trade through the escrow handlers and return (buyer, seller) payoffs.

    Payoffs are wallet deltas plus, for the buyer, ``valuation`` when the data
    was both delivered and consumed (an aborting buyer leaves before
    consuming). ``valuation`` defaults to twice the price.
    """
    from .ledger import generate_identity_keys
    from .services import apply_transaction, mint
    from .state import ServiceConfig

    valuation = 2 * price if valuation is None else valuation
    auth, _ = generate_identity_keys(sha256(b"game-authority"))
    buyer, _ = generate_identity_keys(sha256(b"game-buyer"))
    seller, _ = generate_identity_keys(sha256(b"game-seller"))
    state = ServiceState(config=ServiceConfig(authority=auth), config_locked=True)

    stake = price + deposit
    seq = itertools.count(1)

    def run(height: int, tx: Transaction) -> None:
        apply_transaction(state, replace(tx, nonce=next(seq), tx_id=b""), height)

    run(1, mint(auth, buyer, stake))
    run(1, mint(auth, seller, stake))
    before = (state.balance(buyer), state.balance(seller))

    deadline = 10
    eid = derive_escrow_id(seller, buyer, price, deposit, deadline)
    run(2, open_escrow(seller, buyer, price, deposit, deadline))
    run(3, fund(eid, buyer))
    run(3, fund(eid, seller))
    delivered = seller_strategy is SellerStrategy.DELIVER

    if buyer_strategy is BuyerStrategy.HONEST and delivered:
        run(4, confirm_delivery(eid, buyer))
    elif buyer_strategy is BuyerStrategy.DISPUTE_ALWAYS:
        run(4, confirm_delivery(eid, buyer))
        run(5, dispute(eid, buyer))
    run(6, settle(eid, seller))
    run(deadline + 1, expire(eid, deadline + 1, seller))

    consumed = delivered and buyer_strategy is not BuyerStrategy.ABORT_AFTER_FUND
    buyer_payoff = state.balance(buyer) - before[0] + (valuation if consumed else 0)
    seller_payoff = state.balance(seller) - before[1]
    assert state.conserved()
    return buyer_payoff, seller_payoff


def payoff_matrix(price: int, deposit: int, valuation: int | None = None
                  ) -> dict[tuple[BuyerStrategy, SellerStrategy], tuple[int, int]]:
    return {
        (b, s): play(b, s, price, deposit, valuation)
        for b in BuyerStrategy
        for s in SellerStrategy
    }


def unilateral_deviations(matrix) -> list[tuple[str, object, int, int]]:
    """(side, deviation, honest payoff, deviation payoff) for every unilateral move."""
    honest = matrix[(BuyerStrategy.HONEST, SellerStrategy.DELIVER)]
    out = []
    for b in BuyerStrategy:
        if b is not BuyerStrategy.HONEST:
            out.append(("buyer", b, honest[0], matrix[(b, SellerStrategy.DELIVER)][0]))
    for s in SellerStrategy:
        if s is not SellerStrategy.DELIVER:
            out.append(("seller", s, honest[1], matrix[(BuyerStrategy.HONEST, s)][1]))
    return out


def format_matrix(matrix) -> str:
    lines = ["buyer \\ seller       " + "".join(f"{s.value:>16}" for s in SellerStrategy)]
    for b in BuyerStrategy:
        cells = "".join(f"{str(matrix[(b, s)]):>16}" for s in SellerStrategy)
        lines.append(f"{b.value:<21}{cells}")
    return "\n".join(lines)
