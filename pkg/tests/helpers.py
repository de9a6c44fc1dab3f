"""Shared builders for tests: deterministic accounts and random signed chains."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from p2piot import escrow
from p2piot.client import Account, LedgerClient
from p2piot.ledger import Block, LedgerNode, SingleAuthority, Transaction, propose_and_commit, unsigned_transaction
from p2piot.marketplace import derive_product_id, post_product, retire_product
from p2piot.payloads import Delivery, RecordKind, Role, encode_delegated
from p2piot.services import configure, mint, record_event, register_identity, submit_rating, transfer


def account(name: str, ns: bytes = b"test", **kw) -> Account:
    return Account.derive(name, ns, **kw)


def funded_ledger(fee: int = 0, *names: str, balance: int = 100, roles: dict | None = None,
                  ns: bytes = b"test") -> tuple[LedgerClient, dict[str, Account]]:
    """Single-authority ledger with ``names`` registered and minted ``balance`` each."""
    auth = account("authority", ns)
    led = LedgerClient.single(auth, fee=fee)
    accts = {n: account(n, ns) for n in names}
    for n, a in accts.items():
        if balance:
            led.fund(a, balance)
    led.run()
    for n, a in accts.items():
        led.register(a, (roles or {}).get(n, Role.BUYER))
    led.run()
    return led, accts


@dataclass
class ChainBuilder:
    """Seals hand-picked transactions into blocks with a single authority."""

    fee: int = 0
    ns: bytes = b"chain"
    authority: Account = None
    node: LedgerNode = None
    now: int = 0
    history: list[Transaction] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.authority = self.authority or account("authority", self.ns)
        self.node = LedgerNode(self.authority.peer, SingleAuthority(), self.fee)

    def add(self, acct: Account, tx: Transaction) -> Transaction:
        self.now += 1
        signed = acct.prepare(tx, self.now)
        self.node.submit(signed)
        self.history.append(signed)
        return signed

    def seal(self) -> Block | None:
        return propose_and_commit([self.node])

    @property
    def chain(self) -> list[Block]:
        return self.node.chain


def random_service_chain(rng: random.Random, *, n_txs: int = 60, max_block: int = 8, fee: int | None = None,
                         ns: bytes | None = None) -> list[Block]:
    """A valid chain of mixed, often infeasible, service transactions.

    Parameters are drawn from small pools so that transactions interact:
    ratings cite earlier records, escrow actions hit open contracts, relayed
    transactions go through real and wrong gateways.
    """
    ns = ns if ns is not None else rng.randbytes(4)
    fee = rng.choice([0, 0, 1, 2]) if fee is None else fee
    cb = ChainBuilder(fee=fee, ns=ns)
    auth = cb.authority
    gw = account("gw", ns)
    peers = [account(f"p{i}", ns) for i in range(4)] + [gw]
    devices = [account(f"d{i}", ns, can_sign=False, gateway=gw) for i in range(2)]
    rogue = account("rogue", ns)
    everyone = peers + devices
    records: list[Transaction] = []
    escrows: list[bytes] = []
    products: list[tuple[Account, bytes]] = []

    cb.add(auth, configure(auth.peer, fee, "TOK", rng.choice([2, 3, 5])))
    if rng.random() < 0.2:
        late = rng.choice(peers)
        cb.add(late, configure(late.peer, 9))  # locked: must be skipped

    def pick() -> Account:
        return rng.choice(everyone)

    for who in everyone:
        if rng.random() < 0.9:
            cb.add(auth, mint(auth.peer, who.peer, rng.randint(0, 80)))
        if rng.random() < 0.85:
            cb.add(who, register_identity(who.peer, rng.choice(list(Role))))
    by_key = {a.peer.public_key: a for a in everyone}
    opened: list[tuple[bytes, Account, Account]] = []

    for _ in range(n_txs):
        kind = rng.choices(
            ["mint", "transfer", "register", "record", "rate", "escrow", "product", "forged", "badgw", "lifecycle"],
            weights=[6, 10, 5, 6, 8, 10, 4, 2, 1, 3],
        )[0]
        a, b = pick(), pick()
        if kind == "mint":
            sender = auth if rng.random() < 0.85 else a
            cb.add(sender, mint(sender.peer, a.peer, rng.randint(1, 60)))
        elif kind == "transfer":
            memo = rng.randbytes(rng.randint(0, 16))
            cb.add(a, transfer(a.peer, b.peer, rng.randint(0, 40), memo))
        elif kind == "register":
            cb.add(a, register_identity(a.peer, rng.choice(list(Role)), rng.choice(["", "x", "hub"])))
        elif kind == "record":
            parties = (a.peer, b.peer) if rng.random() < 0.85 else (b.peer, pick().peer)
            tx = cb.add(a, record_event(a.peer, rng.choice(list(RecordKind)), parties, rng.randbytes(4),
                                        rng.randbytes(rng.choice([0, 32]))))
            records.append(tx)
        elif kind == "rate":
            score = rng.choices([1, 2, 3, 4, 5], weights=[4, 2, 1, 1, 2])[0]
            if records and rng.random() < 0.8:
                rec = rng.choice(records)
                inner = rec.payload[33:] if rec.payload[:1] == b"\xff" else rec.payload
                x, y = inner[2:34], inner[34:66]
                if x in by_key and y in by_key:
                    a, b = (by_key[x], by_key[y]) if rng.random() < 0.5 else (by_key[y], by_key[x])
                ref = rec.tx_id
            else:
                ref = rng.randbytes(32)
            cb.add(a, submit_rating(a.peer, b.peer, score, ref))
        elif kind == "escrow":
            if escrows and rng.random() < 0.75:
                eid = rng.choice(escrows)
                for known, seller, buyer in opened:
                    if known == eid and rng.random() < 0.8:
                        a = rng.choice([seller, buyer])
                op = rng.choice(["fund", "fund", "confirm", "settle", "dispute", "expire"])
                h = cb.node.height + rng.randint(0, 6)
                tx = {
                    "fund": escrow.fund(eid, a.peer),
                    "confirm": escrow.confirm_delivery(eid, a.peer),
                    "settle": escrow.settle(eid, a.peer),
                    "dispute": escrow.dispute(eid, a.peer),
                    "expire": escrow.expire(eid, h, a.peer),
                }[op]
                cb.add(a, tx)
            else:
                price = rng.randint(0, 15)
                deposit = price + rng.randint(-3, 5) if price >= 3 else price + rng.randint(0, 5)
                deadline = cb.node.height + rng.randint(0, 8)
                eid = escrow.derive_escrow_id(a.peer, b.peer, price, deposit, deadline, rng.randbytes(2))
                opener = rng.choice([a, b])
                cb.add(opener, escrow.open_escrow(a.peer, b.peer, price, deposit, deadline, opener=opener.peer,
                                                  escrow_id=eid))
                escrows.append(eid)
                opened.append((eid, a, b))
        elif kind == "lifecycle":
            if a is b:
                continue
            price = rng.randint(0, 8)
            deposit = price + rng.randint(0, 3)
            deadline = cb.node.height + rng.randint(1, 4)
            eid = escrow.derive_escrow_id(a.peer, b.peer, price, deposit, deadline, rng.randbytes(2))
            steps = [(b, escrow.open_escrow(a.peer, b.peer, price, deposit, deadline, opener=b.peer, escrow_id=eid)),
                     (b, escrow.fund(eid, b.peer)), (a, escrow.fund(eid, a.peer)),
                     (b, escrow.confirm_delivery(eid, b.peer))]
            last = rng.choice([a, b])
            steps.append((last, rng.choice([escrow.settle, escrow.dispute])(eid, last.peer)))
            steps.append((last, escrow.expire(eid, deadline + 1, last.peer)))
            for who, tx in steps:
                if rng.random() < 0.9:
                    cb.add(who, tx)
                if rng.random() < 0.25:
                    cb.seal()
            escrows.append(eid)
        elif kind == "product":
            if products and rng.random() < 0.4:
                owner, pid = rng.choice(products)
                who = owner if rng.random() < 0.7 else a
                cb.add(who, retire_product(who.peer, pid))
            else:
                topic = rng.choice(["air", "traffic", "noise"])
                salt = rng.randbytes(1)
                cb.add(a, post_product(a.peer, topic, rng.randint(0, 9), delivery=rng.choice(list(Delivery)),
                                       salt=salt))
                products.append((a, derive_product_id(a.peer, topic, salt)))
        elif kind == "forged":
            # a device intent relayed by a gateway that is not its own
            cb.add(rogue, transfer(rogue.peer, a.peer, 1))
            dev = rng.choice(devices)
            wrong = Account(dev.peer, None, gateway=rogue)
            cb.add(wrong, transfer(dev.peer, b.peer, 1))
        elif kind == "badgw":
            # a gateway cannot relay for itself
            payload = encode_delegated(gw.peer, transfer(gw.peer, a.peer, 1).payload)
            cb.add(gw, unsigned_transaction(transfer(gw.peer, a.peer, 1).channel, gw.peer, payload))
        if rng.random() < 1 / max_block:
            cb.seal()
    cb.seal()
    return cb.chain
