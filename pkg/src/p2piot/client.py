"""Client-side helpers: signing accounts and the ledger hosts peers talk to.

:class:`LedgerClient` drives a set of in-process full nodes on a logical
clock. :class:`FileLedger` keeps a single-authority chain in a dump file so
separate CLI processes can share one ledger.
"""

from __future__ import annotations

import logging
import os
from dataclasses import replace
from typing import Callable, Iterable, Protocol, Sequence

from .ledger import (
    Block,
    LedgerNode,
    NodeBehavior,
    PeerId,
    RoundFailed,
    SigningKey,
    SingleAuthority,
    Transaction,
    generate_identity_keys,
    load_chain_file,
    propose_and_commit,
    save_chain_file,
    sha256,
    sign_transaction,
    unsigned_transaction,
)
from .payloads import Role, encode_delegated
from .services import apply_block, configure, mint, register_identity, replay
from .state import ServiceState

log = logging.getLogger(__name__)

DEV_AUTHORITY_SEED = sha256(b"p2piot development authority")


class DelegationError(Exception):
    pass


class NoGateway(DelegationError):
    pass


class DelegationRefused(DelegationError):
    pass


def relay(gateway: PeerId, intent: Transaction) -> Transaction:
    """Wrap a device's intent so its gateway can sign it on the device's behalf."""
    if intent.sender == gateway:
        raise DelegationRefused("gateway cannot relay for itself")
    payload = encode_delegated(intent.sender, intent.payload)
    return unsigned_transaction(intent.channel, gateway, payload, intent.nonce, intent.timestamp)


def delegate_via_gateway(device: "Account", intent: Transaction, timestamp: int,
                         state: ServiceState | None = None, nonce: int | None = None) -> Transaction:
    """Have ``device``'s gateway wrap and sign ``intent`` so effects accrue to the device."""
    if device.gateway is None:
        raise NoGateway(f"{device.name} cannot sign and has no gateway")
    gateway = device.gateway
    if not gateway.can_sign:
        raise NoGateway(f"gateway {gateway.name} of {device.name} cannot sign")
    if state is not None and state.is_banned(gateway.peer):
        raise DelegationRefused(f"gateway {gateway.name} is banned")
    return gateway.sign(relay(gateway.peer, intent), timestamp, nonce)


class Account:
    """A peer's key material and nonce counter.

    Accounts that cannot sign (Class 0/1 devices) hold a ``gateway`` account
    that signs relayed transactions for them.
    """

    def __init__(self, peer: PeerId, key: SigningKey | None, *, gateway: "Account | None" = None) -> None:
        self.peer = peer
        self.key = key
        self.gateway = gateway
        self.next_nonce = 1

    @classmethod
    def from_seed(cls, seed: bytes, name: str = "", **kw) -> "Account":
        peer, key = generate_identity_keys(seed, name)
        return cls(peer, key, **kw)

    @classmethod
    def derive(cls, name: str, namespace: bytes = b"", *, can_sign: bool = True, gateway: "Account | None" = None) -> "Account":
        peer, key = generate_identity_keys(sha256(namespace + b"/" + name.encode("utf-8")), name)
        return cls(peer, key if can_sign else None, gateway=gateway)

    @property
    def can_sign(self) -> bool:
        return self.key is not None

    @property
    def name(self) -> str:
        return self.peer.short()

    def signer(self) -> "Account":
        if self.can_sign:
            return self
        if self.gateway is None:
            raise NoGateway(f"{self.name} cannot sign and has no gateway")
        if not self.gateway.can_sign:
            raise NoGateway(f"gateway {self.gateway.name} of {self.name} cannot sign")
        return self.gateway

    def sign(self, tx: Transaction, timestamp: int, nonce: int | None = None) -> Transaction:
        assert self.key is not None
        if nonce is None:
            nonce = self.next_nonce
        self.next_nonce = max(self.next_nonce, nonce + 1)
        return sign_transaction(replace(tx, nonce=nonce, timestamp=timestamp, tx_id=b""), self.key)

    def prepare(self, tx: Transaction, timestamp: int, nonce_for: Callable[[PeerId], int] | None = None,
                state: ServiceState | None = None) -> Transaction:
        """Sign ``tx`` directly or through the gateway when this account cannot sign.

        With ``state`` a banned gateway refuses to relay.
        """
        signer = self.signer()
        nonce = nonce_for(signer.peer) if nonce_for is not None else None
        if signer is not self:
            return delegate_via_gateway(self, tx, timestamp, state, nonce)
        return signer.sign(tx, timestamp, nonce)

    def __repr__(self) -> str:
        return f"Account({self.name})"


class Driver(Protocol):
    def step(self, now: int) -> None: ...

    @property
    def done(self) -> bool: ...


class LedgerClient:
    """Submits to every node, runs a commit round every ``cadence`` ticks and
    keeps an incrementally replayed :class:`ServiceState`."""

    def __init__(self, nodes: Sequence[LedgerNode], authority: Account, *, cadence: int = 5,
                 bootstrap: bool = True, ban_min_count: int = 5) -> None:
        if not nodes:
            raise ValueError("need at least one ledger node")
        self.nodes = list(nodes)
        self.authority = authority
        self.cadence = cadence
        self.now = 0
        self.failed_rounds = 0
        self.on_block: list[Callable[[Block, ServiceState], None]] = []
        self.on_tick: list[Callable[[int], None]] = []
        self._state = ServiceState()
        self._snapshot: ServiceState | None = None
        self._txs: dict[bytes, Transaction] = {}
        for block in self.reference.chain[1:]:
            self._absorb(block)
        if bootstrap and self.reference.height == 0:
            n0 = self.nodes[0]
            self.issue(authority, configure(authority.peer, n0.fee_schedule, n0.currency_label, ban_min_count))

    @classmethod
    def single(cls, authority: Account, fee: int = 0, currency_label: str = "TOK", **kw) -> "LedgerClient":
        node = LedgerNode(authority.peer, SingleAuthority(), fee, currency_label)
        return cls([node], authority, **kw)

    @property
    def reference(self) -> LedgerNode:
        for node in self.nodes:
            if node.behavior is NodeBehavior.HONEST:
                return node
        return self.nodes[0]

    @property
    def chain(self) -> list[Block]:
        return self.reference.chain

    @property
    def fee(self) -> int:
        return self.nodes[0].fee_schedule

    def _absorb(self, block: Block) -> None:
        apply_block(self._state, block)
        for tx in block.tx_list:
            self._txs[tx.tx_id] = tx
        self._snapshot = None

    def issue(self, account: Account, tx: Transaction) -> Transaction:
        signed = account.prepare(tx, self.now, state=self._state)
        for node in self.nodes:
            node.submit(signed)
        return signed

    def commit(self) -> Block | None:
        before = self.reference.height
        try:
            block = propose_and_commit(self.nodes)
        except RoundFailed as exc:
            self.failed_rounds += 1
            log.debug("%s", exc)
            return None
        if block is None or self.reference.height == before:
            return None
        self._absorb(block)
        for hook in self.on_block:
            hook(block, self._state)
        return block

    def tick(self) -> None:
        self.now += 1
        for hook in self.on_tick:
            hook(self.now)
        if self.now % self.cadence == 0:
            self.commit()

    def pending(self) -> bool:
        return any(node.mempool for node in self.nodes if node.behavior is NodeBehavior.HONEST)

    def state(self) -> ServiceState:
        if self._snapshot is None:
            self._snapshot = self._state.copy()
        return self._snapshot

    def lookup(self, tx_id: bytes) -> tuple[Transaction | None, bool]:
        """Committed transaction by id and whether replay applied it."""
        tx = self._txs.get(tx_id)
        if tx is None:
            return None, False
        return tx, all(r.tx_id != tx_id for r in self._state.rejections)

    def is_committed(self, tx_id: bytes) -> bool:
        return tx_id in self._txs

    def is_pending(self, tx_id: bytes) -> bool:
        return any(tx_id in node.mempool for node in self.nodes if node.behavior is NodeBehavior.HONEST)

    def run(self, drivers: Iterable[Driver] = (), tick_limit: int = 10_000) -> int:
        """Tick until every driver is done and the mempools are drained."""
        drivers = list(drivers)
        start = self.now
        while self.now - start < tick_limit:
            if all(d.done for d in drivers) and not self.pending():
                break
            self.tick()
            for d in drivers:
                if not d.done:
                    d.step(self.now)
        return self.now - start

    # -- conveniences used by scenarios and tests -------------------------

    def fund(self, account: Account, amount: int) -> Transaction:
        return self.issue(self.authority, mint(self.authority.peer, account.peer, amount))

    def register(self, account: Account, role: Role, metadata: str = "") -> Transaction:
        return self.issue(account, register_identity(account.peer, role, metadata))


class FileLedger:
    """Single-authority chain persisted in a P2LK dump, serialised by a file lock.

    Every submission is committed immediately as its own block, so readers in
    other processes see it as soon as :meth:`submit` returns.
    """

    def __init__(self, path: str | os.PathLike, authority_seed: bytes = DEV_AUTHORITY_SEED) -> None:
        from filelock import FileLock

        self.path = os.fspath(path)
        self.authority = Account.from_seed(authority_seed, "authority")
        self._lock = FileLock(self.path + ".lock")

    def exists(self) -> bool:
        return os.path.exists(self.path)

    def init(self, fee: int = 0, currency_label: str = "TOK") -> None:
        with self._lock:
            if os.path.exists(self.path):
                return
            node = LedgerNode(self.authority.peer, SingleAuthority(), fee, currency_label)
            tx = self.authority.sign(configure(self.authority.peer, fee, currency_label), 1, nonce=1)
            node.submit(tx)
            propose_and_commit([node])
            save_chain_file(self.path, node.chain)

    def load(self) -> list[Block]:
        return load_chain_file(self.path)

    def submit(self, account: Account, tx: Transaction) -> Transaction:
        with self._lock:
            chain = self.load()
            node = LedgerNode(self.authority.peer, SingleAuthority(), chain=chain)
            timestamp = max((t.timestamp for b in chain for t in b.tx_list), default=0) + 1
            signed = account.prepare(tx, timestamp, nonce_for=lambda p: node.last_nonce(p) + 1,
                                     state=replay(chain))
            node.submit(signed)
            propose_and_commit([node])
            save_chain_file(self.path, node.chain)
        return signed

    def state(self) -> ServiceState:
        return replay(self.load())

    @property
    def fee(self) -> int:
        return self.state().config.fee

    @property
    def chain(self) -> list[Block]:
        return self.load()

    def issue(self, account: Account, tx: Transaction) -> Transaction:
        return self.submit(account, tx)

    def is_committed(self, tx_id: bytes) -> bool:
        return any(tx.tx_id == tx_id for b in self.load() for tx in b.tx_list)

    def is_pending(self, tx_id: bytes) -> bool:
        return False

    def lookup(self, tx_id: bytes) -> tuple[Transaction | None, bool]:
        chain = self.load()
        for block in chain:
            for tx in block.tx_list:
                if tx.tx_id == tx_id:
                    state = replay(chain)
                    return tx, tx_id not in state.rejected_ids()
        return None, False
