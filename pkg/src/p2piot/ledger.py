"""Signed, hash-chained ledger replicated over in-process full nodes.

Ed25519 signs transactions and SHA-256 chains blocks. A round of
:func:`propose_and_commit` either lets a single authority seal its mempool or
runs a one-shot ``2f + 1`` vote among ``n >= 3f + 1`` nodes.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .codec import DecodeError, Reader, Writer

log = logging.getLogger(__name__)

HASH_SIZE = 32
KEY_SIZE = 32
SIG_SIZE = 64
MAX_NAME_BYTES = 64
ZERO_HASH = bytes(HASH_SIZE)
ZERO_SIG = bytes(SIG_SIZE)

CHAIN_MAGIC = b"P2LK"
CHAIN_VERSION = 0x01


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# --------------------------------------------------------------------------
# errors


class LedgerError(Exception):
    pass


class InvalidSeed(LedgerError):
    pass


class KeyMismatch(LedgerError):
    pass


class RejectedInvalidSignature(LedgerError):
    pass


class RejectedReplay(LedgerError):
    pass


class RoundFailed(LedgerError):
    def __init__(self, height: int, leader: "PeerId", approvals: int, needed: int, reason: str = ""):
        self.height = height
        self.leader = leader
        self.approvals = approvals
        self.needed = needed
        self.reason = reason
        super().__init__(
            f"round at height {height} (leader {leader.short()}) failed: "
            f"{approvals}/{needed} votes{'; ' + reason if reason else ''}"
        )


class ChainFormatError(LedgerError):
    pass


# --------------------------------------------------------------------------
# identities and keys


@dataclass(frozen=True)
class PeerId:
    public_key: bytes
    display_name: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if len(self.public_key) != KEY_SIZE:
            raise ValueError("public_key must be 32 bytes")
        if len(self.display_name.encode("utf-8")) > MAX_NAME_BYTES:
            raise ValueError("display_name longer than 64 bytes")

    def hex(self) -> str:
        return self.public_key.hex()

    def short(self) -> str:
        return self.display_name or self.public_key.hex()[:12]

    def __repr__(self) -> str:
        return f"PeerId({self.short()})"


class SigningKey:
    """Ed25519 secret key bound to its 32-byte seed."""

    __slots__ = ("seed", "_sk", "public_key")

    def __init__(self, seed: bytes) -> None:
        self.seed = bytes(seed)
        self._sk = Ed25519PrivateKey.from_private_bytes(self.seed)
        self.public_key = self._sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    def sign(self, message: bytes) -> bytes:
        return self._sk.sign(message)

    def __repr__(self) -> str:
        return f"SigningKey(pub={self.public_key.hex()[:12]}...)"


def generate_identity_keys(seed: bytes, display_name: str = "") -> tuple[PeerId, SigningKey]:
    """Derive a deterministic key pair from 32 bytes of entropy."""
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != 32:
        raise InvalidSeed("seed must be exactly 32 bytes")
    key = SigningKey(bytes(seed))
    return PeerId(key.public_key, display_name), key


@functools.lru_cache(maxsize=1 << 16)
def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    if len(public_key) != KEY_SIZE or len(signature) != SIG_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


# --------------------------------------------------------------------------
# transactions


class Channel(enum.IntEnum):
    PAYMENT = 1
    IDENTITY = 2
    RATING = 3
    RECORDS = 4
    APP_SPECIFIC = 5


def _write_peer(w: Writer, peer: PeerId) -> None:
    w.fixed(peer.public_key, KEY_SIZE).text(peer.display_name)


def _read_peer(r: Reader) -> PeerId:
    key = r.fixed(KEY_SIZE)
    name = r.text(limit=MAX_NAME_BYTES)
    return PeerId(key, name)


def transaction_body(channel: int, sender: PeerId, payload: bytes, nonce: int, timestamp: int) -> bytes:
    """Bytes that are hashed into tx_id and signed."""
    w = Writer().u8(int(channel))
    _write_peer(w, sender)
    return w.blob(payload).u64(nonce).u64(timestamp).getvalue()


@dataclass(frozen=True)
class Transaction:
    channel: Channel
    sender: PeerId
    payload: bytes
    nonce: int
    timestamp: int
    signature: bytes = ZERO_SIG
    tx_id: bytes = b""

    def __post_init__(self) -> None:
        if not self.tx_id:
            object.__setattr__(self, "tx_id", sha256(self.body()))

    def body(self) -> bytes:
        return transaction_body(self.channel, self.sender, self.payload, self.nonce, self.timestamp)

    def encode(self) -> bytes:
        return self.body() + self.tx_id + self.signature

    @classmethod
    def read(cls, r: Reader) -> "Transaction":
        try:
            channel = Channel(r.u8())
        except ValueError as exc:
            raise DecodeError(str(exc)) from None
        sender = _read_peer(r)
        payload = r.blob()
        nonce = r.u64()
        timestamp = r.u64()
        tx_id = r.fixed(HASH_SIZE)
        signature = r.fixed(SIG_SIZE)
        return cls(channel, sender, payload, nonce, timestamp, signature, tx_id)


def unsigned_transaction(
    channel: Channel, sender: PeerId, payload: bytes, nonce: int = 0, timestamp: int = 0
) -> Transaction:
    return Transaction(Channel(channel), sender, bytes(payload), nonce, timestamp)


def sign_transaction(unsigned_tx: Transaction, signing_key: SigningKey) -> Transaction:
    if signing_key.public_key != unsigned_tx.sender.public_key:
        raise KeyMismatch(f"key does not belong to sender {unsigned_tx.sender.short()}")
    body = unsigned_tx.body()
    return replace(unsigned_tx, signature=signing_key.sign(body), tx_id=sha256(body))


def verify_transaction(tx: Transaction) -> bool:
    try:
        body = tx.body()
    except Exception:
        return False
    if sha256(body) != tx.tx_id:
        return False
    return verify_signature(tx.sender.public_key, body, tx.signature)


# --------------------------------------------------------------------------
# blocks


def compute_block_hash(height: int, prev_hash: bytes, tx_ids: Iterable[bytes]) -> bytes:
    return sha256(Writer().u64(height).fixed(prev_hash, HASH_SIZE).getvalue() + b"".join(tx_ids))


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    tx_list: tuple[Transaction, ...]
    block_hash: bytes = b""
    committer_quorum: tuple[PeerId, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "tx_list", tuple(self.tx_list))
        members = {p.public_key: p for p in self.committer_quorum}
        object.__setattr__(self, "committer_quorum", tuple(members[k] for k in sorted(members)))
        if not self.block_hash:
            object.__setattr__(self, "block_hash", self.expected_hash())

    def expected_hash(self) -> bytes:
        return compute_block_hash(self.height, self.prev_hash, (tx.tx_id for tx in self.tx_list))

    def encode(self) -> bytes:
        w = Writer().u64(self.height).fixed(self.prev_hash, HASH_SIZE).u32(len(self.tx_list))
        for tx in self.tx_list:
            w.raw(tx.encode())
        w.u32(len(self.committer_quorum))
        for peer in self.committer_quorum:
            w.fixed(peer.public_key, KEY_SIZE)
        return w.fixed(self.block_hash, HASH_SIZE).getvalue()

    @classmethod
    def read(cls, r: Reader) -> "Block":
        height = r.u64()
        prev_hash = r.fixed(HASH_SIZE)
        txs = tuple(Transaction.read(r) for _ in range(r.u32()))
        quorum = tuple(PeerId(r.fixed(KEY_SIZE)) for _ in range(r.u32()))
        block_hash = r.fixed(HASH_SIZE)
        block = cls.__new__(cls)
        # bypass canonicalisation so a decoded block keeps exactly what was on disk
        for name, value in (
            ("height", height),
            ("prev_hash", prev_hash),
            ("tx_list", txs),
            ("block_hash", block_hash),
            ("committer_quorum", quorum),
        ):
            object.__setattr__(block, name, value)
        return block


def _is_canonical_quorum(quorum: Sequence[PeerId]) -> bool:
    keys = [p.public_key for p in quorum]
    return all(a < b for a, b in zip(keys, keys[1:]))


def genesis_block() -> Block:
    return Block(0, ZERO_HASH, ())


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class SingleAuthority:
    def __str__(self) -> str:
        return "authority"


@dataclass(frozen=True)
class Quorum:
    n: int
    f: int

    def __post_init__(self) -> None:
        if self.f < 0 or self.n < 3 * self.f + 1:
            raise ValueError(f"quorum mode needs n >= 3f + 1 (n={self.n}, f={self.f})")

    @property
    def threshold(self) -> int:
        return 2 * self.f + 1

    def __str__(self) -> str:
        return f"quorum {self.n} {self.f}"


Mode = SingleAuthority | Quorum


class ChainValidator:
    """Left fold behind :func:`validate_chain`, one block at a time.

    Once a block fails, the validator stays failed. ``copy`` snapshots the
    fold so callers can branch from any prefix.
    """

    def __init__(self, validators: Iterable[PeerId] | None = None, mode: Mode | None = None) -> None:
        self.allowed = frozenset(p.public_key for p in validators) if validators is not None else None
        self.mode = mode
        self.last_nonce: dict[bytes, int] = {}
        self.prev: Block | None = None
        self.ok = True

    def copy(self) -> "ChainValidator":
        out = ChainValidator.__new__(ChainValidator)
        out.allowed, out.mode, out.prev, out.ok = self.allowed, self.mode, self.prev, self.ok
        out.last_nonce = dict(self.last_nonce)
        return out

    def extend(self, block: Block) -> bool:
        self.ok = self.ok and self._check(block)
        if self.ok:
            self.prev = block
        return self.ok

    def _check(self, block: Block) -> bool:
        if block.block_hash != block.expected_hash():
            return False
        if self.prev is None:
            return (block.height == 0 and block.prev_hash == ZERO_HASH
                    and not block.tx_list and not block.committer_quorum)
        if block.height != self.prev.height + 1 or block.prev_hash != self.prev.block_hash:
            return False
        if not _is_canonical_quorum(block.committer_quorum):
            return False
        if self.allowed is not None:
            if any(p.public_key not in self.allowed for p in block.committer_quorum):
                return False
            if isinstance(self.mode, Quorum) and len(block.committer_quorum) < self.mode.threshold:
                return False
            if isinstance(self.mode, SingleAuthority) and block.committer_quorum:
                return False
        for tx in block.tx_list:
            if not verify_transaction(tx):
                return False
            key = tx.sender.public_key
            if tx.nonce <= self.last_nonce.get(key, 0):
                return False
            self.last_nonce[key] = tx.nonce
        return True


def validate_chain(
    chain: Sequence[Block],
    validators: Iterable[PeerId] | None = None,
    mode: Mode | None = None,
) -> bool:
    """Check links, hashes, signatures and per-sender nonce order.

    ``validators`` (and optionally ``mode``) additionally pin who may appear in
    a block's committer set; without them the set is only checked for
    canonical ordering.
    """
    if not chain:
        return False
    check = ChainValidator(validators, mode)
    return all(check.extend(block) for block in chain)


# --------------------------------------------------------------------------
# nodes and consensus


class NodeBehavior(enum.Enum):
    HONEST = "honest"
    VOTE_REFUSE = "vote-refuse"
    EQUIVOCATE = "equivocate"


@dataclass(frozen=True)
class Receipt:
    tx_id: bytes
    fee_charged: int


@dataclass(frozen=True)
class Vote:
    voter: PeerId
    height: int
    block_hash: bytes
    approve: bool


class LedgerNode:
    """One full node: committed chain, mempool and commit-rule settings.

    Mutations (``submit``, ``append``) are expected from a single logical
    writer; readers only ever see ``chain``, which is replaced atomically.
    """

    def __init__(
        self,
        node_id: PeerId,
        mode: Mode | None = None,
        fee_schedule: int = 0,
        currency_label: str = "TOK",
        behavior: NodeBehavior = NodeBehavior.HONEST,
        chain: Sequence[Block] | None = None,
    ) -> None:
        if fee_schedule < 0:
            raise ValueError("fee_schedule must be >= 0")
        self.node_id = node_id
        self.mode: Mode = mode if mode is not None else SingleAuthority()
        self.fee_schedule = fee_schedule
        self.currency_label = currency_label
        self.behavior = behavior
        self.chain: list[Block] = list(chain) if chain is not None else [genesis_block()]
        self.mempool: dict[bytes, Transaction] = {}
        self.view = 0
        self._committed_nonce: dict[bytes, int] = {}
        self._committed_ids: set[bytes] = set()
        for block in self.chain[1:]:
            self._index(block)

    def __repr__(self) -> str:
        return f"LedgerNode({self.node_id.short()}, height={self.height}, mode={self.mode})"

    @property
    def height(self) -> int:
        return len(self.chain) - 1

    @property
    def tip(self) -> Block:
        return self.chain[-1]

    def last_nonce(self, sender: PeerId) -> int:
        return self._committed_nonce.get(sender.public_key, 0)

    def is_committed(self, tx_id: bytes) -> bool:
        return tx_id in self._committed_ids

    def _index(self, block: Block) -> None:
        for tx in block.tx_list:
            self._committed_nonce[tx.sender.public_key] = tx.nonce
            self._committed_ids.add(tx.tx_id)

    def submit(self, tx: Transaction) -> Receipt:
        if tx.tx_id in self.mempool:
            return Receipt(tx.tx_id, self.fee_schedule)
        if not verify_transaction(tx):
            raise RejectedInvalidSignature(f"transaction {tx.tx_id.hex()[:12]} does not verify")
        if tx.nonce <= self.last_nonce(tx.sender):
            raise RejectedReplay(
                f"nonce {tx.nonce} <= committed nonce {self.last_nonce(tx.sender)} for {tx.sender.short()}"
            )
        self.mempool[tx.tx_id] = tx
        return Receipt(tx.tx_id, self.fee_schedule)

    def build_proposal(self) -> Block | None:
        """Drain the mempool into a candidate block in deterministic order."""
        pending = sorted(self.mempool.values(), key=lambda t: (t.timestamp, t.sender.public_key, t.nonce, t.tx_id))
        seen: dict[bytes, int] = {}
        chosen: list[Transaction] = []
        for tx in pending:
            key = tx.sender.public_key
            floor = seen.get(key, self._committed_nonce.get(key, 0))
            if tx.nonce > floor:
                chosen.append(tx)
                seen[key] = tx.nonce
        if not chosen:
            return None
        return Block(self.height + 1, self.tip.block_hash, tuple(chosen))

    def check_block(self, block: Block) -> bool:
        if block.height != self.height + 1 or block.prev_hash != self.tip.block_hash:
            return False
        if block.block_hash != block.expected_hash():
            return False
        seen: dict[bytes, int] = {}
        for tx in block.tx_list:
            if not verify_transaction(tx) or tx.tx_id in self._committed_ids:
                return False
            key = tx.sender.public_key
            if tx.nonce <= seen.get(key, self._committed_nonce.get(key, 0)):
                return False
            seen[key] = tx.nonce
        return True

    def vote(self, proposals: Sequence[Block]) -> list[Vote]:
        """Votes this node broadcasts for the proposals it saw this round."""
        if not proposals:
            return []
        if self.behavior is NodeBehavior.VOTE_REFUSE:
            return []
        first = proposals[0]
        if self.behavior is NodeBehavior.EQUIVOCATE:
            return [
                Vote(self.node_id, first.height, first.block_hash, True),
                Vote(self.node_id, first.height, first.block_hash, False),
            ]
        if len({p.block_hash for p in proposals}) > 1:
            # conflicting proposals from one leader: refuse to take a side
            return [Vote(self.node_id, first.height, first.block_hash, False)]
        return [Vote(self.node_id, first.height, first.block_hash, self.check_block(first))]

    def append(self, block: Block) -> None:
        if block.height != self.height + 1 or block.prev_hash != self.tip.block_hash:
            raise LedgerError(f"block {block.height} does not extend tip {self.height}")
        self.chain = self.chain + [block]
        self._index(block)
        for tx in block.tx_list:
            self.mempool.pop(tx.tx_id, None)
        for tx_id, tx in list(self.mempool.items()):
            if tx.nonce <= self.last_nonce(tx.sender):
                del self.mempool[tx_id]


def submit_transaction(node: LedgerNode, tx: Transaction) -> Receipt:
    return node.submit(tx)


def _equivocating_pair(leader: LedgerNode, block: Block) -> list[Block]:
    alt_txs = block.tx_list[:-1] if len(block.tx_list) > 1 else block.tx_list[::-1]
    alt = Block(block.height, block.prev_hash, alt_txs)
    if alt.block_hash == block.block_hash:
        alt = Block(block.height, block.prev_hash, ())
    return [block, alt]


def tally(votes: Iterable[Vote], block_hash: bytes) -> tuple[list[PeerId], list[PeerId]]:
    """Approvals for ``block_hash`` plus the voters caught equivocating."""
    by_voter: dict[PeerId, set[tuple[bytes, bool]]] = {}
    for v in votes:
        by_voter.setdefault(v.voter, set()).add((v.block_hash, v.approve))
    approvals, equivocators = [], []
    for voter, cast in by_voter.items():
        if len(cast) > 1:
            equivocators.append(voter)
        elif (block_hash, True) in cast:
            approvals.append(voter)
    return approvals, equivocators


def propose_and_commit(node_set: Sequence[LedgerNode]) -> Block | None:
    """Run one commit round; returns the appended block or ``None`` if idle.

    Raises :class:`RoundFailed` when a quorum round falls short of ``2f + 1``
    approvals; the pending transactions stay in the mempools and the next
    call rotates to the following leader.
    """
    if not node_set:
        raise ValueError("empty node set")
    mode = node_set[0].mode
    if isinstance(mode, SingleAuthority):
        authority = node_set[0]
        block = authority.build_proposal()
        if block is None:
            return None
        for node in node_set:
            node.append(block)
        log.debug("authority %s sealed block %d (%d txs)", authority.node_id.short(), block.height, len(block.tx_list))
        return block

    if len(node_set) != mode.n:
        raise ValueError(f"quorum mode expects {mode.n} nodes, got {len(node_set)}")
    height = node_set[0].height + 1
    view = max(node.view for node in node_set)
    leader = node_set[(height + view) % mode.n]
    block = leader.build_proposal()
    if block is None:
        return None
    if leader.behavior is NodeBehavior.EQUIVOCATE:
        proposals = _equivocating_pair(leader, block)
    else:
        proposals = [block]

    votes: list[Vote] = []
    for node in node_set:
        votes.extend(node.vote(proposals))
    approvals, equivocators = tally(votes, proposals[0].block_hash)
    if len(proposals) > 1:
        approvals = []
    if len(approvals) < mode.threshold:
        for node in node_set:
            node.view = view + 1
        reason = "leader equivocated" if len(proposals) > 1 else ""
        if equivocators:
            reason = (reason + "; " if reason else "") + f"{len(equivocators)} equivocating voter(s)"
        raise RoundFailed(height, leader.node_id, len(approvals), mode.threshold, reason)

    committed = replace(proposals[0], committer_quorum=tuple(sorted(approvals, key=lambda p: p.public_key)))
    for node in node_set:
        if node.tip.block_hash == committed.prev_hash:
            node.append(committed)
        node.view = 0
    log.debug("quorum committed block %d with %d/%d votes", height, len(approvals), mode.n)
    return committed


# --------------------------------------------------------------------------
# reads


@dataclass(frozen=True)
class QueryFilter:
    channel: Channel | None = None
    sender: PeerId | None = None
    counterparty: PeerId | None = None
    height_range: tuple[int, int] | None = None


def read_query(node: LedgerNode | Sequence[Block], filter: QueryFilter | None = None) -> list[tuple[int, Transaction]]:
    """Committed transactions matching every supplied field, in commit order.

    ``sender`` matches the signer or, for gateway-relayed transactions, the
    device they were relayed for. ``counterparty`` matches any peer named in
    the payload. ``height_range`` is inclusive.
    """
    from .payloads import delegation_origin, named_peers

    f = filter or QueryFilter()
    chain = node.chain if isinstance(node, LedgerNode) else node
    lo, hi = f.height_range if f.height_range is not None else (0, len(chain) - 1)
    out: list[tuple[int, Transaction]] = []
    for block in chain[max(lo, 0): hi + 1]:
        for tx in block.tx_list:
            if f.channel is not None and tx.channel != f.channel:
                continue
            if f.sender is not None:
                origin = delegation_origin(tx.payload)
                if f.sender != tx.sender and f.sender != origin:
                    continue
            if f.counterparty is not None and f.counterparty.public_key not in named_peers(tx.channel, tx.payload):
                continue
            out.append((block.height, tx))
    return out


# --------------------------------------------------------------------------
# chain files


def dump_chain(chain: Sequence[Block]) -> bytes:
    return CHAIN_MAGIC + bytes([CHAIN_VERSION]) + b"".join(block.encode() for block in chain)


def load_chain(data: bytes) -> list[Block]:
    if data[:4] != CHAIN_MAGIC:
        raise ChainFormatError("not a P2LK chain file")
    if len(data) < 5 or data[4] != CHAIN_VERSION:
        raise ChainFormatError("unsupported chain format version")
    r = Reader(data, 5)
    blocks: list[Block] = []
    try:
        while r.remaining():
            blocks.append(Block.read(r))
    except (DecodeError, ValueError) as exc:
        raise ChainFormatError(f"corrupt chain at block {len(blocks)}: {exc}") from None
    return blocks


def save_chain_file(path, chain: Sequence[Block]) -> None:
    import os

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dump_chain(chain))
    os.replace(tmp, path)


def load_chain_file(path) -> list[Block]:
    with open(path, "rb") as fh:
        return load_chain(fh.read())
