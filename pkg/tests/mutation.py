"""Exhaustive single-byte mutation sweep over chain files.

Each byte position of a dumped chain is XORed with one random nonzero value
and the result must fail either ``load_chain`` or ``validate_chain``. The
sweep is exact but avoids redundant work: the validator fold is snapshotted
before every block, so only the mutated block and whatever follows it are
re-checked, and blocks after a mutation are re-parsed only when the mutated
block no longer ends on its original boundary.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from helpers import account
from p2piot.codec import DecodeError, Reader
from p2piot.ledger import (
    Block,
    ChainValidator,
    LedgerNode,
    Quorum,
    RoundFailed,
    SingleAuthority,
    dump_chain,
    load_chain,
    propose_and_commit,
    validate_chain,
)
from p2piot.payloads import RecordKind, Role
from p2piot.services import mint, record_event, register_identity, transfer

HEADER = 5  # magic + version


@dataclass
class Sample:
    chain: list[Block]
    validators: tuple | None = None
    mode: object = None


def random_chain(rng: random.Random, quorum: bool = False) -> Sample:
    """1..20 blocks including genesis, 1..10 transactions in every later block."""
    ns = rng.randbytes(4)
    if quorum:
        vals = [account(f"v{i}", ns) for i in range(4)]
        nodes = [LedgerNode(v.peer, Quorum(4, 1)) for v in vals]
    else:
        vals = [account("authority", ns)]
        nodes = [LedgerNode(vals[0].peer, SingleAuthority())]
    peers = [account(f"p{i}", ns) for i in range(5)] + vals[:1]
    now = 0
    for _ in range(rng.randint(0, 19)):
        for _ in range(rng.randint(1, 10)):
            a, b = rng.choice(peers), rng.choice(peers)
            tx = rng.choice([
                lambda: transfer(a.peer, b.peer, rng.randint(0, 50), rng.randbytes(rng.randint(0, 12))),
                lambda: mint(a.peer, b.peer, rng.randint(1, 99)),
                lambda: register_identity(a.peer, rng.choice(list(Role)), rng.choice(["", "hub"])),
                lambda: record_event(a.peer, rng.choice(list(RecordKind)), (a.peer, b.peer), rng.randbytes(4),
                                     rng.randbytes(rng.choice([0, 32]))),
            ])()
            now += 1
            signed = a.prepare(tx, now)
            for node in nodes:
                node.submit(signed)
        while True:
            try:
                propose_and_commit(nodes)
                break
            except RoundFailed:  # pragma: no cover - every node is honest
                continue
    peers_pinned = tuple(v.peer for v in vals) if quorum else None
    return Sample(nodes[0].chain, peers_pinned, Quorum(4, 1) if quorum else None)


@dataclass
class SweepResult:
    chains: int = 0
    mutations: int = 0
    false_accepts: list = field(default_factory=list)
    complete: bool = True
    seconds: float = 0.0


def _parse_from(data: bytes, pos: int) -> list[Block] | None:
    r = Reader(data, pos)
    out = []
    try:
        while r.remaining():
            out.append(Block.read(r))
    except (DecodeError, ValueError):
        return None
    return out


def sweep_chain(sample: Sample, rng: random.Random, result: SweepResult) -> None:
    chain, vals, mode = sample.chain, sample.validators, sample.mode
    assert validate_chain(chain, vals, mode)
    data = dump_chain(chain)
    encs = [b.encode() for b in chain]
    starts = [HEADER]
    for e in encs:
        starts.append(starts[-1] + len(e))
    snaps, v = [], ChainValidator(vals, mode)
    for b in chain:
        snaps.append(v.copy())
        v.extend(b)

    for pos in range(HEADER):
        m = bytearray(data)
        m[pos] ^= rng.randrange(1, 256)
        result.mutations += 1
        try:
            load_chain(bytes(m))
            result.false_accepts.append((pos, "header"))
        except Exception:
            pass

    for j, enc in enumerate(encs):
        base = starts[j]
        for off in range(len(enc)):
            delta = rng.randrange(1, 256)
            result.mutations += 1
            blob = bytearray(enc)
            blob[off] ^= delta
            r = Reader(bytes(blob))
            try:
                block = Block.read(r)
                whole = not r.remaining()
            except (DecodeError, ValueError):
                block, whole = None, False
            if whole:
                check = snaps[j].copy()
                if not check.extend(block):
                    continue
                accepted = all(check.extend(b) for b in chain[j + 1:])
            else:
                # the mutation moved a length field; parse the rest of the file as load_chain would
                m = bytearray(data)
                m[base + off] ^= delta
                rest = _parse_from(bytes(m), base)
                if rest is None:
                    continue
                check = snaps[j].copy()
                accepted = bool(rest) and all(check.extend(b) for b in rest)
            if accepted:
                result.false_accepts.append((j, off, delta))


def sweep(samples, rng: random.Random, budget: float | None) -> SweepResult:
    """Sweep every byte of every sample; stops early once ``budget`` seconds elapse."""
    result = SweepResult()
    start = time.perf_counter()
    for sample in samples:
        if budget is not None and time.perf_counter() - start > budget:
            result.complete = False
            break
        sweep_chain(sample, rng, result)
        result.chains += 1
    result.seconds = time.perf_counter() - start
    return result
