import random
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import account, funded_ledger, random_service_chain
from oracle import normalize, oracle_state
from p2piot.client import Account, DelegationRefused, LedgerClient, NoGateway, delegate_via_gateway
from p2piot.ledger import Channel, QueryFilter, dump_chain, genesis_block, read_query, unsigned_transaction
from p2piot.payloads import RecordKind, Role, encode_delegated
from p2piot.services import (
    InvalidChain,
    apply_blocks,
    apply_transaction,
    audit_trail,
    balance_of,
    format_report,
    mint,
    record_event,
    register_identity,
    replay,
    reputation_of,
    resolve_identity,
    submit_rating,
    transfer,
    wallet_of,
)
from p2piot.state import ServiceConfig, ServiceState


def test_genesis_only_replay_is_empty():
    s = replay([genesis_block()])
    assert s.balances == {} and s.identities == {} and s.reputations == {} and s.records == []
    assert s.escrows == {} and s.minted == 0 and s.conserved()


def test_replay_rejects_invalid_chain():
    with pytest.raises(InvalidChain):
        replay([])


# -- payments ---------------------------------------------------------------


def test_mint_then_transfer():
    led, acc = funded_ledger(0, "a", "b", balance=0)
    a, b = acc["a"], acc["b"]
    led.fund(a, 100)
    led.run()
    led.issue(a, transfer(a.peer, b.peer, 30))
    led.run()
    s = led.state()
    assert balance_of(s, a.peer) == 70 and balance_of(s, b.peer) == 30


def test_mint_from_non_authority_rejected():
    led, acc = funded_ledger(0, "a", balance=0)
    a = acc["a"]
    tx = led.issue(a, mint(a.peer, a.peer, 100))
    led.run()
    s = led.state()
    assert balance_of(s, a.peer) == 0
    assert any(r.tx_id == tx.tx_id and r.reason.startswith("NotAuthority") for r in s.rejections)


def test_mints_are_additive():
    led, acc = funded_ledger(0, "a", balance=0)
    led.fund(acc["a"], 100)
    led.fund(acc["a"], 50)
    led.run()
    assert led.state().minted == 150


def test_overdraw_with_fee_skipped():
    led, acc = funded_ledger(1, "a", "b", balance=0)
    a, b = acc["a"], acc["b"]
    led.fund(a, 100)
    led.run()
    before = balance_of(led.state(), a.peer)
    assert before == 100
    tx = led.issue(a, transfer(a.peer, b.peer, 100))
    led.run()
    s = led.state()
    assert balance_of(s, a.peer) == 100 and balance_of(s, b.peer) == 0
    assert any(r.tx_id == tx.tx_id and r.reason.startswith("InsufficientFunds") for r in s.rejections)


def test_unknown_peer_balance_is_zero():
    assert balance_of(ServiceState(), account("nobody").peer) == 0
    w = wallet_of(ServiceState(config=ServiceConfig(currency_label="USD")), account("x").peer)
    assert w.balance == 0 and w.currency_label == "USD"


def _sequential_balances(start, fee, moves):
    """Plain arithmetic oracle for a list of (from, to, amount) transfers."""
    bal, sink = dict(start), 0
    for src, dst, amt in moves:
        if bal.get(src, 0) >= amt + fee:
            bal[src] -= amt + fee
            bal[dst] = bal.get(dst, 0) + amt
            sink += fee
    return bal, sink


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 40)), min_size=20, max_size=20))
def test_random_transfers_match_sequential_oracle(moves):
    auth = account("authority", b"xfer")
    led = LedgerClient.single(auth, fee=1)
    peers = [account(f"p{i}", b"xfer") for i in range(4)]
    for p in peers:
        led.fund(p, 50)
    led.run()
    for src, dst, amt in moves:
        led.issue(peers[src], transfer(peers[src].peer, peers[dst].peer, amt))
        led.tick()  # one tx per tick keeps commit order equal to issue order
        led.commit()
    led.run()
    s = led.state()
    bal, sink = _sequential_balances({i: 50 for i in range(4)}, 1, moves)
    assert [balance_of(s, p.peer) for p in peers] == [bal[i] for i in range(4)]
    assert s.fee_sink == sink and s.conserved()


# -- identity ---------------------------------------------------------------


def test_registration_and_duplicate():
    led, acc = funded_ledger(0, balance=0)
    a = account("a")
    led.register(a, Role.SELLER, "first")
    led.run()
    tx = led.register(a, Role.BUYER, "second")
    led.run()
    rec = resolve_identity(led.state(), a.peer)
    assert rec.role is Role.SELLER and rec.metadata == "first"
    assert any(r.tx_id == tx.tx_id and r.reason == "AlreadyRegistered" for r in led.state().rejections)


def test_register_ten_and_resolve():
    led, _ = funded_ledger(0)
    roles = {f"n{i}": list(Role)[i % 6] for i in range(10)}
    accts = {n: account(n) for n in roles}
    for n, a in accts.items():
        led.register(a, roles[n])
    led.run()
    s = led.state()
    for n, a in accts.items():
        assert resolve_identity(s, a.peer).role is roles[n]
    assert resolve_identity(s, account("ghost").peer) is None


# -- ratings ----------------------------------------------------------------


def _trade_ledger(fee=0):
    led, acc = funded_ledger(fee, "seller", "buyer", roles={"seller": Role.SELLER})
    s, b = acc["seller"], acc["buyer"]
    order = led.issue(s, record_event(s.peer, RecordKind.ORDER, (s.peer, b.peer), b"trade-1"))
    led.run()
    return led, s, b, order


def test_valid_rating_and_duplicate():
    led, s, b, order = _trade_ledger()
    led.issue(b, submit_rating(b.peer, s.peer, 5, order.tx_id))
    led.run()
    dup = led.issue(b, submit_rating(b.peer, s.peer, 1, order.tx_id))
    led.run()
    rep = reputation_of(led.state(), s.peer)
    assert rep.count == 1 and rep.mean_score == 5
    assert any(r.tx_id == dup.tx_id and r.reason == "DuplicateRating" for r in led.state().rejections)


@pytest.mark.parametrize("case", ["self", "unknown", "dangling", "outsider"])
def test_rating_rejections(case):
    led, s, b, order = _trade_ledger()
    if case == "self":
        tx = led.issue(b, submit_rating(b.peer, b.peer, 5, order.tx_id))
    elif case == "unknown":
        tx = led.issue(b, submit_rating(b.peer, account("ghost").peer, 5, order.tx_id))
    elif case == "dangling":
        tx = led.issue(b, submit_rating(b.peer, s.peer, 5, bytes(32)))
    else:
        other = account("other")
        led.fund(other, 10)
        led.register(other, Role.BUYER)
        led.run()
        tx = led.issue(other, submit_rating(other.peer, s.peer, 1, order.tx_id))
    led.run()
    assert tx.tx_id in led.state().rejected_ids()
    assert reputation_of(led.state(), s.peer).count == 0


def test_score_builder_bounds():
    with pytest.raises(ValueError):
        submit_rating(account("a").peer, account("b").peer, 6, bytes(32))


def test_reputation_examples():
    assert reputation_of(ServiceState(), account("x").peer).mean_score is None
    led, s, b, _ = _trade_ledger()
    raters = []
    for i, score in enumerate([5, 4, 3]):
        r = account(f"r{i}")
        led.fund(r, 10)
        led.register(r, Role.BUYER)
        led.run()
        ref = led.issue(r, record_event(r.peer, RecordKind.ORDER, (s.peer, r.peer), b"t%d" % i))
        led.run()
        led.issue(r, submit_rating(r.peer, s.peer, score, ref.tx_id))
        raters.append(r)
    led.run()
    rep = reputation_of(led.state(), s.peer)
    assert rep.mean_score == Fraction(4) and rep.count == 3 and not rep.banned


def _ban_oracle(scores, min_count=5, below=Fraction(2)):
    """Ban once any prefix has count ≥ min_count and mean < below."""
    return any(i >= min_count and Fraction(sum(scores[:i]), i) < below for i in range(1, len(scores) + 1))


def test_ban_rule_exhaustive_up_to_six_scores():
    """Every score sequence of length ≤ 6 against the brute-force rule."""
    subject = account("subject", b"ban")
    raters = [account(f"r{i}", b"ban") for i in range(6)]
    base = ServiceState(config=ServiceConfig(authority=None), config_locked=True)
    for p in [subject, *raters]:
        register = register_identity(p.peer, Role.BUYER)
        apply_transaction(base, register, 1)
    refs = []
    for i, r in enumerate(raters):
        tx = unsigned_transaction(Channel.RECORDS, r.peer,
                                  record_event(r.peer, RecordKind.ORDER, (subject.peer, r.peer), bytes([i])).payload)
        assert apply_transaction(base, tx, 1)
        refs.append(tx.tx_id)
    checked = 0

    def walk(state, scores):
        nonlocal checked
        rep = reputation_of(state, subject.peer)
        assert rep.banned == _ban_oracle(scores)
        assert rep.count == len(scores)
        if scores:
            assert 1 <= rep.mean_score <= 5
        checked += 1
        if len(scores) == 6:
            return
        i = len(scores)
        for score in range(1, 6):
            nxt = state.copy()
            tx = submit_rating(raters[i].peer, subject.peer, score, refs[i])
            assert apply_transaction(nxt, tx, 2)
            walk(nxt, scores + [score])

    walk(base, [])
    assert checked == sum(5 ** i for i in range(7))


def test_five_one_star_ratings_ban():
    assert _ban_oracle([1, 1, 1, 1, 1]) and not _ban_oracle([1, 1, 1, 1]) and not _ban_oracle([1, 1, 1, 2, 5]) and _ban_oracle([1, 1, 1, 1, 5])


# -- records ----------------------------------------------------------------


def test_record_and_audit_trail():
    led, s, b, order = _trade_ledger()
    led.issue(s, record_event(s.peer, RecordKind.INVOICE, (s.peer, b.peer), b"s1", b"d" * 32))
    outsider = account("outsider")
    led.fund(outsider, 10)
    led.run()
    bad = led.issue(outsider, record_event(outsider.peer, RecordKind.ORDER, (s.peer, b.peer), b"s1"))
    led.run()
    st_ = led.state()
    trail = audit_trail(st_, b"s1")
    assert [e.kind for e in trail] == [RecordKind.INVOICE] and trail[0].digest == b"d" * 32
    assert bad.tx_id in st_.rejected_ids()
    assert audit_trail(st_, b"unknown") == []
    records_q = [tx.tx_id for _, tx in read_query(led.chain, QueryFilter(channel=Channel.RECORDS))]
    ids = [e.tx_id for e in audit_trail(st_, b"trade-1") + trail]
    it = iter(records_q)
    assert all(i in it for i in ids)


# -- delegation -------------------------------------------------------------


def test_device_effects_accrue_to_origin():
    led, acc = funded_ledger(1, "gw", "buyer", roles={"gw": Role.GATEWAY})
    gw = acc["gw"]
    sensor = Account.derive("sensor", b"test", can_sign=False, gateway=gw)
    led.fund(sensor, 20)
    led.run()
    led.register(sensor, Role.DEVICE)
    led.run()
    led.issue(sensor, transfer(sensor.peer, acc["buyer"].peer, 5))
    led.issue(acc["buyer"], transfer(acc["buyer"].peer, sensor.peer, 7))
    led.run()
    s = led.state()
    rec = resolve_identity(s, sensor.peer)
    assert rec.gateway == gw.peer and rec.role is Role.DEVICE
    assert balance_of(s, sensor.peer) == 20 - 1 - 5 - 1 + 7
    signers = {tx.sender for b in led.chain for tx in b.tx_list}
    assert sensor.peer not in signers
    # a relayed tx is found under the device's id
    assert any(tx.sender == gw.peer for _, tx in read_query(led.chain, QueryFilter(sender=sensor.peer)))


def test_no_gateway_and_banned_gateway():
    lonely = Account.derive("lonely", b"t", can_sign=False)
    with pytest.raises(NoGateway):
        lonely.prepare(transfer(lonely.peer, lonely.peer, 1), 1)
    gw = account("gw")
    dev = Account.derive("dev", b"t", can_sign=False, gateway=gw)
    state = ServiceState()
    from p2piot.state import ReputationRecord

    state.reputations[gw.peer] = ReputationRecord(gw.peer, (), True)
    with pytest.raises(DelegationRefused):
        delegate_via_gateway(dev, transfer(dev.peer, gw.peer, 1), 1, state)


def test_wrong_gateway_refused_at_replay():
    led, acc = funded_ledger(0, "gw", "rogue")
    gw, rogue = acc["gw"], acc["rogue"]
    dev = Account.derive("dev", b"test", can_sign=False, gateway=gw)
    led.fund(dev, 10)
    led.run()
    led.register(dev, Role.DEVICE)
    led.run()
    forged = led.issue(Account(dev.peer, None, gateway=rogue), transfer(dev.peer, rogue.peer, 10))
    self_relay = led.issue(gw, unsigned_transaction(
        Channel.PAYMENT, gw.peer, encode_delegated(gw.peer, transfer(gw.peer, dev.peer, 1).payload)))
    led.run()
    s = led.state()
    assert balance_of(s, dev.peer) == 10  # fee is 0 here
    assert {forged.tx_id, self_relay.tx_id} <= s.rejected_ids()


# -- whole-chain properties ---------------------------------------------------


def _every_prefix_state(chain):
    state = ServiceState()
    for block in chain[1:]:
        state = apply_blocks(state, [block])
        yield block, state


@pytest.mark.parametrize("seed", range(30))
def test_conservation_and_ban_monotonicity_each_block(seed):
    chain = random_service_chain(random.Random(seed))
    banned = set()
    for block, state in _every_prefix_state(chain):
        assert state.conserved(), block.height
        assert banned <= state.banned_peers()
        banned = state.banned_peers()
        for rep in state.reputations.values():
            for r in rep.ratings:
                assert 1 <= r.score <= 5
                assert any(e.tx_id == r.tx_ref and r.rater in e.parties and rep.subject in e.parties
                           for e in state.records)
        assert all(b >= 0 for b in state.balances.values())


@pytest.mark.parametrize("seed", range(20))
def test_replay_purity_and_oracle(seed):
    rng = random.Random(1000 + seed)
    chain = random_service_chain(rng, n_txs=100)
    full = replay(chain)
    assert normalize(full) == normalize(replay(chain))
    cut = rng.randint(1, len(chain))
    resumed = apply_blocks(replay(chain[:cut]), chain[cut:])
    assert normalize(resumed) == normalize(full)
    assert normalize(full) == oracle_state(dump_chain(chain))


def test_external_config_locks_chain_config():
    chain = random_service_chain(random.Random(3))
    forced = ServiceConfig(fee=0, authority=None)
    s = replay(chain, forced)
    assert s.config == forced
    assert s.rejections[0].reason.startswith("ConfigLocked")


def test_report_is_sorted_and_stable():
    chain = random_service_chain(random.Random(9))
    s = replay(chain)
    text = format_report(s)
    assert text == format_report(replay(chain))
    names = {p: p.short() for p in s.balances}
    assert format_report(s, names) == format_report(replay(chain), names)
