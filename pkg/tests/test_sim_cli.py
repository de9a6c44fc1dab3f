import random
import subprocess
import sys
from pathlib import Path

import pytest

from p2piot import cli
from p2piot.ledger import load_chain_file
from p2piot.payloads import decode_payload
from p2piot.services import replay
from p2piot.sim.engine import InvariantViolation, run_scenario, run_scenario_net
from p2piot.sim.scenario import (
    DeviceClass,
    Fault,
    FaultKind,
    ScenarioInvalid,
    ScenarioParseError,
    inject_fault,
    load_scenario,
    parse_scenario,
)

BUNDLED = Path(cli.__file__).parent / "scenarios" / "honest_trade.scn"


def _scn(ledger="", peers="", products="", script="", faults=""):
    parts = ["ledger:\n  seed 5\n" + ledger]
    for name, body in (("peers", peers), ("products", products), ("script", script), ("faults", faults)):
        if body:
            parts.append(f"{name}:\n{body}")
    return parse_scenario("\n".join(parts))


TRADE = dict(
    peers="  peer seller class=2 role=seller balance=10\n  peer buyer class=2 balance=100\n",
    products="  product air seller=seller topic=air price=2\n",
    script="  buy buyer air records=25 rate=5\n",
)


# -- scenarios --------------------------------------------------------------


def test_device_classes():
    caps = {c: (c.can_sign, c.can_reach_internet) for c in DeviceClass}
    assert caps == {DeviceClass.CLASS0: (False, False), DeviceClass.CLASS1: (False, True),
                    DeviceClass.CLASS2: (True, True)}


def test_bundled_scenario_numbers():
    m = run_scenario(load_scenario(BUNDLED))
    (s,) = m.sessions
    assert (s.delivered, s.paid) == (25, 50)
    assert "invoices=3" in s.detail and m.conserved and m.failed_rounds == 0
    assert dict(m.balances) == {"buyer": 100 - 1 - 50 - 3 - 1, "seller": 20 - 1 - 1 + 50 - 8 - 1}


def test_same_scenario_twice_identical():
    sc = load_scenario(BUNDLED)
    (m1, n1), (m2, n2) = run_scenario_net(sc), run_scenario_net(sc)
    assert m1.report() == m2.report()
    assert [b.encode() for b in n1.client.chain] == [b.encode() for b in n2.client.chain]


def test_seed_changes_keys_not_numbers():
    sc = load_scenario(BUNDLED)
    (m1, n1), (m2, n2) = run_scenario_net(sc), run_scenario_net(sc.with_seed(8))
    assert n1.client.chain[-1].block_hash != n2.client.chain[-1].block_hash
    assert m1.balances == m2.balances


def test_empty_roster_all_zero():
    m, net = run_scenario_net(parse_scenario("ledger:\n  seed 1\n"))
    assert (m.committed_tx_count, m.blocks, m.failed_rounds, m.ticks, m.minted) == (0, 0, 0, 0, 0)
    assert m.balances == () and m.sessions == () and m.bans == ()
    assert len(net.client.chain) == 1 and net.client.chain[0].height == 0


@pytest.mark.parametrize("text, line, field", [
    ("ledger:\n  seed x\n", 2, "seed"),
    ("peers:\n  peer a class=7\n", 2, "class"),
    ("peers:\n  peer a role=wizard\n", 2, "role"),
    ("products:\n  product p seller=a topic=t\n", 2, "price"),
    ("script:\n  dance a\n", 2, "dance"),
    ("faults:\n  fault target=a kind=Melt\n", 2, "kind"),
    ("ledger:\n  mode quorum n=4\n", 2, "mode"),
    ("peers:\n  peer a bogus=1\n", 2, "bogus"),
])
def test_parse_errors_locate_field(text, line, field):
    with pytest.raises(ScenarioParseError) as info:
        parse_scenario(text)
    assert info.value.line == line and info.value.field == field


def test_unknown_section_and_stray_line():
    with pytest.raises(ScenarioParseError):
        parse_scenario("widgets:\n")
    with pytest.raises(ScenarioParseError):
        parse_scenario("seed 4\n")


@pytest.mark.parametrize("peers, who", [
    ("  peer sensor class=0\n", "sensor"),
    ("  peer sensor class=1 gateway=ghost\n", "sensor"),
    ("  peer hub class=2\n  peer relay class=1 gateway=hub\n  peer sensor class=0 gateway=relay\n", "sensor"),
])
def test_unsigned_device_needs_signing_gateway(peers, who):
    with pytest.raises(ScenarioInvalid, match=who):
        parse_scenario(f"peers:\n{peers}")


def test_invalid_references():
    with pytest.raises(ScenarioInvalid):
        _scn(peers="  peer a\n", products="  product p seller=zed topic=t price=1\n")
    with pytest.raises(ScenarioInvalid):
        _scn(peers="  peer a\n", script="  buy a nothing\n")
    with pytest.raises(ScenarioInvalid):
        inject_fault(_scn(**TRADE), Fault(0, "nobody", FaultKind.STOP_PAYING))
    with pytest.raises(ScenarioInvalid):
        inject_fault(_scn(**TRADE), Fault(0, "buyer", FaultKind.VOTE_REFUSE))


# -- faults -----------------------------------------------------------------


def _quorum(**kw):
    return _scn(ledger="  mode quorum n=4 f=1\n  tick_limit 600\n", **{**TRADE, **kw})


@pytest.mark.parametrize("node", ["node0", "node1", "node2", "node3"])
@pytest.mark.parametrize("kind", [FaultKind.VOTE_REFUSE, FaultKind.EQUIVOCATE])
def test_single_faulty_validator_contained(node, kind):
    m = run_scenario(inject_fault(_quorum(), Fault(0, node, kind)))
    assert m.chains_agree and m.conserved
    assert m.sessions[0].delivered == 25 and m.sessions[0].paid == 50
    if kind is FaultKind.VOTE_REFUSE:
        assert m.failed_rounds == 0


def test_two_refusing_validators_commit_nothing():
    sc = inject_fault(inject_fault(_quorum(), Fault(0, "node1", FaultKind.VOTE_REFUSE)),
                      Fault(0, "node2", FaultKind.VOTE_REFUSE))
    m = run_scenario(sc)
    assert m.committed_tx_count == 0 and m.blocks == 0 and m.failed_rounds > 0


def test_byzantine_behaviour_on_a_validator():
    sc = _scn(ledger="  mode quorum n=4 f=1\n", peers=TRADE["peers"] + "  peer node2 behavior=byzantine-node\n",
              products=TRADE["products"], script=TRADE["script"])
    m = run_scenario(sc)
    assert m.failed_rounds == 0 and m.sessions[0].paid == 50 and m.chains_agree


def test_stop_paying_bounded_exposure():
    for tick in (0, 20, 30, 45):
        m = run_scenario(inject_fault(_scn(**TRADE), Fault(tick, "buyer", FaultKind.STOP_PAYING)))
        s = m.sessions[0]
        assert (s.delivered - s.paid // 2) * 2 <= 1 * 10 * 2
        assert m.conserved


def test_withhold_and_drop_transport():
    m = run_scenario(inject_fault(_scn(**TRADE), Fault(20, "seller", FaultKind.WITHHOLD_DELIVERY)))
    s = m.sessions[0]
    assert s.delivered < 25 and s.paid <= 2 * s.delivered
    m = run_scenario(inject_fault(_scn(**TRADE), Fault(15, "buyer", FaultKind.DROP_TRANSPORT)))
    s = m.sessions[0]
    assert s.delivered < 25 and m.conserved


def test_cheating_buyer_escrow_expires():
    sc = _scn(peers="  peer seller class=2 role=seller balance=50\n  peer buyer class=2 balance=100 "
                    "behavior=cheating-buyer\n",
              products="  product box seller=seller topic=t price=3 delivery=escrow\n",
              script="  buy buyer box records=4\n")
    m = run_scenario(sc)
    assert "escrow=Expired" in m.sessions[0].detail and m.escrow_held == 0


def test_low_quality_seller_banned_by_auto_rating():
    buyers = "".join(f"  peer b{i} class=2 balance=50\n" for i in range(5))
    script = "".join(f"  buy b{i % 5} feed records=2 rate=auto\n" for i in range(6))
    sc = _scn(peers="  peer junk class=2 role=seller balance=20 behavior=low-quality-seller\n" + buyers,
              products="  product feed seller=junk topic=t price=1\n", script=script)
    m = run_scenario(sc)
    assert m.bans == ("junk",) and len(m.sessions) == 5 and len(m.refused) == 1


# -- delegation -------------------------------------------------------------


def delegation_scenario(rng: random.Random, trades: int = 10):
    """Three Class0 sensors sell through one gateway; returns (scenario, expected credits)."""
    prices = {f"s{i}": rng.randint(1, 4) for i in range(3)}
    peers = "  peer gw class=2 role=gateway balance=5\n"
    peers += "".join(f"  peer {s} class=0 role=seller gateway=gw\n" for s in prices)
    peers += "  peer b0 class=2 balance=500\n  peer b1 class=1 gateway=gw balance=500\n"
    products = "".join(f"  product p{s} seller={s} topic=air price={p}\n" for s, p in prices.items())
    script, expected = "", {s: 0 for s in prices}
    for _ in range(trades):
        seller = rng.choice(list(prices))
        n = rng.randint(1, 15)
        script += f"  buy {rng.choice(['b0', 'b1'])} p{seller} records={n}\n"
        expected[seller] += n * prices[seller]  # tagged when the intent is written
    sc = _scn(ledger="  fee 0\n", peers=peers, products=products, script=script)
    return sc, expected


@pytest.mark.parametrize("seed", range(3))
def test_delegated_sales_credit_the_sensor(seed):
    sc, expected = delegation_scenario(random.Random(seed))
    m, net = run_scenario_net(sc)
    balances = dict(m.balances)
    assert {s: balances[s] for s in expected} == expected
    assert balances["gw"] == 5
    assert balances["b0"] + balances["b1"] == 1000 - sum(expected.values())
    assert not m.refused


def test_delegated_records_show_gateway_as_signer():
    sc, _ = delegation_scenario(random.Random(9), trades=3)
    _, net = run_scenario_net(sc)
    gw = net.accounts["gw"].peer
    sensors = {net.accounts[f"s{i}"].peer for i in range(3)}
    seen = 0
    for block in net.client.chain:
        for tx in block.tx_list:
            origin, _ = decode_payload(tx.channel, tx.payload)
            if origin in sensors:
                assert tx.sender == gw
                seen += 1
            assert tx.sender.public_key not in net.unsigned_keys
    assert seen > 0


def test_class_fidelity_violation_detected():
    _, net = run_scenario_net(load_scenario(BUNDLED))
    net.unsigned_keys = {net.accounts["buyer"].peer.public_key}
    with pytest.raises(InvariantViolation):
        net.metrics()


# -- CLI --------------------------------------------------------------------


def test_cli_run_twice_identical(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert cli.main(["run", str(BUNDLED), "--seed", "7", "--out", str(a)]) == 0
    assert cli.main(["run", "honest_trade", "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert "paid=50" in capsys.readouterr().out


def test_cli_usage_errors(capsys):
    assert cli.main([]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["run", "no-such-scenario"]) == 1
    assert cli.main(["inspect", "wallets", "/nonexistent/chain"]) == 1


def test_cli_invalid_scenario_names_peer(tmp_path, capsys):
    bad = tmp_path / "bad.scn"
    bad.write_text("peers:\n  peer thermometer class=0\n")
    assert cli.main(["run", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "thermometer" in err


def test_cli_invariant_exit_code(monkeypatch, capsys):
    def broken(sc):
        raise InvariantViolation("conservation broken at height 3")
    monkeypatch.setattr(cli, "run_scenario_net", broken)
    assert cli.main(["run", str(BUNDLED)]) == 2


def test_cli_inspect_after_run(tmp_path, capsys):
    dump = tmp_path / "chain.p2lk"
    assert cli.main(["run", str(BUNDLED), "--dump", str(dump)]) == 0
    capsys.readouterr()
    chain = load_chain_file(dump)
    assert replay(chain).conserved()
    for what in ("chain", "wallets", "reputation", "escrow"):
        assert cli.main(["inspect", what, str(dump)]) == 0
    out = capsys.readouterr().out
    wallets = {line.split()[1]: int(line.split()[2]) for line in out.splitlines()
               if len(line.split()) == 3 and len(line.split()[0]) == 64}
    assert wallets["buyer"] == 100 - 50 - 5 and wallets["seller"] == 20 + 50 - 11


def test_cli_keys(capsys):
    assert cli.main(["keys", "new", "--seed", "00" * 32]) == 0
    out = capsys.readouterr().out
    # public key of the all-zero seed
    assert "public_key 3b6a27bcceb6a42d62a3a8d02a6f0d73653215771de243a63ac048a18b59da29" in out
    assert cli.main(["keys", "new", "--seed", "abcd"]) == 1


def test_cli_market_flow(tmp_path, capsys):
    led = str(tmp_path / "m.p2lk")
    run = lambda *a: cli.main(list(a))
    assert run("ledger", "init", "--ledger", led) == 0
    assert run("ledger", "fund", "--ledger", led, "--to", "shop", "--amount", "5") == 0
    assert run("ledger", "register", "--ledger", led, "--as", "shop", "--role", "seller") == 0
    assert run("market", "post", "--ledger", led, "--as", "shop", "--topic", "air", "--price", "3") == 0
    capsys.readouterr()
    assert run("market", "find", "--ledger", led, "--topic", "air") == 0
    table = capsys.readouterr().out.splitlines()
    assert len(table) == 2 and table[1].split("\t")[2:5] == ["air", "3", "sdpp_stream"]
    pid = table[1].split("\t")[0]
    assert run("market", "retire", "--ledger", led, "--as", "mallory", "--product", pid) == 1
    assert run("market", "retire", "--ledger", led, "--as", "shop", "--product", pid) == 0
    capsys.readouterr()
    run("market", "find", "--ledger", led)
    assert len(capsys.readouterr().out.splitlines()) == 1
    assert run("market", "post", "--ledger", led, "--as", "shop") == 1


def _cli(*args, **kw):
    return subprocess.run([sys.executable, "-m", "p2piot", *args], capture_output=True, text=True, timeout=60, **kw)


def tcp_session(tmp_path, records=25, price=2, k=10):
    """Seller and buyer as two CLI processes on loopback; returns (seller out, buyer out, exit codes, ledger)."""
    led = str(tmp_path / "tcp.p2lk")
    for args in (["ledger", "init", "--ledger", led, "--fee", "0"],
                 ["ledger", "fund", "--ledger", led, "--to", "seller", "--amount", "20"],
                 ["ledger", "fund", "--ledger", led, "--to", "buyer", "--amount", "100"],
                 ["ledger", "register", "--ledger", led, "--as", "seller", "--role", "seller"],
                 ["ledger", "register", "--ledger", led, "--as", "buyer"]):
        assert _cli(*args).returncode == 0
    server = subprocess.Popen(
        [sys.executable, "-m", "p2piot", "sdpp", "serve", "--ledger", led, "--as", "seller", "--price", str(price),
         "--k", str(k), "--listen", "127.0.0.1:0", "--tick-ms", "20"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    try:
        first = server.stdout.readline().split()
        assert first[0] == "listening", first
        buyer = _cli("sdpp", "buy", "--ledger", led, "--as", "buyer", "--records", str(records), "--connect",
                     first[1], "--price", str(price), "--tick-ms", "20")
        out, _ = server.communicate(timeout=60)
    finally:
        if server.poll() is None:
            server.kill()
    return out, buyer.stdout, (server.returncode, buyer.returncode), led


def _fields(line):
    return dict(tok.split("=", 1) for tok in line.split())


def test_tcp_serve_and_buy(tmp_path):
    seller_out, buyer_out, codes, led = tcp_session(tmp_path)
    assert codes == (0, 0)
    b = _fields(buyer_out.strip())
    s = _fields(seller_out.strip().splitlines()[-1])
    assert (b["delivered"], b["paid"], b["invoices"], b["phase"]) == ("25", "50", "3", "Closed")
    assert (s["sent"], s["paid"], s["invoices_paid"]) == ("25", "50", "3")
    state = replay(load_chain_file(led))
    assert state.conserved() and sorted(state.balances.values()) == [50, 70]
