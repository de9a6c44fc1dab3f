"""Command-line front end.

Exit status: 0 on success, 1 for user errors (bad arguments, files or
scenarios), 2 when an internal invariant is violated.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from . import escrow as escrow_ops
from .client import Account, DelegationError, FileLedger
from .ledger import (
    Channel,
    ChainFormatError,
    LedgerError,
    PeerId,
    generate_identity_keys,
    load_chain_file,
    save_chain_file,
)
from .marketplace import Query, derive_product_id, discover, format_listing, post_product, retire_product
from .payloads import Delivery, PayloadError, decode_payload
from .services import InvalidChain, audit_trail, format_report, mint, register_identity, replay, submit_rating
from .sim.engine import InvariantViolation, run_scenario_net
from .sim.scenario import DELIVERY_NAMES, ROLE_NAMES, ScenarioError, load_scenario
from .trade import PurchaseError

log = logging.getLogger("p2piot")

CLI_NAMESPACE = b"p2piot-cli"


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which we reserve for invariants
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def _scenario_path(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = resources.files("p2piot") / "scenarios" / (name if name.endswith(".scn") else name + ".scn")
    if bundled.is_file():
        return Path(str(bundled))
    raise UserError(f"no such scenario: {name}")


def _account(args) -> Account:
    if getattr(args, "key", None):
        try:
            seed = bytes.fromhex(args.key)
        except ValueError:
            raise UserError("--key must be hex") from None
        if len(seed) != 32:
            raise UserError("--key must be 32 bytes of hex")
        return Account.from_seed(seed, args.name or "")
    if getattr(args, "name", None):
        return Account.derive(args.name, CLI_NAMESPACE)
    raise UserError("identify yourself with --as NAME or --key HEX")


def _peer(text: str) -> PeerId:
    """A peer given as 64 hex digits, or as a development name."""
    try:
        raw = bytes.fromhex(text)
    except ValueError:
        raw = b""
    if len(raw) == 32:
        return PeerId(raw)
    return Account.derive(text, CLI_NAMESPACE).peer


def _ledger(args) -> FileLedger:
    ledger = FileLedger(args.ledger)
    if not ledger.exists() and args.command != "ledger":
        raise UserError(f"no ledger at {args.ledger}; run 'ledger init' first")
    return ledger


def _load(path: str):
    try:
        chain = load_chain_file(path)
    except FileNotFoundError:
        raise UserError(f"no such file: {path}") from None
    return chain


def _names(chain) -> dict[PeerId, str]:
    names: dict[PeerId, str] = {}
    for block in chain:
        for tx in block.tx_list:
            if tx.sender.display_name:
                names.setdefault(tx.sender, tx.sender.display_name)
    return names


def _section(report: str, header: str) -> list[str]:
    lines = report.splitlines()
    start = lines.index(header)
    out = [header]
    for line in lines[start + 1:]:
        if line.startswith("["):
            break
        out.append(line)
    return out


def _out(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")
    sys.stdout.flush()


# --------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    sc = load_scenario(_scenario_path(args.scenario))
    if args.seed is not None:
        sc = sc.with_seed(args.seed)
    metrics, net = run_scenario_net(sc)
    report = metrics.report()
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    if args.dump:
        save_chain_file(args.dump, net.client.chain)
    _out(report)
    return 0


def cmd_inspect(args) -> int:
    chain = _load(args.dump)
    state = replay(chain)
    names = _names(chain)
    if args.what == "chain":
        for block in chain:
            quorum = ",".join(names.get(p, p.short()) for p in block.committer_quorum) or "-"
            _out(f"block {block.height} hash={block.block_hash.hex()} prev={block.prev_hash.hex()[:16]} "
                 f"txs={len(block.tx_list)} quorum={quorum}")
            for tx in block.tx_list:
                try:
                    origin, body = decode_payload(tx.channel, tx.payload)
                    summary = type(body).__name__
                except PayloadError:
                    origin, summary = None, "malformed"
                via = f" for={names.get(origin, origin.short())}" if origin else ""
                _out(f"  {tx.tx_id.hex()[:16]} {Channel(tx.channel).name.lower()} "
                     f"sender={names.get(tx.sender, tx.sender.short())}{via} nonce={tx.nonce} {summary}")
        return 0
    report = format_report(state, names)
    if args.what == "wallets":
        head = report.splitlines()[:7]
        _out("\n".join(head + _section(report, "[wallets]")))
    elif args.what == "reputation":
        _out("\n".join(_section(report, "[reputations]")))
    else:
        contracts = sorted(state.escrows.values(), key=lambda c: c.escrow_id)
        if args.id:
            contracts = [c for c in contracts if c.escrow_id.hex().startswith(args.id.lower())]
            if not contracts:
                raise UserError(f"no escrow matching {args.id}")
        for c in contracts:
            _out(f"escrow {c.escrow_id.hex()} state={c.state.value} price={c.price} deposit={c.deposit} "
                 f"deadline={c.deadline} held={c.held} seller={names.get(c.seller, c.seller.hex())} "
                 f"buyer={names.get(c.buyer, c.buyer.hex())}")
            for entry in audit_trail(state, c.escrow_id):
                _out(f"  height={entry.height} {entry.kind.name.lower()} tx={entry.tx_id.hex()[:16]}")
    return 0


def cmd_keys(args) -> int:
    seed = bytes.fromhex(args.seed) if args.seed else os.urandom(32)
    if len(seed) != 32:
        raise UserError("--seed must be 32 bytes of hex")
    peer, _ = generate_identity_keys(seed, args.name or "")
    _out(f"seed {seed.hex()}\npublic_key {peer.hex()}")
    return 0


def cmd_ledger(args) -> int:
    ledger = _ledger(args)
    if args.action == "init":
        if ledger.exists():
            raise UserError(f"{args.ledger} already exists")
        ledger.init(args.fee, args.currency)
        _out(f"initialised {args.ledger} fee={args.fee} currency={args.currency}")
    elif args.action == "fund":
        to = _peer(args.to)
        tx = ledger.submit(ledger.authority, mint(ledger.authority.peer, to, args.amount))
        _out(f"minted {args.amount} to {to.hex()} tx={tx.tx_id.hex()}")
    else:
        account = _account(args)
        tx = ledger.submit(account, register_identity(account.peer, ROLE_NAMES[args.role], args.metadata))
        _report_tx(ledger, tx, f"registered {account.peer.hex()} as {args.role}")
    return 0


def _report_tx(ledger: FileLedger, tx, message: str) -> None:
    rejection = next((r for r in ledger.state().rejections if r.tx_id == tx.tx_id), None)
    if rejection is not None:
        raise UserError(f"transaction {tx.tx_id.hex()[:16]} rejected: {rejection.reason}")
    _out(f"{message} tx={tx.tx_id.hex()}")


def cmd_market(args) -> int:
    from .sdpp.tcp import buy, parse_address

    ledger = _ledger(args)
    if args.action == "find":
        q = Query(args.topic, args.max_price, args.min_reputation,
                  DELIVERY_NAMES[args.delivery] if args.delivery else None)
        sys.stdout.write(format_listing(discover(ledger.state(), q)))
        return 0
    account = _account(args)
    if args.action == "post":
        delivery = DELIVERY_NAMES[args.delivery]
        pid = derive_product_id(account.peer, args.topic, args.salt.encode())
        tx = post_product(account.peer, args.topic, args.price, delivery=delivery, description=args.description,
                          endpoint=args.endpoint.encode(), salt=args.salt.encode())
        _report_tx(ledger, ledger.submit(account, tx), f"product {pid.hex()}")
        return 0
    pid = _product_id(args.product)
    if args.action == "retire":
        _report_tx(ledger, ledger.submit(account, retire_product(account.peer, pid)), f"retired {pid.hex()}")
        return 0
    state = ledger.state()
    product = state.products.get(pid)
    if product is None or not product.active:
        raise UserError(f"product {args.product} is not listed")
    if state.is_banned(product.seller):
        raise UserError("seller is banned")
    if product.delivery is Delivery.ESCROWED_BATCH:
        price = product.price_per_record * args.quantity
        deadline = state.height + args.window
        eid = escrow_ops.derive_escrow_id(product.seller, account.peer, price, price, deadline)
        ledger.submit(account, escrow_ops.open_escrow(product.seller, account.peer, price, price, deadline))
        _report_tx(ledger, ledger.submit(account, escrow_ops.fund(eid, account.peer)), f"escrow {eid.hex()} funded")
        return 0
    report = buy(ledger, account, args.quantity, parse_address(product.endpoint.decode()),
                 expected_seller=product.seller, expected_price=product.price_per_record,
                 tick_seconds=args.tick_ms / 1000)
    _out(report.line())
    if args.rate is not None:
        trail = audit_trail(ledger.state(), report.session_id)
        if not trail:
            raise UserError("session left no record to rate")
        tx = ledger.submit(account, submit_rating(account.peer, product.seller, args.rate, trail[-1].tx_id))
        _report_tx(ledger, tx, f"rated seller {args.rate}")
    return 0 if report.phase.value == "Closed" else 1


def _product_id(text: str) -> bytes:
    try:
        pid = bytes.fromhex(text)
    except ValueError:
        pid = b""
    if len(pid) != 32:
        raise UserError("--product must be a 64-digit hex product id")
    return pid


_ESCROW_ACTIONS = {
    "fund": lambda eid, peer, h: escrow_ops.fund(eid, peer),
    "confirm": lambda eid, peer, h: escrow_ops.confirm_delivery(eid, peer),
    "settle": lambda eid, peer, h: escrow_ops.settle(eid, peer),
    "dispute": lambda eid, peer, h: escrow_ops.dispute(eid, peer),
    "expire": lambda eid, peer, h: escrow_ops.expire(eid, h, peer),
}


def cmd_escrow(args) -> int:
    ledger = _ledger(args)
    account = _account(args)
    eid = _product_id(args.id)
    tx = _ESCROW_ACTIONS[args.action](eid, account.peer, ledger.state().height + 1)
    _report_tx(ledger, ledger.submit(account, tx), f"escrow {args.action}")
    return 0


def cmd_sdpp(args) -> int:
    from .sdpp.tcp import buy, parse_address, serve

    ledger = _ledger(args)
    account = _account(args)
    if args.action == "serve":
        def announce(addr) -> None:
            _out(f"listening {addr[0]}:{addr[1]}")

        reports = serve(ledger, account, args.price, args.k, parse_address(args.listen), sessions=args.sessions,
                        max_outstanding=args.max_outstanding, tick_seconds=args.tick_ms / 1000,
                        on_listen=announce)
        for r in reports:
            _out(r.line())
        return 0 if all(r.phase.value == "Closed" for r in reports) else 1
    report = buy(ledger, account, args.records, parse_address(args.connect), expected_price=args.price,
                 tick_seconds=args.tick_ms / 1000)
    _out(report.line())
    return 0 if report.phase.value == "Closed" else 1


# --------------------------------------------------------------------------
# parser


def _identity(p: argparse.ArgumentParser) -> None:
    p.add_argument("--as", dest="name", help="development identity derived from a name")
    p.add_argument("--key", help="32-byte hex seed from 'keys new'")


def _ledger_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ledger", required=True, help="chain file shared by all participants")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="p2piot", description="Peer-to-peer IoT ledger, marketplace and simulator.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("run", help="run a scenario and print its metrics")
    p.add_argument("scenario", help="scenario file or bundled scenario name")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="write the metrics report here")
    p.add_argument("--dump", help="write the committed chain here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("inspect", help="read a chain dump")
    p.add_argument("what", choices=["chain", "wallets", "reputation", "escrow"])
    p.add_argument("dump")
    p.add_argument("id", nargs="?", help="escrow id prefix")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("keys", help="key management")
    p.add_argument("action", choices=["new"])
    p.add_argument("--seed", help="derive from this 32-byte hex seed instead of fresh entropy")
    p.add_argument("--name", default="")
    p.set_defaults(func=cmd_keys)

    p = sub.add_parser("ledger", help="manage a file-backed single-authority ledger")
    p.add_argument("action", choices=["init", "fund", "register"])
    _ledger_arg(p)
    _identity(p)
    p.add_argument("--fee", type=int, default=0)
    p.add_argument("--currency", default="TOK")
    p.add_argument("--to", help="recipient for 'fund' (name or hex key)")
    p.add_argument("--amount", type=int, default=0)
    p.add_argument("--role", choices=sorted(ROLE_NAMES), default="buyer")
    p.add_argument("--metadata", default="")
    p.set_defaults(func=cmd_ledger)

    p = sub.add_parser("market", help="post, retire, find and buy data products")
    p.add_argument("action", choices=["post", "retire", "find", "buy"])
    _ledger_arg(p)
    _identity(p)
    p.add_argument("--topic")
    p.add_argument("--price", type=int)
    p.add_argument("--delivery", choices=sorted(DELIVERY_NAMES))
    p.add_argument("--description", default="")
    p.add_argument("--endpoint", default="")
    p.add_argument("--salt", default="")
    p.add_argument("--product")
    p.add_argument("--quantity", type=int, default=1)
    p.add_argument("--max-price", type=int)
    p.add_argument("--min-reputation", type=float)
    p.add_argument("--rate", type=int, choices=range(1, 6))
    p.add_argument("--window", type=int, default=10, help="escrow deadline in blocks from now")
    p.add_argument("--tick-ms", type=int, default=50)
    p.set_defaults(func=cmd_market)

    p = sub.add_parser("escrow", help="act on an escrow contract")
    p.add_argument("action", choices=sorted(_ESCROW_ACTIONS))
    _ledger_arg(p)
    _identity(p)
    p.add_argument("--id", required=True)
    p.set_defaults(func=cmd_escrow)

    p = sub.add_parser("sdpp", help="stream records over TCP")
    p.add_argument("action", choices=["serve", "buy"])
    _ledger_arg(p)
    _identity(p)
    p.add_argument("--price", type=int)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--sessions", type=int, default=1)
    p.add_argument("--max-outstanding", type=int, default=1)
    p.add_argument("--records", type=int, default=0)
    p.add_argument("--connect")
    p.add_argument("--tick-ms", type=int, default=50)
    p.set_defaults(func=cmd_sdpp)
    return parser


def _check_required(args) -> None:
    need = {
        ("market", "post"): ("topic", "price"),
        ("market", "retire"): ("product",),
        ("market", "buy"): ("product",),
        ("ledger", "fund"): ("to",),
        ("sdpp", "serve"): ("price",),
        ("sdpp", "buy"): ("connect",),
    }.get((args.command, getattr(args, "action", None)), ())
    missing = [f"--{n.replace('_', '-')}" for n in need if getattr(args, n, None) is None]
    if missing:
        raise UserError(f"{args.command} {args.action} needs {', '.join(missing)}")
    if args.command == "market" and args.action == "post" and args.delivery is None:
        args.delivery = "sdpp"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        _check_required(args)
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 2
    except (UserError, ScenarioError, ChainFormatError, InvalidChain, LedgerError, PurchaseError,
            DelegationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
