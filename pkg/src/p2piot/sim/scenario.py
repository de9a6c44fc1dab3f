"""Scenario files: a line-oriented description of one simulated deployment.

Format (UTF-8, ``#`` starts a comment, blank lines ignored)::

    ledger:
      seed 7
      mode quorum n=4 f=1          # or: mode authority
      fee 1
      currency TOK
      cadence 5
      delay 1
      timeout 100
      max_outstanding 1
      k 10
      tick_limit 20000
    peers:
      peer alice class=2 role=seller balance=100 behavior=honest
      peer sensor class=0 role=device gateway=gw
    products:
      product weather seller=alice topic=air price=2 delivery=sdpp description="hourly PM2.5"
    script:
      buy bob weather records=25 rate=5 rate_back=4
      transfer bob alice 10
      wait 20
    faults:
      fault tick=40 target=bob kind=StopPaying

Tokens are split shell-style, so quoted values may contain spaces. Quorum
validators are named ``node0`` .. ``node{n-1}``; a ``peer`` line may reuse one
of those names to give the validator a stakeholder identity, which is how the
``byzantine-node`` behaviour is attached to a validator.
"""

from __future__ import annotations

import enum
import shlex
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..ledger import Quorum, SingleAuthority
from ..payloads import Delivery, Role

SECTIONS = ("ledger", "peers", "products", "script", "faults")


class ScenarioError(Exception):
    pass


class ScenarioParseError(ScenarioError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = f"line {line}" if line is not None else "scenario"
        if field:
            where += f", field {field!r}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.field = field


class ScenarioInvalid(ScenarioError):
    pass


class DeviceClass(enum.IntEnum):
    CLASS0 = 0
    CLASS1 = 1
    CLASS2 = 2

    @property
    def can_sign(self) -> bool:
        return self is DeviceClass.CLASS2

    @property
    def can_reach_internet(self) -> bool:
        return self is not DeviceClass.CLASS0


class Behavior(enum.Enum):
    HONEST = "honest"
    CHEATING_BUYER = "cheating-buyer"
    WITHHOLDING_SELLER = "withholding-seller"
    BYZANTINE_NODE = "byzantine-node"
    LOW_QUALITY_SELLER = "low-quality-seller"


class FaultKind(enum.Enum):
    STOP_PAYING = "StopPaying"
    WITHHOLD_DELIVERY = "WithholdDelivery"
    VOTE_REFUSE = "VoteRefuse"
    EQUIVOCATE = "Equivocate"
    DROP_TRANSPORT = "DropTransport"


ROLE_NAMES = {
    "device": Role.DEVICE,
    "gateway": Role.GATEWAY,
    "edge-provider": Role.EDGE_PROVIDER,
    "cloud-provider": Role.CLOUD_PROVIDER,
    "buyer": Role.BUYER,
    "seller": Role.SELLER,
}

DELIVERY_NAMES = {"sdpp": Delivery.SDPP_STREAM, "escrow": Delivery.ESCROWED_BATCH}


@dataclass(frozen=True)
class SimPeer:
    name: str
    device: DeviceClass = DeviceClass.CLASS2
    role: Role = Role.BUYER
    gateway: str | None = None
    behavior: Behavior = Behavior.HONEST
    balance: int = 0
    metadata: str = ""


@dataclass(frozen=True)
class ProductSpec:
    name: str
    seller: str
    topic: str
    price: int
    delivery: Delivery = Delivery.SDPP_STREAM
    description: str = ""


@dataclass(frozen=True)
class Buy:
    buyer: str
    product: str
    records: int
    rate: int | None = None
    rate_back: int | None = None
    auto_rate: bool = False


@dataclass(frozen=True)
class Pay:
    sender: str
    to: str
    amount: int


@dataclass(frozen=True)
class Wait:
    ticks: int


Step = Buy | Pay | Wait


@dataclass(frozen=True)
class Fault:
    tick: int
    target: str
    kind: FaultKind


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    mode: SingleAuthority | Quorum = field(default_factory=SingleAuthority)
    fee: int = 0
    currency: str = "TOK"
    cadence: int = 5
    delay: int = 1
    timeout: int = 100
    max_outstanding: int = 1
    k: int = 10
    tick_limit: int = 20_000
    peers: tuple[SimPeer, ...] = ()
    products: tuple[ProductSpec, ...] = ()
    script: tuple[Step, ...] = ()
    faults: tuple[Fault, ...] = ()

    @property
    def validators(self) -> tuple[str, ...]:
        if isinstance(self.mode, Quorum):
            return tuple(f"node{i}" for i in range(self.mode.n))
        return ("node0",)

    def peer(self, name: str) -> SimPeer:
        for p in self.peers:
            if p.name == name:
                return p
        raise ScenarioInvalid(f"unknown peer {name!r}")

    def product(self, name: str) -> ProductSpec:
        for p in self.products:
            if p.name == name:
                return p
        raise ScenarioInvalid(f"unknown product {name!r}")

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)


# --------------------------------------------------------------------------
# parsing


class _Line:
    """One tokenised declaration with helpers that raise located errors."""

    def __init__(self, number: int, tokens: list[str]):
        self.number = number
        self.keyword = tokens[0]
        self.args: list[str] = []
        self.opts: dict[str, str] = {}
        for tok in tokens[1:]:
            if "=" in tok:
                key, _, value = tok.partition("=")
                if key in self.opts:
                    raise ScenarioParseError("duplicate key", number, key)
                self.opts[key] = value
            else:
                self.args.append(tok)
        self._used: set[str] = set()

    def fail(self, message: str, fld: str | None = None) -> ScenarioParseError:
        return ScenarioParseError(message, self.number, fld)

    def arg(self, index: int, name: str) -> str:
        if index >= len(self.args):
            raise self.fail("missing value", name)
        return self.args[index]

    def int_arg(self, index: int, name: str) -> int:
        return self._int(self.arg(index, name), name)

    def opt(self, key: str, default: str | None = None) -> str | None:
        self._used.add(key)
        return self.opts.get(key, default)

    def need(self, key: str) -> str:
        value = self.opt(key)
        if value is None:
            raise self.fail("required", key)
        return value

    def int_opt(self, key: str, default: int | None = None) -> int | None:
        value = self.opt(key)
        return default if value is None else self._int(value, key)

    def choice(self, key: str, table: dict, default=None):
        value = self.opt(key)
        if value is None:
            return default
        try:
            return table[value]
        except KeyError:
            raise self.fail(f"expected one of {', '.join(sorted(table))}", key) from None

    def done(self, max_args: int) -> None:
        extra = set(self.opts) - self._used
        if extra:
            raise self.fail("unknown key", sorted(extra)[0])
        if len(self.args) > max_args:
            raise self.fail(f"unexpected token {self.args[max_args]!r}")

    def _int(self, text: str, name: str) -> int:
        try:
            value = int(text, 0)
        except ValueError:
            raise self.fail(f"not an integer: {text!r}", name) from None
        if value < 0:
            raise self.fail("must be non-negative", name)
        return value


_LEDGER_INTS = ("seed", "fee", "cadence", "delay", "timeout", "max_outstanding", "k", "tick_limit")


def _parse_ledger(line: _Line, values: dict) -> None:
    key = line.keyword
    if key in _LEDGER_INTS:
        values[key] = line.int_arg(0, key)
        line.done(1)
    elif key == "currency":
        values["currency"] = line.arg(0, key)
        line.done(1)
    elif key == "mode":
        kind = line.arg(0, "mode")
        if kind == "authority":
            values["mode"] = SingleAuthority()
        elif kind == "quorum":
            n, f = line.int_opt("n"), line.int_opt("f")
            if n is None or f is None:
                raise line.fail("quorum needs n= and f=", "mode")
            try:
                values["mode"] = Quorum(n, f)
            except ValueError as exc:
                raise line.fail(str(exc), "mode") from None
        else:
            raise line.fail("expected authority or quorum", "mode")
        line.done(1)
    else:
        raise line.fail("unknown ledger setting", key)


def _parse_peer(line: _Line) -> SimPeer:
    if line.keyword != "peer":
        raise line.fail("expected 'peer'", line.keyword)
    name = line.arg(0, "name")
    try:
        device = DeviceClass(line.int_opt("class", 2))
    except ValueError:
        raise line.fail("expected 0, 1 or 2", "class") from None
    peer = SimPeer(
        name=name,
        device=device,
        role=line.choice("role", ROLE_NAMES, Role.BUYER),
        gateway=line.opt("gateway"),
        behavior=line.choice("behavior", {b.value: b for b in Behavior}, Behavior.HONEST),
        balance=line.int_opt("balance", 0),
        metadata=line.opt("metadata", ""),
    )
    line.done(1)
    return peer


def _parse_product(line: _Line) -> ProductSpec:
    if line.keyword != "product":
        raise line.fail("expected 'product'", line.keyword)
    spec = ProductSpec(
        name=line.arg(0, "name"),
        seller=line.need("seller"),
        topic=line.need("topic"),
        price=line.int_opt("price"),
        delivery=line.choice("delivery", DELIVERY_NAMES, Delivery.SDPP_STREAM),
        description=line.opt("description", ""),
    )
    if spec.price is None:
        raise line.fail("required", "price")
    line.done(1)
    return spec


def _score(line: _Line, key: str) -> int | None:
    value = line.int_opt(key)
    if value is not None and not 1 <= value <= 5:
        raise line.fail("score must be 1..5", key)
    return value


def _parse_step(line: _Line) -> Step:
    if line.keyword == "buy":
        auto = line.opts.get("rate") == "auto"
        if auto:
            line.opt("rate")
        step = Buy(
            buyer=line.arg(0, "buyer"),
            product=line.arg(1, "product"),
            records=line.int_opt("records", 1),
            rate=None if auto else _score(line, "rate"),
            rate_back=_score(line, "rate_back"),
            auto_rate=auto,
        )
        line.done(2)
    elif line.keyword == "transfer":
        step = Pay(line.arg(0, "from"), line.arg(1, "to"), line.int_arg(2, "amount"))
        line.done(3)
    elif line.keyword == "wait":
        step = Wait(line.int_arg(0, "ticks"))
        line.done(1)
    else:
        raise line.fail("expected buy, transfer or wait", line.keyword)
    return step


def _parse_fault(line: _Line) -> Fault:
    if line.keyword != "fault":
        raise line.fail("expected 'fault'", line.keyword)
    fault = Fault(
        tick=line.int_opt("tick", 0),
        target=line.need("target"),
        kind=line.choice("kind", {k.value: k for k in FaultKind}),
    )
    if fault.kind is None:
        raise line.fail("required", "kind")
    line.done(0)
    return fault


def parse_scenario(text: str) -> Scenario:
    section: str | None = None
    ledger: dict = {}
    peers: list[SimPeer] = []
    products: list[ProductSpec] = []
    script: list[Step] = []
    faults: list[Fault] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(raw, comments=True)
        except ValueError as exc:
            raise ScenarioParseError(str(exc), number) from None
        if not tokens:
            continue
        if len(tokens) == 1 and tokens[0].endswith(":"):
            name = tokens[0][:-1]
            if name not in SECTIONS:
                raise ScenarioParseError(f"unknown section {name!r}", number)
            section = name
            continue
        if section is None:
            raise ScenarioParseError("declaration outside a section", number)
        line = _Line(number, tokens)
        if section == "ledger":
            _parse_ledger(line, ledger)
        elif section == "peers":
            peers.append(_parse_peer(line))
        elif section == "products":
            products.append(_parse_product(line))
        elif section == "script":
            script.append(_parse_step(line))
        else:
            faults.append(_parse_fault(line))
    sc = Scenario(peers=tuple(peers), products=tuple(products), script=tuple(script),
                  faults=tuple(faults), **ledger)
    validate_scenario(sc)
    return sc


def load_scenario(path: str | Path) -> Scenario:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# validation


def validate_scenario(sc: Scenario) -> None:
    """Raise :class:`ScenarioInvalid` naming the first offending declaration."""
    names: dict[str, SimPeer] = {}
    for p in sc.peers:
        if p.name in names or p.name == "authority":
            raise ScenarioInvalid(f"peer {p.name!r} declared twice or uses a reserved name")
        names[p.name] = p
    for p in sc.peers:
        if not p.device.can_sign:
            if p.gateway is None:
                raise ScenarioInvalid(f"peer {p.name!r} is class {int(p.device)} and needs a gateway")
            gw = names.get(p.gateway)
            if gw is None:
                raise ScenarioInvalid(f"peer {p.name!r} names unknown gateway {p.gateway!r}")
            if not gw.device.can_sign:
                raise ScenarioInvalid(f"peer {p.name!r} uses gateway {p.gateway!r}, which cannot sign")
        elif p.gateway is not None and p.gateway not in names:
            raise ScenarioInvalid(f"peer {p.name!r} names unknown gateway {p.gateway!r}")
        if p.behavior is Behavior.BYZANTINE_NODE and p.name not in sc.validators:
            raise ScenarioInvalid(f"peer {p.name!r} is byzantine-node but not a validator")
    products: set[str] = set()
    for prod in sc.products:
        if prod.name in products:
            raise ScenarioInvalid(f"product {prod.name!r} declared twice")
        products.add(prod.name)
        if prod.seller not in names:
            raise ScenarioInvalid(f"product {prod.name!r} names unknown seller {prod.seller!r}")
    for step in sc.script:
        if isinstance(step, Buy):
            sc.peer(step.buyer)
            sc.product(step.product)
        elif isinstance(step, Pay):
            sc.peer(step.sender)
            sc.peer(step.to)
    for fault in sc.faults:
        _check_fault(sc, fault)


def _check_fault(sc: Scenario, fault: Fault) -> None:
    node_fault = fault.kind in (FaultKind.VOTE_REFUSE, FaultKind.EQUIVOCATE)
    if node_fault:
        if fault.target not in sc.validators:
            raise ScenarioInvalid(f"fault target {fault.target!r} is not a validator")
    elif fault.target not in {p.name for p in sc.peers}:
        raise ScenarioInvalid(f"fault target {fault.target!r} is not a peer")


def inject_fault(sc: Scenario, fault: Fault) -> Scenario:
    _check_fault(sc, fault)
    return replace(sc, faults=sc.faults + (fault,))
