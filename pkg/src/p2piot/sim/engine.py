"""Deterministic scenario runner.

Everything advances on the ledger client's logical clock: transport delays,
session timeouts, consensus rounds every ``cadence`` ticks, and the fault
schedule. Keys and record contents derive from the scenario seed, so equal
``(scenario, seed)`` inputs give byte-identical chains and reports.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from ..client import Account, DelegationError, LedgerClient
from ..escrow import BuyerStrategy, SellerStrategy
from ..ledger import Block, LedgerNode, NodeBehavior, PeerId, Quorum, dump_chain, sha256
from ..marketplace import derive_product_id, post_product
from ..sdpp.host import SdppLink, SessionReport
from ..services import register_identity, transfer
from ..state import ServiceState
from ..trade import Market, PurchaseError, TradeTerms
from .scenario import Behavior, Buy, Fault, FaultKind, Pay, Scenario, Wait

log = logging.getLogger(__name__)


class InvariantViolation(Exception):
    pass


@dataclass(frozen=True)
class SessionMetrics:
    index: int
    buyer: str
    seller: str
    product: str
    delivery: str
    delivered: int
    paid: int
    detail: str


@dataclass(frozen=True)
class Metrics:
    seed: int
    mode: str
    ticks: int
    blocks: int
    committed_tx_count: int
    rejected_tx_count: int
    failed_rounds: int
    chains_agree: bool
    conserved: bool
    minted: int
    fee_sink: int
    escrow_held: int
    burned: int
    balances: tuple[tuple[str, int], ...] = ()
    sessions: tuple[SessionMetrics, ...] = ()
    bans: tuple[str, ...] = ()
    refused: tuple[str, ...] = ()

    @property
    def bans_issued(self) -> int:
        return len(self.bans)

    def session(self, index: int) -> SessionMetrics:
        return self.sessions[index]

    def report(self) -> str:
        lines = [
            f"seed {self.seed}",
            f"mode {self.mode}",
            f"ticks {self.ticks}",
            f"blocks {self.blocks}",
            f"committed_tx_count {self.committed_tx_count}",
            f"rejected_tx_count {self.rejected_tx_count}",
            f"failed_rounds {self.failed_rounds}",
            f"chains_agree {str(self.chains_agree).lower()}",
            f"conserved {str(self.conserved).lower()}",
            f"minted {self.minted}",
            f"fee_sink {self.fee_sink}",
            f"escrow_held {self.escrow_held}",
            f"burned {self.burned}",
            "[balances]",
        ]
        lines += [f"{name} {bal}" for name, bal in self.balances]
        lines.append("[sessions]")
        for s in self.sessions:
            lines.append(f"{s.index} buyer={s.buyer} seller={s.seller} product={s.product} delivery={s.delivery} "
                         f"delivered={s.delivered} paid={s.paid} {s.detail}")
        lines.append("[bans]")
        lines += list(self.bans)
        lines.append("[refused]")
        lines += list(self.refused)
        return "\n".join(lines) + "\n"


class _Timer:
    """A driver that is done once the clock reaches ``until``."""

    def __init__(self, until: int) -> None:
        self.until = until
        self.now = 0

    @property
    def done(self) -> bool:
        return self.now >= self.until

    def step(self, now: int) -> None:
        self.now = now


@dataclass
class _Faults:
    stop_paying: dict[str, int] = field(default_factory=dict)
    withhold: dict[str, int] = field(default_factory=dict)
    drop: dict[str, int] = field(default_factory=dict)
    nodes: list[Fault] = field(default_factory=list)


class SimNet:
    """A scenario instantiated as accounts, validator nodes and a ledger client."""

    def __init__(self, sc: Scenario) -> None:
        self.sc = sc
        ns = sc.seed.to_bytes(8, "big")
        self.namespace = ns
        self.authority = Account.derive("authority", ns)
        self.accounts: dict[str, Account] = {}
        for p in sc.peers:
            if p.device.can_sign:
                self.accounts[p.name] = Account.derive(p.name, ns)
        for p in sc.peers:
            if not p.device.can_sign:
                gw = self.accounts[p.gateway]
                self.accounts[p.name] = Account.derive(p.name, ns, can_sign=False, gateway=gw)
        self.names: dict[PeerId, str] = {a.peer: n for n, a in self.accounts.items()}
        self.names[self.authority.peer] = "authority"
        self.unsigned_keys = {a.peer.public_key for a in self.accounts.values() if not a.can_sign}

        if isinstance(sc.mode, Quorum):
            node_ids = [Account.derive(name, ns).peer for name in sc.validators]
        else:
            node_ids = [self.authority.peer]
        self.nodes = [LedgerNode(pid, sc.mode, sc.fee, sc.currency) for pid in node_ids]
        for p in sc.peers:
            if p.behavior is Behavior.BYZANTINE_NODE:
                self.nodes[sc.validators.index(p.name)].behavior = NodeBehavior.VOTE_REFUSE

        self.faults = _Faults()
        for f in sorted(sc.faults, key=lambda f: (f.tick, f.target, f.kind.value)):
            if f.kind is FaultKind.STOP_PAYING:
                self.faults.stop_paying.setdefault(f.target, f.tick)
            elif f.kind is FaultKind.WITHHOLD_DELIVERY:
                self.faults.withhold.setdefault(f.target, f.tick)
            elif f.kind is FaultKind.DROP_TRANSPORT:
                self.faults.drop.setdefault(f.target, f.tick)
            else:
                self.faults.nodes.append(f)

        busy = bool(sc.peers or sc.script)
        self.client = LedgerClient(self.nodes, self.authority, cadence=sc.cadence, bootstrap=busy)
        self.client.on_block.append(self._check_block)
        self.client.on_tick.append(self._apply_faults)
        self.market = Market(self.client, {a.peer: a for a in self.accounts.values()})
        self.link: SdppLink | None = None
        self.sessions: list[SessionMetrics] = []
        self.refused: list[str] = []

    # -- hooks ---------------------------------------------------------------

    def _check_block(self, block: Block, state: ServiceState) -> None:
        if not state.conserved():
            raise InvariantViolation(f"conservation broken at height {block.height}")
        for tx in block.tx_list:
            if tx.sender.public_key in self.unsigned_keys:
                raise InvariantViolation(f"height {block.height}: tx signed by non-signing peer "
                                         f"{self.names.get(tx.sender, tx.sender.short())}")

    def _apply_faults(self, now: int) -> None:
        for f in self.faults.nodes:
            if now >= f.tick:
                node = self.nodes[self.sc.validators.index(f.target)]
                node.behavior = NodeBehavior.VOTE_REFUSE if f.kind is FaultKind.VOTE_REFUSE else NodeBehavior.EQUIVOCATE
        link = self.link
        if link is not None and not link.to_buyer.dropping:
            parties = (self.names.get(link.seller.account.peer), self.names.get(link.buyer.account.peer))
            if any(p in self.faults.drop and now >= self.faults.drop[p] for p in parties):
                link.drop_transport()

    # -- running -------------------------------------------------------------

    @property
    def remaining(self) -> int:
        return max(self.sc.tick_limit - self.client.now, 0)

    def settle(self, extra_ticks: int = 0) -> None:
        drivers = [_Timer(self.client.now + extra_ticks)] if extra_ticks else []
        self.client.run(drivers, tick_limit=self.remaining)

    def setup(self) -> None:
        for p in self.sc.peers:
            if p.balance:
                self.client.fund(self.accounts[p.name], p.balance)
        self.settle()
        for p in self.sc.peers:
            self._issue(p.name, register_identity(self.accounts[p.name].peer, p.role, p.metadata))
        self.settle()
        for prod in self.sc.products:
            seller = self.accounts[prod.seller]
            self._issue(prod.seller, post_product(seller.peer, prod.topic, prod.price, delivery=prod.delivery,
                                                  description=prod.description, salt=prod.name.encode()))
        self.settle()

    def _issue(self, name: str, tx) -> bool:
        try:
            self.client.issue(self.accounts[name], tx)
            return True
        except DelegationError as exc:
            self.refused.append(f"{name}: {exc}")
            return False

    def product_id(self, name: str) -> bytes:
        prod = self.sc.product(name)
        return derive_product_id(self.accounts[prod.seller].peer, prod.topic, prod.name.encode())

    def _terms(self, buyer: str, seller: str, index: int) -> TradeTerms:
        sc = self.sc
        bpeer, speer = sc.peer(buyer), sc.peer(seller)
        stop = self.faults.stop_paying.get(buyer)
        withhold = self.faults.withhold.get(seller)
        cheating = bpeer.behavior is Behavior.CHEATING_BUYER
        withholding = speer.behavior is Behavior.WITHHOLDING_SELLER
        noisy = speer.behavior is Behavior.LOW_QUALITY_SELLER
        now = self.client.now

        def pays(t: int, i: int) -> bool:
            if cheating and i >= 1:
                return False
            return stop is None or t < stop

        def delivers(t: int) -> bool:
            return not withholding and (withhold is None or t < withhold)

        def records(seq: int) -> bytes:
            tag = b"noise" if noisy else b"data"
            return tag + sha256(self.namespace + index.to_bytes(4, "big") + seq.to_bytes(8, "big"))

        return TradeTerms(
            pays=pays,
            delivers=delivers,
            buyer_strategy=BuyerStrategy.ABORT_AFTER_FUND if cheating or (stop is not None and now >= stop)
            else BuyerStrategy.HONEST,
            seller_strategy=SellerStrategy.WITHHOLD if withholding or (withhold is not None and now >= withhold)
            else SellerStrategy.DELIVER,
            k=sc.k,
            max_outstanding=sc.max_outstanding,
            timeout=sc.timeout,
            delay=sc.delay,
            record_source=records,
        )

    def buy(self, index: int, step: Buy) -> None:
        prod = self.sc.product(step.product)
        buyer = self.accounts[step.buyer]
        terms = self._terms(step.buyer, prod.seller, index)
        try:
            driver = self.market.start(buyer, self.product_id(step.product), step.records, terms)
        except (PurchaseError, DelegationError) as exc:
            self.refused.append(f"{index} {step.buyer} {step.product}: {exc}")
            self.settle()
            return
        self.link = driver if isinstance(driver, SdppLink) else None
        self._apply_faults(self.client.now)
        try:
            self.client.run([driver], tick_limit=self.remaining)
        except DelegationError as exc:
            self.refused.append(f"{index} {step.buyer} {step.product}: {exc}")
        self.link = None
        self.settle()
        outcome = driver.report() if isinstance(driver, SdppLink) else driver.outcome()
        self.sessions.append(self._session_metrics(index, step, prod.seller, outcome))
        self._rate(step, prod.seller, outcome)

    def _session_metrics(self, index: int, step: Buy, seller: str, outcome) -> SessionMetrics:
        if isinstance(outcome, SessionReport):
            detail = (f"invoices={outcome.invoices_issued} invoices_paid={outcome.invoices_paid} "
                      f"anchored={outcome.records_anchored} seller_phase={outcome.seller_phase.value} "
                      f"buyer_phase={outcome.buyer_phase.value}")
            return SessionMetrics(index, step.buyer, seller, step.product, "sdpp",
                                  outcome.records_delivered, outcome.total_paid, detail)
        state = outcome.state.value if outcome.state else "rejected"
        settled = outcome.state is not None and outcome.state.value == "Settled"
        detail = f"escrow={state} buyer_delta={outcome.buyer_delta} seller_delta={outcome.seller_delta}"
        return SessionMetrics(index, step.buyer, seller, step.product, "escrow",
                              outcome.quantity if settled else 0, outcome.price if settled else 0, detail)

    def _rate(self, step: Buy, seller: str, outcome) -> None:
        if outcome.anchor is None:
            return
        if isinstance(outcome, SessionReport):
            clean = not outcome.faulted and outcome.records_delivered == step.records
        else:
            clean = outcome.state is not None and outcome.state.value == "Settled"
        buyer_score = step.rate
        seller_score = step.rate_back
        if step.auto_rate:
            bad_seller = self.sc.peer(seller).behavior in (Behavior.LOW_QUALITY_SELLER, Behavior.WITHHOLDING_SELLER)
            buyer_score = 1 if bad_seller or not clean else 5
        for rater, subject, score in ((step.buyer, seller, buyer_score), (seller, step.buyer, seller_score)):
            if score is None:
                continue
            try:
                self.market.rate(self.accounts[rater], self.accounts[subject].peer, score, outcome)
            except (PurchaseError, DelegationError) as exc:
                self.refused.append(f"rating by {rater}: {exc}")
        self.settle()

    def pay(self, step: Pay) -> None:
        self._issue(step.sender, transfer(self.accounts[step.sender].peer, self.accounts[step.to].peer, step.amount))
        self.settle()

    def run(self) -> "Metrics":
        if self.sc.peers or self.sc.script:
            self.setup()
        for index, step in enumerate(self.sc.script):
            if isinstance(step, Buy):
                self.buy(index, step)
            elif isinstance(step, Pay):
                self.pay(step)
            elif isinstance(step, Wait):
                self.settle(step.ticks)
        self.settle()
        return self.metrics()

    # -- results -------------------------------------------------------------

    def honest_nodes(self) -> list[LedgerNode]:
        return [n for n in self.nodes if n.behavior is NodeBehavior.HONEST]

    def chains_agree(self) -> bool:
        dumps = {dump_chain(n.chain) for n in self.honest_nodes()}
        return len(dumps) <= 1

    def metrics(self) -> Metrics:
        state = self.client.state()
        chain = self.client.chain
        for block in chain:
            for tx in block.tx_list:
                if tx.sender.public_key in self.unsigned_keys:
                    raise InvariantViolation(f"tx signed by non-signing peer {self.names.get(tx.sender)}")
        if not state.conserved():
            raise InvariantViolation("conservation broken at end of run")
        return Metrics(
            seed=self.sc.seed,
            mode=str(self.sc.mode),
            ticks=self.client.now,
            blocks=len(chain) - 1,
            committed_tx_count=sum(len(b.tx_list) for b in chain),
            rejected_tx_count=len(state.rejections),
            failed_rounds=self.client.failed_rounds,
            chains_agree=self.chains_agree(),
            conserved=state.conserved(),
            minted=state.minted,
            fee_sink=state.fee_sink,
            escrow_held=state.escrow_held,
            burned=state.burned,
            balances=tuple(sorted((name, state.balance(a.peer)) for name, a in self.accounts.items())),
            sessions=tuple(self.sessions),
            bans=tuple(sorted(self.names.get(p, p.hex()) for p in state.banned_peers())),
            refused=tuple(self.refused),
        )


def run_scenario(sc: Scenario) -> Metrics:
    return SimNet(sc).run()


def run_scenario_net(sc: Scenario) -> tuple[Metrics, SimNet]:
    """Like :func:`run_scenario` but also returns the network for inspection."""
    net = SimNet(sc)
    return net.run(), net
