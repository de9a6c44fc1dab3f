"""Data product listings on the app-specific channel and their discovery."""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

from .codec import Writer
from .ledger import Channel, PeerId, Transaction, sha256, unsigned_transaction
from .payloads import Delivery, ProductPost, ProductRetire, encode_op
from .state import Ctx, Reputation, ServiceState, Skip, reputation_of


@dataclass(frozen=True)
class DataProduct:
    product_id: bytes
    seller: PeerId
    topic: str
    description: str
    price_per_record: int
    delivery: Delivery
    endpoint: bytes
    active: bool = True


def derive_product_id(seller: PeerId, topic: str, salt: bytes = b"") -> bytes:
    return sha256(Writer().raw(b"product").fixed(seller.public_key, 32).text(topic).blob(salt).getvalue())


def post_product(seller: PeerId, topic: str, price_per_record: int, *,
                 delivery: Delivery = Delivery.SDPP_STREAM, description: str = "",
                 endpoint: bytes = b"", product_id: bytes | None = None,
                 salt: bytes = b"") -> Transaction:
    pid = product_id or derive_product_id(seller, topic, salt)
    body = ProductPost(pid, topic, description, price_per_record, Delivery(delivery), endpoint)
    return unsigned_transaction(Channel.APP_SPECIFIC, seller, encode_op(body))


def retire_product(seller: PeerId, product_id: bytes) -> Transaction:
    return unsigned_transaction(Channel.APP_SPECIFIC, seller, encode_op(ProductRetire(product_id)))


def apply_post(state: ServiceState, ctx: Ctx, body: ProductPost) -> None:
    if ctx.actor not in state.identities:
        raise Skip("UnregisteredSeller")
    if body.product_id in state.products:
        raise Skip("DuplicateProduct")
    state.require_funds(ctx.actor, 0)
    state.products[body.product_id] = DataProduct(
        body.product_id, ctx.actor, body.topic, body.description, body.price_per_record,
        body.delivery, body.endpoint,
    )
    state.charge_fee(ctx.actor)


def apply_retire(state: ServiceState, ctx: Ctx, body: ProductRetire) -> None:
    product = state.products.get(body.product_id)
    if product is None:
        raise Skip("UnknownProduct")
    if product.seller != ctx.actor:
        raise Skip("NotOwner")
    if not product.active:
        raise Skip("AlreadyRetired")
    state.require_funds(ctx.actor, 0)
    state.products[body.product_id] = replace(product, active=False)
    state.charge_fee(ctx.actor)


@dataclass(frozen=True)
class Query:
    topic: str | None = None
    max_price: int | None = None
    min_reputation: Fraction | int | float | None = None
    delivery: Delivery | None = None


def _rank(item: tuple[DataProduct, Reputation]):
    product, rep = item
    if rep.mean_score is None:
        return (1, Fraction(0), product.price_per_record, product.product_id)
    return (0, -rep.mean_score, product.price_per_record, product.product_id)


def discover(state: ServiceState, query: Query | None = None) -> list[tuple[DataProduct, Reputation]]:
    """Active listings of unbanned sellers matching every supplied predicate.

    Ordered best reputation first (unrated sellers last), then cheapest, then
    by product id. ``min_reputation`` excludes unrated sellers.
    """
    q = query or Query()
    out = []
    for product in state.products.values():
        if not product.active:
            continue
        rep = reputation_of(state, product.seller)
        if rep.banned:
            continue
        if q.topic is not None and product.topic != q.topic:
            continue
        if q.max_price is not None and product.price_per_record > q.max_price:
            continue
        if q.delivery is not None and product.delivery != q.delivery:
            continue
        if q.min_reputation is not None:
            if rep.mean_score is None or rep.mean_score < Fraction(q.min_reputation):
                continue
        out.append((product, rep))
    out.sort(key=_rank)
    return out


def format_listing(results: list[tuple[DataProduct, Reputation]]) -> str:
    """Stable tab-separated table for the CLI."""
    rows = ["product_id\tseller\ttopic\tprice\tdelivery\treputation\tratings"]
    for product, rep in results:
        mean = "unrated" if rep.mean_score is None else f"{float(rep.mean_score):.2f}"
        rows.append("\t".join([
            product.product_id.hex(),
            product.seller.hex(),
            product.topic,
            str(product.price_per_record),
            product.delivery.name.lower(),
            mean,
            str(rep.count),
        ]))
    return "\n".join(rows) + "\n"
