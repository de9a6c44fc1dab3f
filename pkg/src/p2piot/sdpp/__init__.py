"""Streaming Data Payment Protocol: pay-per-record data over a byte stream."""

from .host import SdppLink, SessionReport, derive_session_id, run_session
from .messages import (
    Close,
    Data,
    Error,
    ErrorCode,
    FrameError,
    FrameTooLarge,
    Hello,
    Incomplete,
    Invoice,
    MalformedFrame,
    Menu,
    Message,
    NotSdpp,
    Order,
    PaymentRef,
    Receipt,
    UnknownMessage,
    Variant,
    decode_frame,
    encode_frame,
)
from .session import BuyerSession, Phase, SellerSession, buyer_step, seller_step

__all__ = [
    "BuyerSession",
    "Close",
    "Data",
    "Error",
    "ErrorCode",
    "FrameError",
    "FrameTooLarge",
    "Hello",
    "Incomplete",
    "Invoice",
    "MalformedFrame",
    "Menu",
    "Message",
    "NotSdpp",
    "Order",
    "PaymentRef",
    "Phase",
    "Receipt",
    "SdppLink",
    "SellerSession",
    "SessionReport",
    "UnknownMessage",
    "Variant",
    "buyer_step",
    "decode_frame",
    "derive_session_id",
    "encode_frame",
    "run_session",
    "seller_step",
]
