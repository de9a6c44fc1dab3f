"""Blockchain-backed peer-to-peer IoT platform: ledger, services, escrow,
streaming payments, a data marketplace and a scenario simulator."""

__version__ = "0.1.0"
