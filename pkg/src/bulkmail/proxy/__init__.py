"""SMTP proxy front end: relay policy core, session state machine and TCP server."""

from .config import PeerConfig, PeerTable, ProxyConfig, Relationship
from .relay import ConnectionDecision, DeliveryResult, RelayNode
from .session import Reply, SmtpSession, run_dialogue

__all__ = [
    "ConnectionDecision",
    "DeliveryResult",
    "PeerConfig",
    "PeerTable",
    "ProxyConfig",
    "RelayNode",
    "Relationship",
    "Reply",
    "SmtpSession",
    "run_dialogue",
]
