"""BFT ordering layer: replicas, client, authenticated messages."""

from .client import ConsensusReply, OrderingClient
from .config import InvalidConfig, KeyRing, ViewConfig, apply_change, max_faults, prepare_quorum, reply_quorum
from .messages import ConsensusMessage, Envelope, open_envelope, seal
from .replica import Replica

__all__ = [
    "ConsensusMessage",
    "ConsensusReply",
    "Envelope",
    "InvalidConfig",
    "KeyRing",
    "OrderingClient",
    "Replica",
    "ViewConfig",
    "apply_change",
    "max_faults",
    "open_envelope",
    "prepare_quorum",
    "reply_quorum",
    "seal",
]
