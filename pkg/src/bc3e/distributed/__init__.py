"""Row-distributed execution: sites run E-steps, an aggregator sees only sums."""

from .audit import AuditReport, audit_privacy
from .messages import PROTOCOL_VERSION, Message, ParamsBroadcast, PartialStats, Terminate
from .protocol import (Aggregator, InProcessResult, SiteAssignment, SiteNode, SiteResult, aggregate,
                       aggregate_and_m_step, load_checkpoint, partial_from_state, run_in_process, run_session,
                       site_e_step)
from .transport import Listener, SocketChannel, Transcript, channel_pair, connect

__all__ = [
    "Aggregator", "AuditReport", "InProcessResult", "Listener", "Message", "PROTOCOL_VERSION", "ParamsBroadcast",
    "PartialStats", "SiteAssignment", "SiteNode", "SiteResult", "SocketChannel", "Terminate", "Transcript",
    "aggregate", "aggregate_and_m_step", "audit_privacy", "channel_pair", "connect", "load_checkpoint",
    "partial_from_state", "run_in_process", "run_session", "site_e_step",
]
