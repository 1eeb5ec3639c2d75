"""Server, auditor and verifier roles of the commit-then-prove audit."""

from .auditor import (
    Auditor,
    CampaignResult,
    HttpTransport,
    LocalTransport,
    Outcome,
    ProbeResult,
    evaluate,
)
from .logstore import LogEntry, LogStore, SimClock
from .messages import Audit, Message, Proof, Request, Response
from .server import Server
from .vc import VcInput, VcReport, vc_execute, vc_execute_many

__all__ = [
    "Audit", "Auditor", "CampaignResult", "HttpTransport", "LocalTransport", "LogEntry", "LogStore",
    "Message", "Outcome", "ProbeResult", "Proof", "Request", "Response", "Server", "SimClock",
    "VcInput", "VcReport", "evaluate", "vc_execute", "vc_execute_many",
]
