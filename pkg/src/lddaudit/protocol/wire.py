"""Byte encoding of protocol messages.

A frame is a 4-byte big-endian length followed by canonical JSON (sorted
keys, no whitespace). Every message carries a ``type`` tag and a 128-bit
``request_id`` as 32 lowercase hex digits. Digests are lowercase hex.
Distance values travel as Python ``repr`` strings so they round-trip
bit-exactly, infinities included.
"""

from __future__ import annotations

import json
import struct
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter

from ..commitment import Commitment
from ..errors import ShapeError
from ..metrics import DistanceKind, SampleBatch
from .messages import Audit, Message, Proof, Request, Response
from .vc import VcReport

RequestId = Annotated[str, Field(pattern=r"^[0-9a-f]{32}$")]
Digest = Annotated[str, Field(pattern=r"^[0-9a-f]{64}$")]
MAX_FRAME = 64 * 1024 * 1024


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CommitmentModel(_Model):
    digest: Digest
    scheme_id: str = "sha256-v1"


class RequestModel(_Model):
    type: Literal["Request"] = "Request"
    request_id: RequestId
    prompt: list[int]


class ResponseModel(_Model):
    type: Literal["Response"] = "Response"
    request_id: RequestId
    y: list[int]
    T: int
    trace_commitment: CommitmentModel


class AuditModel(_Model):
    type: Literal["Audit"] = "Audit"
    request_id: RequestId


class ReportModel(_Model):
    commitments_ok: bool
    reconstruction_ok: bool
    aborted: bool
    reason: str | None = None
    kind: DistanceKind
    step_index: list[int] = []
    values: list[str] = []
    flagged: list[bool] = []
    routing: list[bool] = []


class ProofModel(_Model):
    type: Literal["Proof"] = "Proof"
    request_id: RequestId
    vc_ok: bool
    ldd_report: ReportModel
    prompt: list[int]
    y: list[int]
    T: int
    trace_commitment: CommitmentModel


AnyModel = Annotated[Union[RequestModel, ResponseModel, AuditModel, ProofModel], Field(discriminator="type")]
_adapter = TypeAdapter(AnyModel)


def _commit_model(c: Commitment) -> CommitmentModel:
    return CommitmentModel(digest=c.hex, scheme_id=c.scheme_id)


def _commit(m: CommitmentModel) -> Commitment:
    return Commitment.from_hex(m.digest, m.scheme_id)


def report_to_model(r: VcReport) -> ReportModel:
    s = r.samples
    return ReportModel(
        commitments_ok=r.commitments_ok,
        reconstruction_ok=r.reconstruction_ok,
        aborted=r.aborted,
        reason=r.reason,
        kind=s.kind,
        step_index=s.step_index.tolist(),
        values=[repr(float(v)) for v in s.value],
        flagged=s.flagged.tolist(),
        routing=s.routing.tolist(),
    )


def report_from_model(m: ReportModel) -> VcReport:
    n = len(m.values)
    if not (len(m.step_index) == len(m.flagged) == len(m.routing) == n):
        raise ShapeError("report columns differ in length")
    batch = SampleBatch(
        np.array(m.step_index, dtype=np.int64),
        np.array([float(v) for v in m.values], dtype=np.float64),
        np.array(m.flagged, dtype=bool),
        np.array(m.routing, dtype=bool),
        m.kind,
    )
    return VcReport(m.commitments_ok, m.reconstruction_ok, m.aborted, m.reason, batch)


def to_model(msg: Message) -> BaseModel:
    if isinstance(msg, Request):
        return RequestModel(request_id=msg.request_id, prompt=list(msg.prompt))
    if isinstance(msg, Response):
        return ResponseModel(request_id=msg.request_id, y=list(msg.y), T=msg.T,
                             trace_commitment=_commit_model(msg.trace_commitment))
    if isinstance(msg, Audit):
        return AuditModel(request_id=msg.request_id)
    if isinstance(msg, Proof):
        return ProofModel(request_id=msg.request_id, vc_ok=msg.vc_ok, ldd_report=report_to_model(msg.report),
                          prompt=list(msg.prompt), y=list(msg.y), T=msg.T,
                          trace_commitment=_commit_model(msg.trace_commitment))
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def from_model(m: BaseModel) -> Message:
    if isinstance(m, RequestModel):
        return Request(m.request_id, tuple(m.prompt))
    if isinstance(m, ResponseModel):
        return Response(m.request_id, tuple(m.y), m.T, _commit(m.trace_commitment))
    if isinstance(m, AuditModel):
        return Audit(m.request_id)
    if isinstance(m, ProofModel):
        return Proof(m.request_id, m.vc_ok, report_from_model(m.ldd_report), tuple(m.prompt), tuple(m.y), m.T,
                     _commit(m.trace_commitment))
    raise TypeError(f"not a message model: {type(m).__name__}")


def canonical_json(m: BaseModel) -> bytes:
    return json.dumps(m.model_dump(mode="json"), sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True).encode()


def encode(msg: Message) -> bytes:
    body = canonical_json(to_model(msg))
    return struct.pack(">I", len(body)) + body


def decode(frame: bytes) -> Message:
    if len(frame) < 4:
        raise ShapeError("truncated frame")
    (n,) = struct.unpack(">I", frame[:4])
    if n > MAX_FRAME or len(frame) != 4 + n:
        raise ShapeError("frame length mismatch")
    return from_model(_adapter.validate_json(frame[4:]))


def read_frame(stream) -> bytes | None:
    """Read one frame from a binary file-like object; None at clean EOF."""
    head = stream.read(4)
    if not head:
        return None
    if len(head) < 4:
        raise ShapeError("truncated frame header")
    (n,) = struct.unpack(">I", head)
    if n > MAX_FRAME:
        raise ShapeError("frame too large")
    body = stream.read(n)
    if len(body) != n:
        raise ShapeError("truncated frame body")
    return head + body
