"""Request and response bodies of the HTTP service.

Protocol messages reuse the wire models so HTTP and framed-byte transports
share one schema.
"""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field

from ..protocol.wire import (
    AuditModel,
    CommitmentModel,
    ProofModel,
    ReportModel,
    RequestModel,
    ResponseModel,
)

__all__ = [
    "AuditModel", "CommitmentModel", "ErrorModel", "HealthModel", "ModelInfo", "PlanModel", "PlanRequest",
    "ProofModel", "PurgeRequest", "PurgeResult", "ReportModel", "RequestModel", "ResponseModel",
]


class _Body(BaseModel):
    model_config = ConfigDict(extra="forbid")


class HealthModel(_Body):
    status: str = "ok"
    model_commitment: str
    logged: int


class ModelInfo(_Body):
    spec: dict
    model_commitment: CommitmentModel
    logging: str


class PurgeRequest(_Body):
    age: float | None = Field(default=None, ge=0)


class PurgeResult(_Body):
    purged: int


class PlanRequest(_Body):
    alpha: float = Field(gt=0, le=1)
    p_detect: float = Field(gt=0, le=1)
    eta: float = Field(gt=0, lt=1)
    fp: float = Field(ge=0, le=1)
    completeness_target: float = Field(ge=0, le=1)


class PlanModel(_Body):
    alpha: float
    per_request_detect: float
    evasion_eta: float
    n_audits: int
    reject_threshold_k: int
    false_reject: float
    soundness: float


class ErrorModel(_Body):
    error: str
    detail: str
