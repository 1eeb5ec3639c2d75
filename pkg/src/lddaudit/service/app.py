"""FastAPI service exposing one inference server to auditors and operators."""

from __future__ import annotations

from fastapi import FastAPI, Request as HttpRequest
from fastapi.responses import JSONResponse

from ..audit_math import plan_campaign
from ..errors import AuditUnavailable, DuplicateId, Infeasible, InvalidArgument
from ..protocol import wire
from ..protocol.server import Server
from .schemas import (
    AuditModel,
    CommitmentModel,
    HealthModel,
    ModelInfo,
    PlanModel,
    PlanRequest,
    ProofModel,
    PurgeRequest,
    PurgeResult,
    RequestModel,
    ResponseModel,
)


def _error(status: int, exc: Exception) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": type(exc).__name__, "detail": str(exc)})


def create_app(server: Server) -> FastAPI:
    app = FastAPI(title="lddaudit", version="0.1.0")
    app.state.server = server

    @app.exception_handler(AuditUnavailable)
    async def _unavailable(_: HttpRequest, exc: AuditUnavailable):
        return _error(404, exc)

    @app.exception_handler(DuplicateId)
    async def _duplicate(_: HttpRequest, exc: DuplicateId):
        return _error(409, exc)

    @app.exception_handler(InvalidArgument)
    async def _invalid(_: HttpRequest, exc: InvalidArgument):
        return _error(422, exc)

    @app.exception_handler(Infeasible)
    async def _infeasible(_: HttpRequest, exc: Infeasible):
        return _error(422, exc)

    @app.get("/v1/health", response_model=HealthModel)
    def health() -> HealthModel:
        return HealthModel(model_commitment=server.model_commitment.hex, logged=len(server.store))

    @app.get("/v1/model", response_model=ModelInfo)
    def model() -> ModelInfo:
        c = server.model_commitment
        return ModelInfo(spec=server.spec.to_dict(), logging=server.logging.value,
                         model_commitment=CommitmentModel(digest=c.hex, scheme_id=c.scheme_id))

    # plain ``def`` handlers run in the threadpool, keeping the event loop free

    @app.post("/v1/request", response_model=ResponseModel)
    def request(body: RequestModel) -> ResponseModel:
        return wire.to_model(server.request(wire.from_model(body)))

    @app.post("/v1/requests", response_model=list[ResponseModel])
    def requests(body: list[RequestModel]) -> list[ResponseModel]:
        return [wire.to_model(r) for r in server.request_many([wire.from_model(m) for m in body])]

    @app.post("/v1/audit", response_model=ProofModel)
    def audit(body: AuditModel) -> ProofModel:
        return wire.to_model(server.audit(wire.from_model(body)))

    @app.post("/v1/audits", response_model=list[ProofModel | None])
    def audits(body: list[AuditModel]) -> list[ProofModel | None]:
        proofs = server.audit_many([wire.from_model(m) for m in body])
        return [None if p is None else wire.to_model(p) for p in proofs]

    @app.post("/v1/purge", response_model=PurgeResult)
    def purge(body: PurgeRequest) -> PurgeResult:
        return PurgeResult(purged=server.store.purge(body.age))

    @app.post("/v1/plan", response_model=PlanModel)
    def plan(body: PlanRequest) -> PlanModel:
        p = plan_campaign(body.alpha, body.p_detect, body.eta, body.fp, body.completeness_target)
        return PlanModel(**p.to_dict())

    return app
