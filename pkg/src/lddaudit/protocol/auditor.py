"""Auditor: random probes, immediate audits, per-request and campaign verdicts."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .. import prf
from ..calibration import AuditParams
from ..errors import ProbeError
from ..ldd import RequestVerdict, decide
from . import wire
from .messages import Audit, Proof, Request, Response
from .vc import VcReport

PROMPT_LEN = (8, 64)


class Outcome(enum.Enum):
    PASS = "0"
    FLAG = "1"
    BOTTOM = "⊥"

    @property
    def detected(self) -> bool:
        return self is not Outcome.PASS


class Transport(Protocol):
    def request_many(self, msgs: Sequence[Request]) -> list[Response]: ...

    def audit_many(self, msgs: Sequence[Audit]) -> list[Proof | None]: ...


class LocalTransport:
    """Calls a server in process; ``wire=True`` round-trips every message
    through the byte codec."""

    def __init__(self, server, wire: bool = False):
        self.server = server
        self.wire = wire

    def _pass(self, msg):
        return wire.decode(wire.encode(msg)) if self.wire and msg is not None else msg

    def request_many(self, msgs: Sequence[Request]) -> list[Response]:
        msgs = [self._pass(m) for m in msgs]
        return [self._pass(r) for r in self.server.request_many(msgs)]

    def audit_many(self, msgs: Sequence[Audit]) -> list[Proof | None]:
        msgs = [self._pass(m) for m in msgs]
        return [self._pass(p) for p in self.server.audit_many(msgs)]


class HttpTransport:
    """Talks to the HTTP service; transport failures raise ``ProbeError``."""

    def __init__(self, base_url: str, client=None, timeout: float = 60.0):
        import httpx

        self._httpx = httpx
        self.client = client or httpx.Client(base_url=base_url, timeout=timeout)

    def _post(self, path: str, payload):
        try:
            r = self.client.post(path, json=payload)
        except self._httpx.HTTPError as e:
            raise ProbeError(f"{path}: {e}") from e
        if r.status_code >= 500:
            raise ProbeError(f"{path}: HTTP {r.status_code}")
        return r

    def request_many(self, msgs: Sequence[Request]) -> list[Response]:
        r = self._post("/v1/requests", [wire.to_model(m).model_dump(mode="json") for m in msgs])
        if r.status_code != 200:
            raise ProbeError(f"/v1/requests: HTTP {r.status_code} {r.text[:200]}")
        return [wire.from_model(wire.ResponseModel.model_validate(x)) for x in r.json()]

    def audit_many(self, msgs: Sequence[Audit]) -> list[Proof | None]:
        r = self._post("/v1/audits", [wire.to_model(m).model_dump(mode="json") for m in msgs])
        if r.status_code != 200:
            raise ProbeError(f"/v1/audits: HTTP {r.status_code} {r.text[:200]}")
        return [None if x is None else wire.from_model(wire.ProofModel.model_validate(x)) for x in r.json()]

    def health(self) -> dict:
        try:
            return self.client.get("/v1/health").json()
        except self._httpx.HTTPError as e:
            raise ProbeError(str(e)) from e


@dataclass
class ProbeResult:
    request_id: str
    prompt: tuple[int, ...]
    outcome: Outcome
    verdict: RequestVerdict | None = None
    report: VcReport | None = None
    reason: str | None = None


def evaluate(request: Request, response: Response, proof: Proof | None, params: AuditParams) -> ProbeResult:
    """Turn one proof into 0, 1 or bottom."""
    rid, prompt = request.request_id, tuple(request.prompt)
    if proof is None:
        return ProbeResult(rid, prompt, Outcome.BOTTOM, reason="unavailable")
    if not proof.vc_ok or proof.report.aborted:
        return ProbeResult(rid, prompt, Outcome.BOTTOM, report=proof.report, reason=proof.report.reason or "vc")
    if (proof.request_id != rid or tuple(proof.prompt) != prompt or tuple(proof.y) != tuple(response.y)
            or proof.T != response.T or proof.trace_commitment != response.trace_commitment):
        return ProbeResult(rid, prompt, Outcome.BOTTOM, report=proof.report, reason="public-input")
    v = decide(proof.report.samples, params.t1, params.t2)
    return ProbeResult(rid, prompt, Outcome.FLAG if v.flagged else Outcome.PASS, v, proof.report)


@dataclass
class CampaignResult:
    n_audits: int
    reject_threshold_k: int
    flags: int
    bottoms: int
    probes: list[ProbeResult] = field(repr=False, default_factory=list)

    @property
    def detections(self) -> int:
        return self.flags + self.bottoms

    @property
    def decision(self) -> str:
        return "REJECT" if self.detections > self.reject_threshold_k else "ACCEPT"


class Auditor:
    """Sends prompts indistinguishable from user traffic, then audits them."""

    def __init__(self, transport: Transport, params: AuditParams, vocab_size: int, *, root_seed: int = 0,
                 prompt_len: tuple[int, int] = PROMPT_LEN, retries: int = 2, keep_reports: bool = True):
        lo, hi = prompt_len
        if not 1 <= lo <= hi:
            raise ValueError("bad prompt length range")
        self.transport = transport
        self.params = params
        self.vocab_size = vocab_size
        self.prompt_len = (lo, hi)
        self.retries = retries
        self.keep_reports = keep_reports
        self._prompts = prf.Stream(root_seed, "auditor/prompt")
        self._ids = prf.Stream(root_seed, "auditor/request-id")

    def make_requests(self, n: int) -> list[Request]:
        lo, hi = self.prompt_len
        raw = self._prompts.raw(n * (1 + hi)).reshape(n, 1 + hi)
        lens = lo + (raw[:, 0] % np.uint64(hi - lo + 1)).astype(np.int64)
        toks = (raw[:, 1:] % np.uint64(self.vocab_size)).astype(np.int64)
        ids = [w.astype("<u8").tobytes().hex() for w in self._ids.raw(2 * n).reshape(n, 2)]
        return [Request(ids[i], tuple(toks[i, : lens[i]].tolist())) for i in range(n)]

    def _call(self, fn, msgs):
        for attempt in range(self.retries + 1):
            try:
                return fn(msgs)
            except ProbeError:
                if attempt == self.retries:
                    raise

    def probe_many(self, n: int) -> list[ProbeResult]:
        return self.probe_requests(self.make_requests(n))

    def probe_requests(self, reqs: Sequence[Request]) -> list[ProbeResult]:
        """Send prepared requests, audit each immediately, and judge the proofs."""
        responses = self._call(self.transport.request_many, reqs)
        proofs = self._call(self.transport.audit_many, [Audit(r.request_id) for r in responses])
        out = [evaluate(q, r, p, self.params) for q, r, p in zip(reqs, responses, proofs)]
        if not self.keep_reports:
            for o in out:
                o.report = None
        return out

    def probe(self) -> ProbeResult:
        return self.probe_many(1)[0]

    def run_campaign(self, n_audits: int, reject_threshold_k: int, batch: int = 3000) -> CampaignResult:
        if n_audits < 1:
            raise ValueError("n_audits must be at least 1")
        probes: list[ProbeResult] = []
        while len(probes) < n_audits:
            probes.extend(self.probe_many(min(batch, n_audits - len(probes))))
        flags = sum(p.outcome is Outcome.FLAG for p in probes)
        bottoms = sum(p.outcome is Outcome.BOTTOM for p in probes)
        return CampaignResult(n_audits, reject_threshold_k, flags, bottoms, probes)
