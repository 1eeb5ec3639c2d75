"""Inference server: serve, commit, log, and answer audits."""

from __future__ import annotations

import threading
from typing import Sequence

import numpy as np

from .. import prf
from ..commitment import Commitment, TraceOpening, commit_model, commit_trace, commit_traces
from ..errors import AuditUnavailable, DuplicateId
from ..metrics import DistanceKind
from ..model import DeviationConfig, ExecutionResult, LoggingMode, ModelSpec, run_batch
from .logstore import LogEntry, LogStore
from .messages import Audit, Proof, Request, Response
from .vc import VcInput, VcReport, vc_execute_many


class Server:
    """Serves a claimed model while actually executing a deployed one.

    Each request independently follows ``deviation`` with probability
    ``dishonest_fraction`` and ``honest_deviation`` otherwise. Per-request
    seeds, noise keys, ids and the dishonesty draw all come from named
    streams under ``root_seed``.
    """

    def __init__(self, spec: ModelSpec, deviation: DeviationConfig | None = None,
                 logging: LoggingMode = LoggingMode.FULL, *, root_seed: int = 0,
                 honest_deviation: DeviationConfig | None = None, dishonest_fraction: float = 1.0,
                 store: LogStore | None = None, distance_kind: DistanceKind | None = None):
        if not 0 <= dishonest_fraction <= 1:
            raise ValueError("dishonest_fraction must lie in [0, 1]")
        self.spec = spec
        self.deviation = deviation or DeviationConfig()
        self.honest_deviation = honest_deviation or DeviationConfig()
        self.dishonest_fraction = dishonest_fraction
        self.logging = LoggingMode(logging)
        self.store = store if store is not None else LogStore()
        self.distance_kind = distance_kind
        self.model_commitment: Commitment = commit_model(spec)
        self._ids = prf.Stream(root_seed, "server/request-id")
        self._seeds = prf.Stream(root_seed, "server/seed")
        self._noise = prf.Stream(root_seed, "server/noise")
        self._coin = prf.Stream(root_seed, "server/dishonest")
        self._lock = threading.Lock()

    def _draw(self, n: int):
        with self._lock:
            ids = [w.astype("<u8").tobytes().hex() for w in self._ids.raw(2 * n).reshape(n, 2)]
            seeds = self._seeds.seeds(n)
            keys = self._noise.keys(n)
            dishonest = self._coin.uniform(n) < self.dishonest_fraction
        return ids, seeds, keys, dishonest

    def handle_request(self, prompt: Sequence[int]) -> Response:
        return self.handle_requests([prompt])[0]

    def handle_requests(self, prompts: Sequence[Sequence[int]],
                        request_ids: Sequence[str] | None = None) -> list[Response]:
        """Serve a batch. Ids supplied by the client key the log; otherwise
        the server draws fresh ones."""
        n = len(prompts)
        if n == 0:
            return []
        ids, seeds, keys, dishonest = self._draw(n)
        if request_ids is not None:
            if len(request_ids) != n or len(set(request_ids)) != n:
                raise DuplicateId("request ids must be unique, one per prompt")
            for r in request_ids:
                if self.store.seen(r):
                    raise DuplicateId(f"request {r} already logged")
            ids = list(request_ids)
        results = [None] * n
        for flag, dev in ((True, self.deviation), (False, self.honest_deviation)):
            sel = np.flatnonzero(dishonest == flag)
            if not len(sel):
                continue
            out = run_batch(self.spec, dev, [prompts[i] for i in sel], [seeds[i] for i in sel],
                            [keys[i] for i in sel], self.logging)
            for i, r in zip(sel, out):
                results[i] = r
        now = self.store.clock()
        commits = commit_traces([TraceOpening(r.seed_r, r.trace) for r in results])
        entries, responses = [], []
        for i, (r, c) in enumerate(zip(results, commits)):
            label = self.deviation.kind.value if dishonest[i] else self.honest_deviation.kind.value
            entries.append(LogEntry(ids[i], tuple(map(int, prompts[i])), r, c, now, True, label))
            responses.append(Response(ids[i], tuple(r.output_tokens), r.reported_token_count, c))
        self.store.put_many(entries)
        return responses

    def handle_audit(self, request_id: str) -> Proof:
        proof = self.handle_audits([request_id])[0]
        if proof is None:
            raise AuditUnavailable(f"request {request_id} is unknown or purged")
        return proof

    def handle_audits(self, request_ids: Sequence[str]) -> list[Proof | None]:
        """Proofs in request order; ``None`` where the entry is unavailable."""
        with self.store.pinned_many(list(request_ids)) as entries:
            live = [e for e in entries if e is not None]
            reports = vc_execute_many([self._vc_input(e) for e in live], self.distance_kind)
        it = iter(reports)
        return [None if e is None else self._proof(e, next(it)) for e in entries]

    def _vc_input(self, e: LogEntry) -> VcInput:
        r = e.result
        return VcInput(self.model_commitment, e.commitment, e.prompt, r.output_tokens,
                       r.reported_token_count, self.spec, e.opening)

    @staticmethod
    def _proof(e: LogEntry, report: VcReport) -> Proof:
        r = e.result
        return Proof(e.request_id, not report.aborted, report, e.prompt, tuple(r.output_tokens),
                     r.reported_token_count, e.commitment)

    def request(self, msg: Request) -> Response:
        return self.handle_requests([msg.prompt], [msg.request_id])[0]

    def audit(self, msg: Audit) -> Proof:
        return self.handle_audit(msg.request_id)

    def request_many(self, msgs: Sequence[Request]) -> list[Response]:
        return self.handle_requests([m.prompt for m in msgs], [m.request_id for m in msgs])

    def audit_many(self, msgs: Sequence[Audit]) -> list[Proof | None]:
        return self.handle_audits([m.request_id for m in msgs])


def commit_trace_of(result: ExecutionResult) -> Commitment:
    return commit_trace(TraceOpening(result.seed_r, result.trace))
