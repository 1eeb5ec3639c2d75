"""Verifiable computation as trusted re-execution.

The checker establishes, in order: both commitments open correctly; every
committed decision follows from the committed logits and per-step randomness
(or is consistent with the committed top-K set in compact mode); the claimed
output and token count follow from those decisions; and finally it re-runs
the reference with the same decisions and emits one distance per step.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import prf
from ..commitment import Commitment, TraceOpening, commit_model, commit_traces
from ..errors import ModeError
from ..metrics import (
    DistanceKind,
    DistanceSample,
    SampleBatch,
    token_distances_matrix,
    topk_distance_rows,
)
from ..model import LoggingMode, ModelSpec, Trace, aligned_batch, reconstruct, select_rows

ABORT_COMMITMENT = "commitment"
ABORT_SCHEDULE = "schedule"
ABORT_RANDOMNESS = "randomness"
ABORT_DECISION = "decision"
ABORT_OUTPUT = "output"
ABORT_INPUT = "input"


@dataclass
class VcReport:
    commitments_ok: bool
    reconstruction_ok: bool
    aborted: bool
    reason: str | None
    samples: SampleBatch

    @property
    def ok(self) -> bool:
        return not self.aborted

    @property
    def distance_kind(self) -> DistanceKind:
        return self.samples.kind

    @property
    def distance_samples(self) -> list[DistanceSample]:
        return self.samples.samples()

    @classmethod
    def abort(cls, reason: str, kind: DistanceKind, commitments_ok: bool = False,
              reconstruction_ok: bool = False) -> "VcReport":
        return cls(commitments_ok, reconstruction_ok, True, reason, SampleBatch.empty(kind))


@dataclass
class VcInput:
    model_commitment: Commitment
    trace_commitment: Commitment
    prompt: Sequence[int]
    y: Sequence[int]
    T: int
    spec: ModelSpec
    opening: TraceOpening


def default_kind(mode: LoggingMode) -> DistanceKind:
    return DistanceKind.TV if mode is LoggingMode.FULL else DistanceKind.TOPK


def _check_commitments(inputs: Sequence[VcInput]) -> list[bool]:
    """Whether each input's model and trace commitments open; batched hashing."""
    known = [all(c.scheme_id == "sha256-v1" for c in (inp.model_commitment, inp.trace_commitment))
             and commit_model(inp.spec).digest == inp.model_commitment.digest for inp in inputs]
    todo = [i for i, ok in enumerate(known) if ok]
    try:
        digests = commit_traces([inputs[i].opening for i in todo])
    except (ValueError, IndexError, TypeError):
        digests = [_commit_or_none(inputs[i].opening) for i in todo]
    for i, c in zip(todo, digests):
        known[i] = c is not None and c.digest == inputs[i].trace_commitment.digest
    return known


def _commit_or_none(opening: TraceOpening) -> Commitment | None:
    # an opening too malformed to serialize cannot match any commitment
    try:
        return commit_traces([opening])[0]
    except (ValueError, IndexError, TypeError):
        return None


def _distinct_rows(a: np.ndarray) -> bool:
    if a.shape[1] < 2:
        return True
    s = np.sort(a, axis=1)
    return not (s[:, 1:] == s[:, :-1]).any()


def _check_structure(spec: ModelSpec, op: TraceOpening) -> str | None:
    tr = op.trace
    n = len(tr)
    if n == 0:
        return ABORT_SCHEDULE
    if spec.moe:
        k = tr.kinds
        if n % 2 or (k[0::2] != 1).any() or (k[1::2] != 0).any():
            return ABORT_SCHEDULE
    elif tr.kinds.any():
        return ABORT_SCHEDULE
    if len(op.seed_r) != prf.SEED_BYTES or not np.array_equal(tr.rand_tags, prf.rand_tags(op.seed_r, n)):
        return ABORT_RANDOMNESS
    V, K = spec.vocab_size, spec.top_k_tokens
    dec = tr.token_decisions
    if (dec < 0).any() or (dec >= V).any():
        return ABORT_DECISION
    pay = tr.token_payload
    if tr.mode is LoggingMode.FULL:
        # re-deriving d_i = S(l_i, r_i) happens batched in _derive_group
        if pay.shape[1] != V or not np.isfinite(pay).all():
            return ABORT_DECISION
    else:
        if pay.shape[1] != K or (pay < 0).any() or (pay >= V).any() or not _distinct_rows(pay):
            return ABORT_DECISION
        if not (pay == dec[:, None]).any(axis=1).all():
            return ABORT_DECISION
    if spec.moe:
        r = tr.route_indices
        if (r.shape[1] != spec.top_k_experts or (r < 0).any() or (r >= spec.num_experts).any()
                or not _distinct_rows(r)):
            return ABORT_DECISION
    return None


def _check_structure_group(spec: ModelSpec, mode: LoggingMode, ops: list[TraceOpening]) -> list[str | None]:
    """``_check_structure`` for many openings of one spec and mode.

    Runs the checks over concatenated columns and falls back to the
    per-opening check only when some opening fails, so the reasons match.
    """
    slow = [_check_structure(spec, op) for op in ops] if len(ops) < 2 else None
    if slow is not None:
        return slow
    traces = [op.trace for op in ops]
    if any(t.mode is not mode for t in traces) or any(len(t) == 0 for t in traces):
        return [_check_structure(spec, op) for op in ops]
    kinds = np.concatenate([t.kinds for t in traces])
    if spec.moe:
        if any(len(t) % 2 for t in traces) or (kinds[0::2] != 1).any() or (kinds[1::2] != 0).any():
            return [_check_structure(spec, op) for op in ops]
    elif kinds.any():
        return [_check_structure(spec, op) for op in ops]
    for op, t in zip(ops, traces):
        if len(op.seed_r) != prf.SEED_BYTES or not np.array_equal(t.rand_tags, prf.rand_tags(op.seed_r, len(t))):
            return [_check_structure(spec, op) for op in ops]
    V, K = spec.vocab_size, spec.top_k_tokens
    widths = {t.token_payload.shape[1] for t in traces}
    if len(widths) != 1:
        return [_check_structure(spec, op) for op in ops]
    dec = np.concatenate([t.token_decisions for t in traces])
    pay = np.concatenate([t.token_payload for t in traces])
    bad = (dec < 0).any() or (dec >= V).any()
    if mode is LoggingMode.FULL:
        bad = bad or pay.shape[1] != V or not np.isfinite(pay).all()
    else:
        bad = (bad or pay.shape[1] != K or (pay < 0).any() or (pay >= V).any() or not _distinct_rows(pay)
               or not (pay == dec[:, None]).any(axis=1).all())
    if not bad and spec.moe:
        rw = {t.route_indices.shape[1] for t in traces}
        if len(rw) != 1:
            bad = True
        else:
            r = np.concatenate([t.route_indices for t in traces])
            bad = (r.shape[1] != spec.top_k_experts or (r < 0).any() or (r >= spec.num_experts).any()
                   or not _distinct_rows(r))
    if bad:
        return [_check_structure(spec, op) for op in ops]
    return [None] * len(ops)


def _reference_steps(spec: ModelSpec, token_decisions: np.ndarray) -> int:
    """Generation steps the reference itself would take on these decisions."""
    hit = token_decisions == spec.stop_token
    natural = int(hit.argmax()) + 1 if hit.any() else len(token_decisions)
    return min(natural, spec.max_steps)


def vc_execute_many(inputs: Sequence[VcInput], kind: DistanceKind | None = None) -> list[VcReport]:
    """Check many proofs, sharing one batched re-execution per model."""
    reports: list[VcReport | None] = [None] * len(inputs)
    pending: dict[tuple, list[int]] = defaultdict(list)
    kinds: list[DistanceKind] = []
    opened = _check_commitments(inputs)
    for i, inp in enumerate(inputs):
        mode = inp.opening.trace.mode
        k = DistanceKind(kind) if kind is not None else default_kind(mode)
        if k in (DistanceKind.TV, DistanceKind.KL) and mode is not LoggingMode.FULL:
            raise ModeError(f"{k.value} needs full logits")
        kinds.append(k)
        if not opened[i]:
            reports[i] = VcReport.abort(ABORT_COMMITMENT, k)
            continue
        try:
            prompt = np.asarray(inp.prompt, dtype=np.int64)
        except (TypeError, ValueError):
            prompt = np.zeros(0, dtype=np.int64)
        if prompt.ndim != 1 or len(prompt) == 0 or (prompt < 0).any() or (prompt >= inp.spec.vocab_size).any():
            reports[i] = VcReport.abort(ABORT_INPUT, k, True)
            continue
        pending[(inp.spec, mode, k)].append(i)

    for (spec, mode, k), idx in list(pending.items()):
        reasons = _check_structure_group(spec, mode, [inputs[i].opening for i in idx])
        for i, reason in zip(idx, reasons):
            if reason is not None:
                reports[i] = VcReport.abort(reason, k, True)
        idx = [i for i, reason in zip(idx, reasons) if reason is None]
        if not idx:
            continue
        if mode is LoggingMode.FULL:
            derived = _derive_group(spec, [inputs[i].opening.trace for i in idx])
            for i, ok in zip(idx, derived):
                if not ok:
                    reports[i] = VcReport.abort(ABORT_DECISION, k, True)
            idx = [i for i, ok in zip(idx, derived) if ok]
        keep = []
        for i in idx:
            inp = inputs[i]
            y_hat, t_hat = reconstruct(inp.opening.trace.token_decisions, spec.stop_token)
            if list(inp.y) != y_hat or int(inp.T) != t_hat:
                reports[i] = VcReport.abort(ABORT_OUTPUT, k, True)
            else:
                keep.append(i)
        if keep:
            _measure_group(spec, mode, k, [inputs[i] for i in keep], keep, reports)
    return reports  # type: ignore[return-value]


def _derive_group(spec: ModelSpec, traces: list[Trace]) -> list[bool]:
    """Whether each trace's token decisions equal S(logits, r_i), batched."""
    pay = np.concatenate([t.token_payload for t in traces])
    tags = np.concatenate([t.rand_tags[t.token_positions] for t in traces])
    dec = np.concatenate([t.token_decisions for t in traces])
    match = select_rows(pay, prf.tag_uniform(tags), spec.top_k_tokens) == dec
    bounds = np.cumsum([0] + [len(t.token_decisions) for t in traces])
    return [bool(match[a:b].all()) for a, b in zip(bounds[:-1], bounds[1:])]


def _measure_group(spec: ModelSpec, mode: LoggingMode, kind: DistanceKind, group: list[VcInput],
                   idx: list[int], reports: list) -> None:
    traces: list[Trace] = [g.opening.trace for g in group]
    n_ref = [_reference_steps(spec, t.token_decisions) for t in traces]
    refs = aligned_batch(
        spec,
        [np.asarray(g.prompt, dtype=np.int64) for g in group],
        [(t.token_decisions[:n], t.route_indices[:n]) for t, n in zip(traces, n_ref)],
    )
    V = spec.vocab_size
    # one vectorized distance pass over every token row in the group
    tok_counts = [len(t.token_decisions) for t in traces]
    payload = np.concatenate([t.token_payload for t in traces])
    ref = np.zeros((len(payload), V))
    missing = np.ones(len(payload), dtype=bool)
    off = 0
    for (tr_ref, _), n, c in zip(refs, n_ref, tok_counts):
        ref[off:off + n] = tr_ref
        missing[off:off + n] = False
        off += c
    tok_val, tok_flag = token_distances_matrix(mode, payload, ref, missing, kind, spec.top_k_tokens)

    if spec.moe:
        E = spec.num_experts
        rpay = np.concatenate([t.route_indices for t in traces])
        rref = np.zeros((len(rpay), E))
        rmiss = np.ones(len(rpay), dtype=bool)
        off = 0
        for (_, rr), n, c in zip(refs, n_ref, tok_counts):
            rref[off:off + n] = rr
            rmiss[off:off + n] = False
            off += c
        member = np.zeros((len(rpay), E), dtype=bool)
        np.put_along_axis(member, rpay, True, axis=1)
        route_val = topk_distance_rows(rref, member)

    off = 0
    for j, (i, tr, c) in enumerate(zip(idx, traces, tok_counts)):
        n = len(tr)
        if not spec.moe:
            reports[i] = VcReport(True, True, False, None,
                                  SampleBatch(np.arange(n), tok_val[off:off + c].copy(),
                                              tok_flag[off:off + c].copy(), np.zeros(n, dtype=bool), kind))
            off += c
            continue
        values = np.empty(n)
        flagged = np.empty(n, dtype=bool)
        routing = tr.kinds == 1
        tp, rp = tr.token_positions, tr.route_positions
        values[tp] = tok_val[off:off + c]
        flagged[tp] = tok_flag[off:off + c]
        if spec.moe:
            values[rp] = route_val[off:off + c]
            flagged[rp] = rmiss[off:off + c]
        off += c
        reports[i] = VcReport(True, True, False, None, SampleBatch(np.arange(n), values, flagged, routing, kind))


def vc_execute(model_commitment: Commitment, trace_commitment: Commitment, prompt, y, T,
               witness: tuple[ModelSpec, TraceOpening], kind: DistanceKind | None = None) -> VcReport:
    spec, opening = witness
    return vc_execute_many([VcInput(model_commitment, trace_commitment, prompt, y, T, spec, opening)], kind)[0]
