"""Distances between deployed and reference logits.

TV and KL act on softmax outputs. The top-K distance is the least L1 change to
a reference vector that makes a claimed index set its top-K; it only needs the
index set from the deployed side, so it works on compact traces.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument, ModeError, ShapeError, TooLarge, TopKIndexError
from .model import DecisionKind, LoggingMode, StepTrace, Trace, topk_rows

TV_SENTINEL = 1.0
ORACLE_MAX_N = 20


class DistanceKind(str, Enum):
    TV = "TV"
    KL = "KL"
    TOPK = "TopK"


@dataclass(frozen=True)
class DistanceSample:
    step_index: int
    kind: DistanceKind
    value: float
    flagged: bool = False
    routing: bool = False


# --------------------------------------------------------------------------
# softmax metrics


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _pair(l, l_star) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(l, dtype=np.float64)
    b = np.asarray(l_star, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"logit shapes differ: {a.shape} vs {b.shape}")
    return a, b


def tv_rows(l: np.ndarray, l_star: np.ndarray) -> np.ndarray:
    d = 0.5 * np.abs(softmax_rows(l) - softmax_rows(l_star)).sum(axis=-1)
    return np.clip(d, 0.0, 1.0)


def kl_rows(l: np.ndarray, l_star: np.ndarray) -> np.ndarray:
    """KL(softmax(l) || softmax(l_star)) per row; p_i = 0 terms vanish."""
    la = l - l.max(axis=-1, keepdims=True)
    lb = l_star - l_star.max(axis=-1, keepdims=True)
    log_p = la - np.log(np.exp(la).sum(axis=-1, keepdims=True))
    log_q = lb - np.log(np.exp(lb).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    terms = np.where(p > 0, p * (log_p - log_q), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def tv_distance(l, l_star) -> float:
    a, b = _pair(l, l_star)
    return float(tv_rows(a, b))


def kl_divergence(l, l_star) -> float:
    a, b = _pair(l, l_star)
    return float(kl_rows(a, b))


# --------------------------------------------------------------------------
# top-K distance


def _check_indices(n: int, indices, k: int) -> np.ndarray:
    idx = np.asarray(sorted(indices) if isinstance(indices, (set, frozenset)) else indices)
    if idx.ndim != 1 or (idx.size and not np.issubdtype(idx.dtype, np.integer)):
        raise TopKIndexError("indices must be a flat collection of integers")
    idx = idx.astype(np.int64)
    if len(idx) != k:
        raise InvalidArgument(f"|indices|={len(idx)} differs from k={k}")
    if not 1 <= k <= n:
        raise InvalidArgument(f"k={k} must be in [1, {n}]")
    if (idx < 0).any() or (idx >= n).any():
        raise TopKIndexError(f"index out of range [0, {n})")
    if len(np.unique(idx)) != k:
        raise InvalidArgument("indices must be distinct")
    return idx


def topk_distance_rows(l_star: np.ndarray, member: np.ndarray) -> np.ndarray:
    """Top-K distance for each row given a boolean membership mask.

    The cost is convex piecewise linear in the threshold t with breakpoints
    at the logit values, so evaluating it at the sorted values with prefix
    sums finds the minimum.
    """
    order = np.argsort(l_star, axis=1, kind="stable")
    s = np.take_along_axis(l_star, order, axis=1)
    m = np.take_along_axis(member, order, axis=1)
    in_val = np.where(m, s, 0.0)
    out_val = np.where(m, 0.0, s)
    cnt_in = np.cumsum(m, axis=1)
    sum_in = np.cumsum(in_val, axis=1)
    cnt_out = np.cumsum(~m, axis=1)
    sum_out = np.cumsum(out_val, axis=1)
    rest_out_cnt = cnt_out[:, -1:] - cnt_out
    rest_out_sum = sum_out[:, -1:] - sum_out
    cost = (s * cnt_in - sum_in) + (rest_out_sum - s * rest_out_cnt)
    return np.maximum(cost.min(axis=1), 0.0)


def topk_distance(l_star, indices, k: int) -> float:
    """Least L1 perturbation of ``l_star`` whose top-k set is ``indices``."""
    ls = np.asarray(l_star, dtype=np.float64)
    idx = _check_indices(len(ls), indices, k)
    member = np.zeros((1, len(ls)), dtype=bool)
    member[0, idx] = True
    return float(topk_distance_rows(ls[None, :], member)[0])


def topk_distance_oracle(l_star, indices, k: int, grid_step: float = 1e-3) -> float:
    """Brute force: the cost evaluated directly on a dense threshold grid
    plus every exact logit value. Small instances only."""
    ls = np.asarray(l_star, dtype=np.float64)
    if len(ls) > ORACLE_MAX_N:
        raise TooLarge(f"oracle supports n <= {ORACLE_MAX_N}")
    idx = _check_indices(len(ls), indices, k)
    inside = ls[idx]
    outside = np.delete(ls, idx)
    grid = np.arange(ls.min() - 1.0, ls.max() + 1.0 + grid_step, grid_step)
    t = np.concatenate([ls, grid])[:, None]
    cost = np.maximum(t - inside, 0.0).sum(axis=1) + np.maximum(outside - t, 0.0).sum(axis=1)
    return float(cost.min())


# --------------------------------------------------------------------------
# traces


@dataclass
class SampleBatch:
    """Columnar distance samples, for speed on large corpora."""

    step_index: np.ndarray
    value: np.ndarray
    flagged: np.ndarray
    routing: np.ndarray
    kind: DistanceKind
    routing_kind: DistanceKind = DistanceKind.TOPK

    def __len__(self) -> int:
        return len(self.value)

    @classmethod
    def empty(cls, kind: DistanceKind) -> "SampleBatch":
        return cls(np.zeros(0, np.int64), np.zeros(0), np.zeros(0, bool), np.zeros(0, bool), kind)

    def token(self) -> "SampleBatch":
        keep = ~self.routing
        return SampleBatch(self.step_index[keep], self.value[keep], self.flagged[keep], self.routing[keep], self.kind)

    def routes(self) -> "SampleBatch":
        keep = self.routing
        return SampleBatch(self.step_index[keep], self.value[keep], self.flagged[keep], self.routing[keep], self.kind)

    def samples(self) -> list[DistanceSample]:
        return [
            DistanceSample(int(i), self.routing_kind if r else self.kind, float(v), bool(f), bool(r))
            for i, v, f, r in zip(self.step_index, self.value, self.flagged, self.routing)
        ]


def _steps_to_trace(trace) -> Trace:
    return trace if isinstance(trace, Trace) else Trace.from_steps(list(trace))


def measure_trace(trace: Trace | Sequence[StepTrace], reference: Sequence[np.ndarray | None],
                  kind: DistanceKind, k: int | None = None) -> list[DistanceSample]:
    """One distance per step in step order.

    ``reference[i] is None`` marks a step with no reference counterpart;
    it gets the sentinel value and is flagged.
    """
    tr = _steps_to_trace(trace)
    if len(reference) != len(tr):
        raise ShapeError(f"{len(reference)} reference vectors for {len(tr)} steps")
    return measure_columns(tr, reference, DistanceKind(kind), k).samples()


def measure_columns(tr: Trace, reference: Sequence[np.ndarray | None], kind: DistanceKind,
                    k: int | None = None) -> SampleBatch:
    n = len(tr)
    if n == 0:
        return SampleBatch.empty(kind)
    if kind in (DistanceKind.TV, DistanceKind.KL) and tr.mode is not LoggingMode.FULL:
        raise ModeError(f"{kind.value} needs full logits, trace is {tr.mode.value}")
    tpos, rpos = tr.token_positions, tr.route_positions
    tok_ref = [reference[i] for i in tpos]
    route_ref = [reference[i] for i in rpos]
    values = np.zeros(n)
    flagged = np.zeros(n, dtype=bool)
    tv, tf = token_distances(tr, tok_ref, kind, k)
    values[tpos], flagged[tpos] = tv, tf
    if len(rpos):
        rv, rf = route_distances(tr.route_indices, route_ref)
        values[rpos], flagged[rpos] = rv, rf
    routing = tr.kinds == 1
    return SampleBatch(np.arange(n), values, flagged, routing, kind)


def _stack(refs: Sequence[np.ndarray | None], width: int) -> tuple[np.ndarray, np.ndarray]:
    missing = np.array([r is None for r in refs], dtype=bool)
    mat = np.zeros((len(refs), width))
    for i, r in enumerate(refs):
        if r is not None:
            mat[i] = r
    return mat, missing


def _members(indices: np.ndarray, width: int) -> np.ndarray:
    member = np.zeros((len(indices), width), dtype=bool)
    if len(indices):
        np.put_along_axis(member, indices, True, axis=1)
    return member


def token_distances(tr: Trace, refs: Sequence[np.ndarray | None], kind: DistanceKind,
                    k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    width = tr.token_payload.shape[1] if tr.mode is LoggingMode.FULL else (
        len(next(r for r in refs if r is not None)) if any(r is not None for r in refs) else 0)
    ref, missing = _stack(refs, width)
    return token_distances_matrix(tr.mode, tr.token_payload, ref, missing, kind, k)


def token_distances_matrix(mode: LoggingMode, payload: np.ndarray, ref: np.ndarray, missing: np.ndarray,
                           kind: DistanceKind, k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized token-step distances. Rows flagged in ``missing`` get the
    sentinel: TV 1.0, KL inf, TopK against an all-zero reference."""
    if len(payload) == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    if kind is DistanceKind.TV:
        out = tv_rows(payload, ref)
        out[missing] = TV_SENTINEL
    elif kind is DistanceKind.KL:
        out = kl_rows(payload, ref)
        out[missing] = np.inf
    else:
        if mode is LoggingMode.FULL:
            if k is None:
                raise InvalidArgument("TopK on full logits needs k")
            idx = topk_rows(payload, k)
        else:
            idx = payload
        ref = np.where(missing[:, None], 0.0, ref)
        out = topk_distance_rows(ref, _members(idx, ref.shape[1]))
    return out, missing.copy()


def route_distances(route_indices: np.ndarray, refs: Sequence[np.ndarray | None]) -> tuple[np.ndarray, np.ndarray]:
    width = len(next(r for r in refs if r is not None)) if any(r is not None for r in refs) else (
        int(route_indices.max()) + 1 if route_indices.size else 1)
    ref, missing = _stack(refs, width)
    ref = np.where(missing[:, None], 0.0, ref)
    return topk_distance_rows(ref, _members(route_indices, width)), missing


# --------------------------------------------------------------------------
# CSV


CSV_HEADER = ("step_index", "kind", "value", "flagged")


def samples_to_csv(samples: Iterable[DistanceSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for s in samples:
        w.writerow((s.step_index, DistanceKind(s.kind).value, repr(float(s.value)), int(s.flagged)))
    return buf.getvalue()


def samples_from_csv(text: str, routing: bool = False) -> list[DistanceSample]:
    rows = csv.DictReader(io.StringIO(text))
    if rows.fieldnames is None or tuple(rows.fieldnames) != CSV_HEADER:
        raise ShapeError(f"expected CSV header {CSV_HEADER}")
    return [
        DistanceSample(int(r["step_index"]), DistanceKind(r["kind"]), float(r["value"]),
                       r["flagged"] in ("1", "true", "True"), routing)
        for r in rows
    ]


def is_token_step(step: StepTrace) -> bool:
    return step.decision_kind is DecisionKind.TOKEN
