"""Hash commitments to the reference model and to per-request traces.

Byte layout of a trace opening (all integers little-endian)::

    u32 len(scheme) | scheme bytes
    u32 len(seed_r) | seed_r
    u8  mode                       0 = full logits, 1 = compact top-K
    u32 n_steps
    n_steps records, in step order:
        u32 step_index
        u8  kind                   0 = token sample, 1 = expert route
        u8  payload_type           0 = f64 logits, 1 = u32 indices
        u32 payload_count
        payload_count x (f64 | u32)
        u32 decision_count
        decision_count x u32
        u64 rand_tag

Every variable-length field carries its own count, so the encoding is
injective over valid traces. The model commitment hashes an architecture tag
followed by each ``ModelSpec`` field in declaration order as
``u8 present | u64 value``.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from functools import lru_cache
from dataclasses import dataclass, fields
from typing import Sequence, Union

import numpy as np

from .errors import InvalidArgument, ShapeError, UnsupportedScheme
from .model import DecisionKind, LoggingMode, ModelSpec, StepTrace, Trace, STATE_GAIN

SCHEME = "sha256-v1"
ARCH_TAG = f"lddaudit-hybrid-v1;gain={STATE_GAIN!r}".encode()


@dataclass(frozen=True)
class Commitment:
    digest: bytes
    scheme_id: str = SCHEME

    def __post_init__(self):
        if len(self.digest) != 32:
            raise InvalidArgument("digest must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def from_hex(cls, s: str, scheme_id: str = SCHEME) -> "Commitment":
        return cls(bytes.fromhex(s), scheme_id)


@dataclass(frozen=True)
class TraceOpening:
    seed_r: bytes
    trace: Trace

    def __post_init__(self):
        if not isinstance(self.trace, Trace):
            object.__setattr__(self, "trace", Trace.from_steps(list(self.trace)))


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


@lru_cache(maxsize=256)
def _record_dtype(kind: int, payload: np.dtype, width: int, dec_width: int) -> np.dtype:
    return np.dtype([
        ("step_index", "<u4"), ("kind", "u1"), ("ptype", "u1"), ("pcount", "<u4"),
        ("payload", payload, (width,)), ("dcount", "<u4"), ("decision", "<u4", (dec_width,)),
        ("rand_tag", "<u8"),
    ])


@lru_cache(maxsize=256)
def _template(dt: np.dtype, kind: int, ptype: int, n: int) -> np.ndarray:
    rec = np.zeros(n, dtype=dt)
    rec["kind"] = kind
    rec["ptype"] = ptype
    rec["pcount"] = dt["payload"].shape[0]
    rec["dcount"] = dt["decision"].shape[0]
    rec.flags.writeable = False
    return rec


def _fill(dt: np.dtype, pos: np.ndarray, tags: np.ndarray, kind: int, ptype: int,
          payload: np.ndarray, decision: np.ndarray) -> np.ndarray:
    n = len(pos)
    if n <= 4096:
        rec = _template(dt, kind, ptype, n).copy()
    else:
        rec = np.zeros(n, dtype=dt)
        rec["kind"], rec["ptype"] = kind, ptype
        rec["pcount"], rec["dcount"] = payload.shape[1], decision.shape[1]
    rec["step_index"] = pos
    rec["payload"] = payload
    rec["decision"] = decision
    rec["rand_tag"] = tags[pos]
    return rec


def _records(trace: Trace) -> bytes:
    n = len(trace)
    if n == 0:
        return b""
    full = trace.mode is LoggingMode.FULL
    tpos, rpos = trace.token_positions, trace.route_positions
    tw = trace.token_payload.shape[1]
    rw = trace.route_indices.shape[1] if len(rpos) else 0
    tdt = _record_dtype(0, np.dtype("<f8") if full else np.dtype("<u4"), tw, 1)
    tok = _fill(tdt, tpos, trace.rand_tags, 0, 0 if full else 1, trace.token_payload,
                trace.token_decisions[:, None])
    if not len(rpos):
        return tok.tobytes()
    rdt = _record_dtype(1, np.dtype("<u4"), rw, rw)
    route = _fill(rdt, rpos, trace.rand_tags, 1, 1, trace.route_indices, trace.route_indices)
    if len(rpos) == len(tpos) and (rpos == tpos - 1).all():
        # the usual route, token, route, token ... schedule
        pair = np.empty(len(tpos), dtype=[("r", rdt), ("t", tdt)])
        pair["r"] = route
        pair["t"] = tok
        return pair.tobytes()
    sizes = np.where(trace.kinds == 0, tdt.itemsize, rdt.itemsize)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    buf = np.empty(int(sizes.sum()), dtype=np.uint8)
    for pos, rec in ((tpos, tok), (rpos, route)):
        if len(pos):
            idx = offsets[pos][:, None] + np.arange(rec.dtype.itemsize)
            buf[idx] = rec.view(np.uint8).reshape(len(pos), rec.dtype.itemsize)
    return buf.tobytes()


def encode_step(step: StepTrace) -> bytes:
    """Reference encoder for one record; must match the vectorized path."""
    if step.logits is not None:
        ptype, payload = 0, np.asarray(step.logits, dtype="<f8")
    else:
        ptype, payload = 1, np.asarray(step.top_k_indices, dtype="<u4")
    dec = step.decision if isinstance(step.decision, tuple) else (step.decision,)
    kind = 0 if step.decision_kind is DecisionKind.TOKEN else 1
    return b"".join([
        struct.pack("<IBBI", step.step_index, kind, ptype, len(payload)),
        payload.tobytes(),
        _u32(len(dec)),
        np.asarray(dec, dtype="<u4").tobytes(),
        struct.pack("<Q", step.rand_tag),
    ])


def serialize_opening(opening: TraceOpening, scheme_id: str = SCHEME) -> bytes:
    s = scheme_id.encode()
    tr = opening.trace
    head = b"".join([
        _u32(len(s)), s,
        _u32(len(opening.seed_r)), opening.seed_r,
        bytes([0 if tr.mode is LoggingMode.FULL else 1]),
        _u32(len(tr)),
    ])
    return head + _records(tr)


def deserialize_opening(data: bytes) -> tuple[str, TraceOpening]:
    """Inverse of :func:`serialize_opening`."""
    mv = memoryview(data)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(mv):
            raise ShapeError("truncated opening")
        out = mv[off:off + n]
        off += n
        return out

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    scheme = bytes(take(u32())).decode()
    seed = bytes(take(u32()))
    mode = LoggingMode.FULL if take(1)[0] == 0 else LoggingMode.COMPACT
    steps = []
    for _ in range(u32()):
        i, kind, ptype, pcount = struct.unpack("<IBBI", take(10))
        if ptype == 0:
            payload = np.frombuffer(take(8 * pcount), dtype="<f8").astype(np.float64)
        else:
            payload = tuple(int(x) for x in np.frombuffer(take(4 * pcount), dtype="<u4"))
        dcount = u32()
        dec = tuple(int(x) for x in np.frombuffer(take(4 * dcount), dtype="<u4"))
        tag = struct.unpack("<Q", take(8))[0]
        if kind == 0:
            d = dec[0]
            if ptype == 0:
                steps.append(StepTrace(i, DecisionKind.TOKEN, d, tag, logits=payload))
            else:
                steps.append(StepTrace(i, DecisionKind.TOKEN, d, tag, top_k_indices=payload))
        else:
            steps.append(StepTrace(i, DecisionKind.ROUTE, dec, tag, top_k_indices=payload))
    if off != len(mv):
        raise ShapeError("trailing bytes after opening")
    return scheme, TraceOpening(seed, Trace.from_steps(steps, mode))


def serialize_model(spec: ModelSpec) -> bytes:
    parts = [_u32(len(ARCH_TAG)), ARCH_TAG]
    for f in fields(ModelSpec):
        v = getattr(spec, f.name)
        parts.append(b"\x00" + bytes(8) if v is None else b"\x01" + struct.pack("<Q", v))
    return b"".join(parts)


def _sha(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@lru_cache(maxsize=64)
def commit_model(spec: ModelSpec) -> Commitment:
    return Commitment(_sha(serialize_model(spec)))


def commit_trace(opening: TraceOpening) -> Commitment:
    return Commitment(_sha(serialize_opening(opening)))


def _head(opening: TraceOpening, scheme: bytes) -> bytes:
    tr = opening.trace
    seed = opening.seed_r
    return struct.pack(f"<I{len(scheme)}sI{len(seed)}sBI", len(scheme), scheme, len(seed), seed,
                       0 if tr.mode is LoggingMode.FULL else 1, len(tr))


def _dense(tr: Trace) -> bool:
    n = len(tr)
    return (n > 0 and not tr.kinds.any() and len(tr.rand_tags) == n and len(tr.token_payload) == n
            and len(tr.token_decisions) == n)


def commit_traces(openings: Sequence[TraceOpening]) -> list[Commitment]:
    """``commit_trace`` for many openings; dense traces sharing a mode and
    payload width are serialized in one pass."""
    out: list[Commitment | None] = [None] * len(openings)
    groups: dict[tuple, list[int]] = {}
    for i, op in enumerate(openings):
        tr = op.trace
        if _dense(tr):
            groups.setdefault((tr.mode, tr.token_payload.shape[1], tr.token_payload.dtype), []).append(i)
        else:
            out[i] = commit_trace(op)
    scheme = SCHEME.encode()
    for (mode, width, _), idx in groups.items():
        full = mode is LoggingMode.FULL
        traces = [openings[i].trace for i in idx]
        lens = np.array([len(t) for t in traces])
        dt = _record_dtype(0, np.dtype("<f8") if full else np.dtype("<u4"), width, 1)
        total = int(lens.sum())
        rec = np.zeros(total, dtype=dt)
        rec["ptype"] = 0 if full else 1
        rec["pcount"], rec["dcount"] = width, 1
        ends = np.cumsum(lens)
        rec["step_index"] = np.arange(total) - np.repeat(ends - lens, lens)
        rec["payload"] = np.concatenate([t.token_payload for t in traces])
        rec["decision"] = np.concatenate([t.token_decisions for t in traces])[:, None]
        rec["rand_tag"] = np.concatenate([t.rand_tags for t in traces])
        raw = memoryview(rec.view(np.uint8).reshape(-1))
        size = dt.itemsize
        for i, end, n in zip(idx, ends.tolist(), lens.tolist()):
            h = hashlib.sha256(_head(openings[i], scheme))
            h.update(raw[(end - n) * size:end * size])
            out[i] = Commitment(h.digest())
    return out  # type: ignore[return-value]


def verify(commitment: Commitment, opening: Union[TraceOpening, ModelSpec]) -> bool:
    if commitment.scheme_id != SCHEME:
        raise UnsupportedScheme(commitment.scheme_id)
    if isinstance(opening, ModelSpec):
        digest = commit_model(opening).digest
    else:
        digest = commit_trace(opening).digest
    return hmac.compare_digest(digest, commitment.digest)


def per_token_bytes(opening: TraceOpening) -> float:
    """Serialized bytes per generated token, header amortized."""
    n_tok = len(opening.trace.token_positions)
    if n_tok == 0:
        raise InvalidArgument("trace has no token steps")
    return len(serialize_opening(opening)) / n_tok


def steps_bytes(steps: Sequence[StepTrace]) -> bytes:
    return b"".join(encode_step(s) for s in steps)
