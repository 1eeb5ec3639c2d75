"""Synthetic hybrid continuous/discrete language model.

The model follows the usual decomposition of autoregressive inference into an
embedding ``E``, a continuous transformation ``F`` producing an intermediate
state and a decision vector, a discrete selection ``S``, a state update ``G``
and an output reconstruction ``D``. Weights are drawn from a counter-mode PRF
keyed by ``ModelSpec.seed``, so the full-precision reference is a pure
function of the ``ModelSpec``.

All batched matrix products go through :func:`_mm`, which reduces each output
element in a fixed order. Results for a row therefore do not depend on how
many other rows share the batch, which keeps batched serving, one-off runs and
aligned re-execution bitwise comparable.
"""

from __future__ import annotations

import json
import secrets
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from functools import lru_cache
from typing import Iterator, Sequence, Union

import numpy as np

from . import prf
from .errors import (
    AlignmentError,
    InvalidArgument,
    InvalidDecision,
    InvalidK,
    InvalidPrompt,
    ShapeError,
)

# Recurrent gain of the hidden-state maps. Near 1.45 small numerical errors
# are mildly amplified along a sequence without the dynamics turning chaotic.
STATE_GAIN = 1.45
DUMMY_MASK = -1000.0  # exp(-1000) underflows to exactly 0

Decision = Union[int, tuple]


class DecisionKind(str, Enum):
    TOKEN = "TokenSample"
    ROUTE = "ExpertRoute"

    @property
    def code(self) -> int:
        return 0 if self is DecisionKind.TOKEN else 1


class LoggingMode(str, Enum):
    FULL = "Full"
    COMPACT = "CompactTopK"


class DeviationKind(str, Enum):
    BENIGN = "Benign"
    QUANTIZED = "Quantized"
    SUBSTITUTED = "Substituted"
    OVERREPORT = "Overreport"
    FABRICATED = "Fabricated"


_KIND_BY_CODE = (DecisionKind.TOKEN, DecisionKind.ROUTE)


def _real(v) -> float:
    return float(v)


def _real_str(v: float) -> str:
    return repr(float(v))


@dataclass(frozen=True)
class ModelSpec:
    seed: int
    hidden_dim: int = 32
    vocab_size: int = 64
    num_experts: int = 0
    top_k_tokens: int = 20
    top_k_experts: int | None = None
    max_steps: int = 32

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise InvalidArgument("seed must be a 64-bit unsigned integer")
        for name in ("hidden_dim", "vocab_size", "top_k_tokens", "max_steps"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if self.vocab_size < 2:
            raise InvalidArgument("vocab_size must leave room for the stop token")
        if self.top_k_tokens > self.vocab_size:
            raise InvalidArgument("top_k_tokens exceeds vocab_size")
        if self.num_experts < 0:
            raise InvalidArgument("num_experts must be non-negative")
        if self.num_experts == 0:
            if self.top_k_experts is not None:
                raise InvalidArgument("top_k_experts requires num_experts > 0")
        elif self.top_k_experts is None or not 1 <= self.top_k_experts <= self.num_experts:
            raise InvalidArgument("top_k_experts must be in [1, num_experts]")

    @property
    def moe(self) -> bool:
        return self.num_experts > 0

    @property
    def stop_token(self) -> int:
        return self.vocab_size - 1

    @property
    def points_per_step(self) -> int:
        """Discrete decision points per generated token."""
        return 2 if self.moe else 1

    def decision_kind(self, step_index: int) -> DecisionKind:
        if self.moe and step_index % 2 == 0:
            return DecisionKind.ROUTE
        return DecisionKind.TOKEN

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise InvalidArgument(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**{k: (None if v is None else int(v)) for k, v in d.items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_json(cls, s: str) -> "ModelSpec":
        return cls.from_dict(json.loads(s))


_REAL_FIELDS = ("noise_sigma", "bias_scale", "fabrication_sigma")


@dataclass(frozen=True)
class DeviationConfig:
    """How a deployed execution departs from the full-precision reference."""

    kind: DeviationKind = DeviationKind.BENIGN
    noise_sigma: float = 0.0
    bias_scale: float = 0.0
    substitute_seed: int | None = None
    dummy_steps: int = 0
    fabrication_sigma: float = 0.0
    overreport_mode: str = "transformed"

    def __post_init__(self):
        object.__setattr__(self, "kind", DeviationKind(self.kind))
        for name in _REAL_FIELDS:
            v = float(getattr(self, name))
            if not v >= 0:
                raise InvalidArgument(f"{name} must be non-negative")
            object.__setattr__(self, name, v)
        if self.dummy_steps < 0:
            raise InvalidArgument("dummy_steps must be non-negative")
        if self.kind is DeviationKind.BENIGN and (self.bias_scale or self.dummy_steps or self.substitute_seed is not None):
            raise InvalidArgument("Benign deviation cannot carry bias, substitution or dummy steps")
        if self.kind is DeviationKind.OVERREPORT and self.dummy_steps < 1:
            raise InvalidArgument("Overreport requires dummy_steps >= 1")
        if self.kind is not DeviationKind.OVERREPORT and self.dummy_steps:
            raise InvalidArgument("dummy_steps only applies to Overreport")
        if self.overreport_mode not in ("transformed", "naive"):
            raise InvalidArgument("overreport_mode must be 'transformed' or 'naive'")

    @classmethod
    def benign(cls, sigma: float = 0.0) -> "DeviationConfig":
        return cls(DeviationKind.BENIGN, noise_sigma=sigma)

    @classmethod
    def quantized(cls, sigma: float) -> "DeviationConfig":
        return cls(DeviationKind.QUANTIZED, noise_sigma=sigma)

    @classmethod
    def substituted(cls, bias_scale: float = 0.0, sigma: float = 0.0, substitute_seed: int | None = None) -> "DeviationConfig":
        return cls(DeviationKind.SUBSTITUTED, noise_sigma=sigma, bias_scale=bias_scale, substitute_seed=substitute_seed)

    @property
    def is_reference(self) -> bool:
        """True when execution reproduces the full-precision model exactly."""
        return (
            self.noise_sigma == 0
            and self.bias_scale == 0
            and self.substitute_seed is None
            and self.kind in (DeviationKind.BENIGN, DeviationKind.QUANTIZED)
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        for name in _REAL_FIELDS:
            d[name] = _real_str(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DeviationConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise InvalidArgument(f"unknown DeviationConfig fields: {sorted(unknown)}")
        for name in _REAL_FIELDS:
            if name in d:
                d[name] = _real(d[name])
        for name in ("dummy_steps", "substitute_seed"):
            if d.get(name) is not None:
                d[name] = int(d[name])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "DeviationConfig":
        return cls.from_dict(json.loads(s))


# --------------------------------------------------------------------------
# traces


@dataclass(frozen=True)
class StepTrace:
    step_index: int
    decision_kind: DecisionKind
    decision: Decision
    rand_tag: int
    logits: np.ndarray | None = None
    top_k_indices: tuple | None = None

    def __post_init__(self):
        if (self.logits is None) == (self.top_k_indices is None):
            raise InvalidArgument("exactly one of logits / top_k_indices must be present")

    def __eq__(self, other):
        if not isinstance(other, StepTrace):
            return NotImplemented
        same_logits = (
            self.logits is None and other.logits is None
        ) or (
            self.logits is not None
            and other.logits is not None
            and np.asarray(self.logits).tobytes() == np.asarray(other.logits).tobytes()
        )
        return (
            self.step_index == other.step_index
            and self.decision_kind == other.decision_kind
            and self.decision == other.decision
            and self.rand_tag == other.rand_tag
            and self.top_k_indices == other.top_k_indices
            and same_logits
        )

    __hash__ = None


_NO_POSITIONS = np.zeros(0, dtype=np.int64)
_NO_POSITIONS.flags.writeable = False


@dataclass
class Trace:
    """Columnar storage of a decision trace.

    Token steps share one payload matrix (logits in full mode, ranked top-K
    indices in compact mode); expert-routing steps always store their index
    set, which is also their decision. ``kinds`` gives the interleaving.
    """

    mode: LoggingMode
    kinds: np.ndarray
    rand_tags: np.ndarray
    token_payload: np.ndarray
    token_decisions: np.ndarray
    route_indices: np.ndarray

    def __post_init__(self):
        self.mode = LoggingMode(self.mode)
        self.kinds = np.asarray(self.kinds, dtype=np.uint8)
        self.rand_tags = np.asarray(self.rand_tags, dtype=np.uint64)
        self.token_decisions = np.asarray(self.token_decisions, dtype=np.int64)
        n_tok = int(np.count_nonzero(self.kinds == 0))
        n_route = len(self.kinds) - n_tok
        if len(self.rand_tags) != len(self.kinds):
            raise ShapeError("rand_tags and kinds differ in length")
        if len(self.token_payload) != n_tok or len(self.token_decisions) != n_tok:
            raise ShapeError("token columns do not match kinds")
        if len(self.route_indices) != n_route:
            raise ShapeError("route column does not match kinds")

    def __len__(self) -> int:
        return len(self.kinds)

    def _positions(self) -> tuple[np.ndarray, np.ndarray]:
        # keyed on the kinds bytes so in-place edits invalidate it
        key = self.kinds.tobytes()
        cached = self.__dict__.get("_pos_cache")
        if cached is None or cached[0] != key:
            if self.kinds.any():
                cached = (key, np.flatnonzero(self.kinds == 0), np.flatnonzero(self.kinds == 1))
            else:
                cached = (key, np.arange(len(self.kinds)), _NO_POSITIONS)
            self.__dict__["_pos_cache"] = cached
        return cached[1], cached[2]

    @property
    def token_positions(self) -> np.ndarray:
        return self._positions()[0]

    @property
    def route_positions(self) -> np.ndarray:
        return self._positions()[1]

    def _column_index(self, i: int) -> int:
        return int(np.count_nonzero(self.kinds[:i] == self.kinds[i]))

    def __getitem__(self, i: int) -> StepTrace:
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        j = self._column_index(i)
        tag = int(self.rand_tags[i])
        if self.kinds[i] == 1:
            idx = tuple(int(x) for x in self.route_indices[j])
            return StepTrace(i, DecisionKind.ROUTE, idx, tag, top_k_indices=idx)
        d = int(self.token_decisions[j])
        if self.mode is LoggingMode.FULL:
            return StepTrace(i, DecisionKind.TOKEN, d, tag, logits=self.token_payload[j].copy())
        return StepTrace(i, DecisionKind.TOKEN, d, tag, top_k_indices=tuple(int(x) for x in self.token_payload[j]))

    def __iter__(self) -> Iterator[StepTrace]:
        for i in range(len(self)):
            yield self[i]

    def steps(self) -> list[StepTrace]:
        return list(self)

    def decisions(self) -> list[Decision]:
        out: list[Decision] = []
        ti = ri = 0
        for k in self.kinds:
            if k == 0:
                out.append(int(self.token_decisions[ti]))
                ti += 1
            else:
                out.append(tuple(int(x) for x in self.route_indices[ri]))
                ri += 1
        return out

    def copy(self) -> "Trace":
        return Trace(
            self.mode,
            self.kinds.copy(),
            self.rand_tags.copy(),
            self.token_payload.copy(),
            self.token_decisions.copy(),
            self.route_indices.copy(),
        )

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.mode == other.mode
            and self.kinds.tobytes() == other.kinds.tobytes()
            and self.rand_tags.tobytes() == other.rand_tags.tobytes()
            and self.token_payload.dtype == other.token_payload.dtype
            and self.token_payload.shape == other.token_payload.shape
            and self.token_payload.tobytes() == other.token_payload.tobytes()
            and self.token_decisions.tobytes() == other.token_decisions.tobytes()
            and self.route_indices.shape == other.route_indices.shape
            and self.route_indices.tobytes() == other.route_indices.tobytes()
        )

    __hash__ = None

    @classmethod
    def from_steps(cls, steps: Sequence[StepTrace], mode: LoggingMode | None = None,
                   width: int | None = None, route_width: int | None = None) -> "Trace":
        """Build columns from step records. ``width`` sizes empty token payloads."""
        tok = [s for s in steps if s.decision_kind is DecisionKind.TOKEN]
        route = [s for s in steps if s.decision_kind is DecisionKind.ROUTE]
        if mode is None:
            mode = LoggingMode.COMPACT if tok and tok[0].logits is None else LoggingMode.FULL
        mode = LoggingMode(mode)
        for pos, s in enumerate(steps):
            if s.step_index != pos:
                raise ShapeError("step indices must be 0..N-1 in order")
        if mode is LoggingMode.FULL:
            if any(s.logits is None for s in tok):
                raise ShapeError("full-mode token steps need logits")
            payload = (np.array([s.logits for s in tok], dtype=np.float64) if tok
                       else np.zeros((0, width or 0), dtype=np.float64))
        else:
            if any(s.top_k_indices is None for s in tok):
                raise ShapeError("compact-mode token steps need indices")
            payload = (np.array([s.top_k_indices for s in tok], dtype=np.int64) if tok
                       else np.zeros((0, width or 0), dtype=np.int64))
        routes = (np.array([s.top_k_indices for s in route], dtype=np.int64) if route
                  else np.zeros((0, route_width or 0), dtype=np.int64))
        return cls(
            mode,
            np.array([s.decision_kind.code for s in steps], dtype=np.uint8),
            np.array([s.rand_tag for s in steps], dtype=np.uint64),
            payload,
            np.array([s.decision for s in tok], dtype=np.int64),
            routes,
        )


@dataclass
class ExecutionResult:
    output_tokens: list[int]
    reported_token_count: int
    trace: Trace
    seed_r: bytes
    # generation steps the deployed model really executed (excludes dummies)
    executed_steps: int = field(default=0)


def reconstruct(token_decisions: Sequence[int], stop_token: int) -> tuple[list[int], int]:
    """Output reconstruction ``D``: tokens before the first stop, and the count."""
    d = np.asarray(token_decisions, dtype=np.int64).reshape(-1)
    hit = d == stop_token
    cut = int(hit.argmax()) if hit.any() else len(d)
    return d[:cut].tolist(), len(d)


# --------------------------------------------------------------------------
# weights


@dataclass(frozen=True)
class _Weights:
    tok_emb: np.ndarray
    pos_freq: np.ndarray
    pos_phase: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wg: np.ndarray
    out_emb: np.ndarray
    Wr: np.ndarray | None
    experts: np.ndarray | None


def _tensor(seed: int, name: str, shape: tuple) -> np.ndarray:
    return prf.generator("weights", seed, name).standard_normal(shape)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


@lru_cache(maxsize=64)
def _weights(seed: int, H: int, V: int, E: int) -> _Weights:
    g = STATE_GAIN / np.sqrt(H)
    w = _Weights(
        tok_emb=_tensor(seed, "tok_emb", (V, H)),
        pos_freq=0.2 + 0.3 * np.abs(_tensor(seed, "pos_freq", (H,))),
        pos_phase=np.pi * _tensor(seed, "pos_phase", (H,)),
        W1=_tensor(seed, "W1", (H, H)) * g,
        b1=_tensor(seed, "b1", (H,)) * 0.2,
        # unit-norm rows: isotropic state noise of std s becomes std s per logit
        W2=_unit_rows(_tensor(seed, "W2", (V, H))),
        b2=_tensor(seed, "b2", (V,)),
        Wg=_tensor(seed, "Wg", (H, H)) * g,
        out_emb=_tensor(seed, "out_emb", (V, H)) * 0.5,
        Wr=_unit_rows(_tensor(seed, "Wr", (E, H))) if E else None,
        experts=_tensor(seed, "experts", (E, H, H)) / np.sqrt(H) if E else None,
    )
    for a in asdict(w).values():
        if a is not None:
            a.setflags(write=False)
    return w


def weights_for(spec: ModelSpec, seed: int | None = None) -> _Weights:
    return _weights(spec.seed if seed is None else seed, spec.hidden_dim, spec.vocab_size, spec.num_experts)


@lru_cache(maxsize=64)
def _offset_dirs(key_seed: int, H: int, V: int, E: int) -> tuple[np.ndarray, np.ndarray | None]:
    tok = _tensor(key_seed, "substitution-offset", (V, H))
    route = _tensor(key_seed, "substitution-offset-route", (E, H)) if E else None
    return tok, route


def _mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Row-wise ``x @ w.T`` with a batch-independent reduction order."""
    return np.einsum("bk,vk->bv", x, w, optimize=False)


def _offset(z: np.ndarray, scale: float) -> np.ndarray:
    rms = np.sqrt(np.einsum("bv,bv->b", z, z, optimize=False) / z.shape[1])
    return scale * z / rms[:, None]


# --------------------------------------------------------------------------
# selection


def _check_k(n: int, k: int) -> None:
    if not 1 <= k <= n:
        raise InvalidK(f"k={k} must be in [1, {n}]")


def topk_rows(logits: np.ndarray, k: int) -> np.ndarray:
    """Ranked top-k indices per row; equal values rank lower index first."""
    neg = -logits
    order = np.argsort(neg, axis=1)[:, : k + 1]
    # an unstable sort is exact unless the leading k+1 values contain a tie
    head = np.take_along_axis(neg, order, axis=1)
    tied = (head[:, 1:] == head[:, :-1]).any(axis=1)
    order = order[:, :k]
    if tied.any():
        order[tied] = np.argsort(neg[tied], axis=1, kind="stable")[:, :k]
    return order


def select_rows(logits: np.ndarray, u: np.ndarray, k: int) -> np.ndarray:
    """Top-k restricted categorical draw per row, driven by uniforms ``u``."""
    order = topk_rows(logits, k)
    top = np.take_along_axis(logits, order, axis=1)
    w = np.exp(top - top[:, :1])
    cdf = np.cumsum(w, axis=1)
    j = np.count_nonzero(cdf <= (u * cdf[:, -1])[:, None], axis=1)
    j = np.minimum(j, k - 1)
    return order[np.arange(len(order)), j]


def select(logits, rand_tag: int, k: int) -> int:
    """Discrete token choice ``S``: sample among the k largest logits."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_k(logits.shape[-1], k)
    u = np.array([prf.tag_uniform(rand_tag)])
    return int(select_rows(logits[None, :], u, k)[0])


def route(logits, k: int) -> tuple:
    """Expert routing: the ranked top-k experts, no sampling."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_k(logits.shape[-1], k)
    return tuple(int(x) for x in topk_rows(logits[None, :], k)[0])


# --------------------------------------------------------------------------
# continuous maps, batched over rows


def _validate_prompt(spec: ModelSpec, prompt) -> np.ndarray:
    p = np.asarray(prompt)
    if p.ndim != 1 or len(p) == 0:
        raise InvalidPrompt("prompt must be a non-empty token sequence")
    if not np.issubdtype(p.dtype, np.integer):
        raise InvalidPrompt("prompt tokens must be integers")
    if (p < 0).any() or (p >= spec.vocab_size).any():
        raise InvalidPrompt(f"token id out of range [0, {spec.vocab_size})")
    return p.astype(np.int64)


def _validate_prompts(spec: ModelSpec, prompts) -> list[np.ndarray]:
    ps = [np.asarray(p) for p in prompts]
    if all(p.ndim == 1 and len(p) and np.issubdtype(p.dtype, np.integer) for p in ps):
        flat = np.concatenate(ps)
        if not ((flat < 0).any() or (flat >= spec.vocab_size).any()):
            return [p.astype(np.int64, copy=False) for p in ps]
    return [_validate_prompt(spec, p) for p in prompts]


def _embed_rows(w: _Weights, prompts: list[np.ndarray]) -> np.ndarray:
    H = w.tok_emb.shape[1]
    lengths = np.array([len(p) for p in prompts])
    order = np.argsort(-lengths, kind="stable")
    srt = lengths[order]
    L = int(srt[0])
    # rows sorted by length: the rows still active at position j form a prefix
    active = np.searchsorted(-srt, -np.arange(L), side="left")
    pad = np.zeros((len(prompts), L), dtype=np.int64)
    pad[np.arange(L) < srt[:, None]] = np.concatenate([prompts[i] for i in order])
    acc = np.zeros((len(prompts), H))
    for j in range(L):
        m = active[j]
        pos = 1.0 + 0.5 * np.sin(j * w.pos_freq + w.pos_phase)
        acc[:m] += w.tok_emb[pad[:m, j]] * pos
    out = np.empty_like(acc)
    out[order] = np.tanh(acc / np.sqrt(srt)[:, None])
    return out


def _token_forward(w: _Weights, h: np.ndarray, noise: np.ndarray | None, sigma: float,
                   offset: tuple[np.ndarray, float] | None) -> tuple[np.ndarray, np.ndarray]:
    ht = np.tanh(_mm(h, w.W1) + w.b1)
    if sigma and noise is not None:
        ht = ht + sigma * noise
    logits = _mm(ht, w.W2) + w.b2
    if offset is not None:
        logits = logits + _offset(_mm(ht, offset[0]), offset[1])
    return ht, logits


def _token_update(w: _Weights, ht: np.ndarray, d: np.ndarray) -> np.ndarray:
    return np.tanh(_mm(ht, w.Wg) + w.out_emb[d])


def _route_forward(w: _Weights, h: np.ndarray, noise: np.ndarray | None, sigma: float,
                   offset: tuple[np.ndarray, float] | None) -> tuple[np.ndarray, np.ndarray]:
    ht = h + sigma * noise if (sigma and noise is not None) else h
    logits = _mm(ht, w.Wr)
    if offset is not None:
        logits = logits + _offset(_mm(ht, offset[0]), offset[1])
    return ht, logits


def _route_update(w: _Weights, ht: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    mats = w.experts[chosen]  # (B, k, H, H)
    y = np.einsum("bkij,bj->bki", mats, ht, optimize=False)
    acc = y[:, 0]
    for j in range(1, y.shape[1]):
        acc = acc + y[:, j]
    return 0.5 * ht + 0.5 * np.tanh(acc / y.shape[1])


def _token_dummy_logits(spec: ModelSpec) -> np.ndarray:
    ell = np.full(spec.vocab_size, DUMMY_MASK)
    ell[spec.stop_token] = 0.0
    return ell


def dummy_decision(spec: ModelSpec, kind: DecisionKind) -> Decision:
    """The fixed dummy decision appended by the over-reporting transform."""
    if kind is DecisionKind.ROUTE:
        return tuple(range(spec.top_k_experts))
    return spec.stop_token


# --------------------------------------------------------------------------
# single-step public API


def embed(spec: ModelSpec, prompt) -> np.ndarray:
    """Initial hidden state ``h0 = E(x)``."""
    p = _validate_prompt(spec, prompt)
    return _embed_rows(weights_for(spec), [p])[0]


def _deployed(spec: ModelSpec, dev: DeviationConfig):
    w = weights_for(spec, dev.substitute_seed)
    tok_off = route_off = None
    if dev.bias_scale > 0:
        key = spec.seed if dev.substitute_seed is None else dev.substitute_seed
        dirs_t, dirs_r = _offset_dirs(key, spec.hidden_dim, spec.vocab_size, spec.num_experts)
        tok_off = (dirs_t, dev.bias_scale)
        route_off = (dirs_r, dev.bias_scale) if dirs_r is not None else None
    return w, tok_off, route_off


def step(spec: ModelSpec, dev: DeviationConfig, state, step_index: int,
         rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Continuous transformation ``F`` at decision point ``step_index``.

    Returns the intermediate state and the decision vector (token logits, or
    expert logits at routing points). Noise is drawn from ``rng``, or from a
    fresh entropy source when none is given.
    """
    h = np.asarray(state, dtype=np.float64)
    if h.shape != (spec.hidden_dim,):
        raise ShapeError(f"state must have shape ({spec.hidden_dim},), got {h.shape}")
    w, tok_off, route_off = _deployed(spec, dev)
    noise = None
    if dev.noise_sigma:
        rng = rng if rng is not None else np.random.default_rng()
        noise = rng.standard_normal((1, spec.hidden_dim))
    if spec.decision_kind(step_index) is DecisionKind.ROUTE:
        ht, ell = _route_forward(w, h[None], noise, dev.noise_sigma, route_off)
    else:
        ht, ell = _token_forward(w, h[None], noise, dev.noise_sigma, tok_off)
    return ht[0], ell[0]


def update(spec: ModelSpec, intermediate, decision: Decision, *, dummy: bool = False) -> np.ndarray:
    """State update ``G``. Integer decisions are tokens, tuples are expert sets.

    With ``dummy=True`` this is the over-reporting update, which returns the
    state unchanged.
    """
    ht = np.asarray(intermediate, dtype=np.float64)
    if ht.shape != (spec.hidden_dim,):
        raise ShapeError(f"intermediate must have shape ({spec.hidden_dim},)")
    if dummy:
        return ht.copy()
    w = weights_for(spec)
    if isinstance(decision, (tuple, list, np.ndarray)):
        chosen = _check_route_decision(spec, decision)
        return _route_update(w, ht[None], chosen[None])[0]
    d = _check_token_decision(spec, decision)
    return _token_update(w, ht[None], np.array([d]))[0]


def _check_token_decision(spec: ModelSpec, d) -> int:
    if isinstance(d, (bool, np.bool_)) or not isinstance(d, (int, np.integer)):
        raise InvalidDecision(f"token decision must be an integer, got {d!r}")
    if not 0 <= int(d) < spec.vocab_size:
        raise InvalidDecision(f"token id {d} out of range")
    return int(d)


def _check_route_decision(spec: ModelSpec, d) -> np.ndarray:
    if not spec.moe:
        raise InvalidDecision("model has no experts")
    arr = np.asarray(d)
    if (arr.ndim != 1 or len(arr) != spec.top_k_experts or not np.issubdtype(arr.dtype, np.integer)
            or len(set(arr.tolist())) != len(arr) or (arr < 0).any() or (arr >= spec.num_experts).any()):
        raise InvalidDecision(f"invalid expert set {d!r}")
    return arr.astype(np.int64)


# --------------------------------------------------------------------------
# batched execution


def _noise_block(noise_key: int, n_points: int, H: int) -> np.ndarray:
    return prf.normals(prf.derive_key("noise", noise_key), (n_points, H))


def run(spec: ModelSpec, dev: DeviationConfig, prompt, seed_r: bytes,
        logging: LoggingMode = LoggingMode.FULL, noise_key: int | None = None) -> ExecutionResult:
    """Autoregressive execution of the deployed model on one prompt."""
    return run_batch(spec, dev, [prompt], [seed_r], [noise_key], logging)[0]


def run_batch(spec: ModelSpec, dev: DeviationConfig, prompts: Sequence, seeds: Sequence[bytes],
              noise_keys: Sequence[int | None] | None = None,
              logging: LoggingMode = LoggingMode.FULL) -> list[ExecutionResult]:
    """Execute many requests in lockstep; row results match one-off runs."""
    logging = LoggingMode(logging)
    B = len(prompts)
    if B == 0:
        return []
    if len(seeds) != B:
        raise ShapeError("one seed per prompt required")
    noise_keys = list(noise_keys) if noise_keys is not None else [None] * B
    noise_keys = [secrets.randbits(128) if k is None else k for k in noise_keys]
    ps = _validate_prompts(spec, prompts)
    H, V, P = spec.hidden_dim, spec.vocab_size, spec.points_per_step
    n_points = spec.max_steps * P
    extra = dev.dummy_steps * P if dev.overreport_mode == "transformed" else 0
    w, tok_off, route_off = _deployed(spec, dev)

    tags = np.stack([prf.rand_tags(s, n_points + extra) for s in seeds])
    u = prf.tag_uniform(tags[:, :n_points])
    sigma = dev.noise_sigma
    noise = np.stack([_noise_block(k, n_points, H) for k in noise_keys]) if sigma else None

    h = _embed_rows(w, ps)
    tok_logits = np.zeros((B, spec.max_steps, V))
    tok_dec = np.zeros((B, spec.max_steps), dtype=np.int64)
    ke = spec.top_k_experts or 0
    route_dec = np.zeros((B, spec.max_steps, ke), dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    active = np.ones(B, dtype=bool)
    for g in range(spec.max_steps):
        if not active.any():
            break
        if spec.moe:
            i = P * g
            ht, rl = _route_forward(w, h, None if noise is None else noise[:, i], sigma, route_off)
            chosen = topk_rows(rl, ke)
            h = _route_update(w, ht, chosen)
            route_dec[:, g] = chosen
        i = P * g + P - 1
        ht, ell = _token_forward(w, h, None if noise is None else noise[:, i], sigma, tok_off)
        d = select_rows(ell, u[:, i], spec.top_k_tokens)
        h = _token_update(w, ht, d)
        tok_logits[:, g] = ell
        tok_dec[:, g] = d
        lengths += active
        active &= d != spec.stop_token

    results = []
    for b in range(B):
        n = int(lengths[b])
        results.append(_finish(spec, dev, logging, ps[b], seeds[b], noise_keys[b], tags[b],
                               tok_logits[b, :n], tok_dec[b, :n], route_dec[b, :n]))
    if dev.kind is DeviationKind.FABRICATED:
        results = _fabricate(spec, dev, logging, ps, results, noise_keys)
    return results


def _finish(spec, dev, logging, prompt, seed_r, noise_key, tags, logits, tok_dec, route_dec) -> ExecutionResult:
    n = len(tok_dec)
    P = spec.points_per_step
    y, T = reconstruct(tok_dec, spec.stop_token)
    executed = n
    if dev.kind is DeviationKind.OVERREPORT:
        K = dev.dummy_steps
        if dev.overreport_mode == "transformed":
            dummy = np.broadcast_to(_token_dummy_logits(spec), (K, spec.vocab_size))
            logits = np.concatenate([logits, dummy])
            tok_dec = np.concatenate([tok_dec, np.full(K, spec.stop_token, dtype=np.int64)])
            if spec.moe:
                route_dec = np.concatenate([route_dec, np.broadcast_to(np.arange(spec.top_k_experts), (K, spec.top_k_experts))])
            n += K
            y2, T = reconstruct(tok_dec, spec.stop_token)
            assert y2 == y
        else:
            T = T + K
    kinds = np.tile(np.array([1, 0], dtype=np.uint8), n) if spec.moe else np.zeros(n, dtype=np.uint8)
    if not spec.moe:
        route_dec = np.zeros((0, 0), dtype=np.int64)
    payload = logits.copy() if logging is LoggingMode.FULL else topk_rows(logits, spec.top_k_tokens)
    trace = Trace(logging, kinds, tags[: n * P].copy(), payload, tok_dec.copy(), route_dec.copy())
    return ExecutionResult(y, T, trace, seed_r, executed)


def _fabricate(spec, dev, logging, prompts, results, noise_keys) -> list[ExecutionResult]:
    """Replace committed logits with reference logits plus fresh noise."""
    decisions = [(r.trace.token_decisions, r.trace.route_indices) for r in results]
    refs = aligned_batch(spec, prompts, decisions)
    out = []
    for r, (tok_ref, route_ref), key in zip(results, refs, noise_keys):
        g = prf.generator("fabricate", key)
        fake = tok_ref + dev.fabrication_sigma * g.standard_normal(tok_ref.shape)
        tr = r.trace
        tok_tags = tr.rand_tags[tr.token_positions]
        fake_dec = select_rows(fake, prf.tag_uniform(tok_tags), spec.top_k_tokens) if len(fake) else tr.token_decisions
        route_idx = tr.route_indices
        if spec.moe and len(route_ref):
            fake_r = route_ref + dev.fabrication_sigma * g.standard_normal(route_ref.shape)
            route_idx = topk_rows(fake_r, spec.top_k_experts)
        payload = fake if logging is LoggingMode.FULL else topk_rows(fake, spec.top_k_tokens)
        trace = Trace(logging, tr.kinds, tr.rand_tags, payload, fake_dec, route_idx)
        out.append(ExecutionResult(r.output_tokens, r.reported_token_count, trace, r.seed_r, r.executed_steps))
    return out


# --------------------------------------------------------------------------
# aligned re-execution of the reference


def _split_decisions(spec: ModelSpec, decisions: Sequence[Decision]) -> tuple[np.ndarray, np.ndarray]:
    toks, routes = [], []
    for i, d in enumerate(decisions):
        try:
            if spec.decision_kind(i) is DecisionKind.ROUTE:
                routes.append(_check_route_decision(spec, d))
            else:
                toks.append(_check_token_decision(spec, d))
        except InvalidDecision as e:
            raise AlignmentError(i, str(e)) from None
    if spec.moe and len(routes) != len(toks):
        raise AlignmentError(len(decisions), "trace must end on a token decision")
    if not spec.moe:
        return np.array(toks, dtype=np.int64), np.zeros((0, 0), dtype=np.int64)
    return np.array(toks, dtype=np.int64), np.array(routes, dtype=np.int64).reshape(-1, spec.top_k_experts)


def aligned_batch(spec: ModelSpec, prompts: Sequence, decisions: Sequence[tuple[np.ndarray, np.ndarray]]
                  ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Reference logits under enforced decisions, for many requests.

    ``decisions`` holds ``(token_decisions, route_indices)`` per request.
    Returns ``(token_logits, route_logits)`` per request. Enforced steps run
    to the end of the list even past a stop token or ``max_steps``.
    """
    B = len(prompts)
    if B == 0:
        return []
    w = weights_for(spec)
    ps = _validate_prompts(spec, prompts)
    lengths = np.array([len(t) for t, _ in decisions], dtype=np.int64)
    G = int(lengths.max()) if B else 0
    ke = spec.top_k_experts or 0
    tok = np.zeros((B, G), dtype=np.int64)
    rts = np.tile(np.arange(ke, dtype=np.int64), (B, G, 1))
    for b, (t, r) in enumerate(decisions):
        tok[b, : len(t)] = t
        if spec.moe:
            rts[b, : len(t)] = r
    h = _embed_rows(w, ps)
    tok_ref = np.zeros((B, G, spec.vocab_size))
    route_ref = np.zeros((B, G, spec.num_experts))
    for g in range(G):
        if spec.moe:
            ht, rl = _route_forward(w, h, None, 0.0, None)
            route_ref[:, g] = rl
            h = _route_update(w, ht, rts[:, g])
        ht, ell = _token_forward(w, h, None, 0.0, None)
        tok_ref[:, g] = ell
        h = _token_update(w, ht, tok[:, g])
    return [(tok_ref[b, : lengths[b]].copy(), route_ref[b, : lengths[b]].copy() if spec.moe
             else np.zeros((lengths[b], 0))) for b in range(B)]


def reexecute_aligned(spec: ModelSpec, prompt, decisions: Sequence[Decision]) -> list[np.ndarray]:
    """Reference logits at every decision point, forcing the given decisions."""
    toks, routes = _split_decisions(spec, decisions)
    (tok_ref, route_ref), = aligned_batch(spec, [prompt], [(toks, routes)])
    out: list[np.ndarray] = []
    for g in range(len(toks)):
        if spec.moe:
            out.append(route_ref[g])
        out.append(tok_ref[g])
    return out


def transform_overreport(spec: ModelSpec, k_dummy: int,
                         base: DeviationConfig | None = None) -> tuple[ModelSpec, DeviationConfig]:
    """Deployed configuration that appends ``k_dummy`` identity steps.

    The extra steps end in the dummy decision, leave the state untouched and
    inflate only the reported token count.
    """
    if k_dummy < 1:
        raise InvalidArgument("k_dummy must be at least 1")
    sigma = base.noise_sigma if base is not None else 0.0
    return spec, DeviationConfig(DeviationKind.OVERREPORT, noise_sigma=sigma, dummy_steps=k_dummy)


def dummy_step(spec: ModelSpec, state) -> tuple[np.ndarray, np.ndarray]:
    """``F'`` for a dummy token step: passes the state through."""
    h = np.asarray(state, dtype=np.float64)
    return h.copy(), _token_dummy_logits(spec)


def with_max_steps(spec: ModelSpec, max_steps: int) -> ModelSpec:
    return replace(spec, max_steps=max_steps)
