"""Logit distance distribution statistics and the per-request rule."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import EmptyTrace, InvalidArgument
from .metrics import DistanceSample, SampleBatch

TAIL_THRESHOLDS = (0.1, 0.2, 0.3)

Samples = Union[Sequence[DistanceSample], SampleBatch, np.ndarray]


def effective_values(samples: Samples) -> np.ndarray:
    """Token-stream values with flagged steps mapped to +inf.

    Flagged steps have no reference counterpart; they exceed every
    threshold. Routing samples are dropped: they are reported, not decided on.
    """
    if isinstance(samples, np.ndarray):
        return samples.astype(np.float64, copy=False)
    if isinstance(samples, SampleBatch):
        keep = ~samples.routing
        return np.where(samples.flagged[keep], np.inf, samples.value[keep])
    return np.array([math.inf if s.flagged else s.value for s in samples if not s.routing], dtype=np.float64)


def tail_statistic(samples: Samples, t1: float) -> float:
    """p(t1): fraction of token steps whose distance is strictly above t1."""
    v = effective_values(samples)
    if len(v) == 0:
        raise EmptyTrace("no token-step samples")
    return float(np.count_nonzero(v > t1) / len(v))


@dataclass(frozen=True)
class RequestVerdict:
    p_t1: float
    t1: float
    t2: float
    flagged: bool
    num_steps: int


def decide(samples: Samples, t1: float, t2: float) -> RequestVerdict:
    if t1 < 0 or not 0 <= t2 <= 1:
        raise InvalidArgument("need t1 >= 0 and t2 in [0, 1]")
    v = effective_values(samples)
    if len(v) == 0:
        raise EmptyTrace("no token-step samples")
    p = float(np.count_nonzero(v > t1) / len(v))
    return RequestVerdict(p, t1, t2, p > t2, len(v))


def p_values(requests: Sequence[np.ndarray], t1: float) -> np.ndarray:
    """p(t1) per request, from arrays of effective values."""
    return np.array([np.count_nonzero(v > t1) / len(v) for v in requests], dtype=np.float64)


@dataclass
class LddHistogram:
    bin_edges: list[float]
    counts: list[int]
    total: int
    tail_probs: dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "bin_edges": self.bin_edges,
            "counts": self.counts,
            "total": self.total,
            "tail_probs": {repr(k): v for k, v in self.tail_probs.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "LddHistogram":
        counts = [int(c) for c in d["counts"]]
        return cls([float(e) for e in d["bin_edges"]], counts, int(d.get("total", sum(counts))),
                   {float(k): float(v) for k, v in d["tail_probs"].items()})


def build_histogram(samples: Samples, bins: int = 50) -> LddHistogram:
    """Equal-width histogram over [0, max(1, largest finite sample)].

    Infinite sentinel values land in the last bin.
    """
    if bins < 2:
        raise InvalidArgument("bins must be >= 2")
    v = effective_values(samples)
    if len(v) == 0:
        raise EmptyTrace("no samples")
    finite = v[np.isfinite(v)]
    hi = max(1.0, float(finite.max()) if len(finite) else 1.0)
    edges = np.linspace(0.0, hi, bins + 1)
    counts, _ = np.histogram(np.minimum(v, hi), bins=edges)
    tails = {t: float(np.count_nonzero(v > t) / len(v)) for t in TAIL_THRESHOLDS}
    return LddHistogram(edges.tolist(), counts.astype(int).tolist(), int(len(v)), tails)


def log_histogram(samples: Samples, bins: int = 40, lo: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Log-spaced bins for plotting tails; values below ``lo`` go in the first bin."""
    v = effective_values(samples)
    finite = v[np.isfinite(v)]
    hi = max(1.0, float(finite.max()) if len(finite) else 1.0)
    edges = np.geomspace(lo, hi, bins + 1)
    counts, _ = np.histogram(np.clip(v, lo, hi), bins=edges)
    return edges, counts


@dataclass(frozen=True)
class SeparationRow:
    tau: float
    benign_tail: float
    attack_tail: float
    ratio: float
    ordered: bool


def separation_report(benign: LddHistogram, attack: LddHistogram) -> list[SeparationRow]:
    """Attack/benign tail ratio per threshold; inf when the benign tail is empty."""
    if benign.total == 0 or attack.total == 0:
        raise EmptyTrace("empty histogram")
    rows = []
    for tau in sorted(benign.tail_probs):
        b = benign.tail_probs[tau]
        a = attack.tail_probs.get(tau, 0.0)
        if b == 0:
            ratio = 1.0 if a == 0 else math.inf
        else:
            ratio = a / b
        rows.append(SeparationRow(tau, b, a, ratio, a >= b))
    return rows
