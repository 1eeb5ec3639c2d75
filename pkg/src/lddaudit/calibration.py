"""Threshold ceremony and extreme-value false-positive estimation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .errors import (
    BelowThreshold,
    CalibrationInfeasible,
    InsufficientTail,
    InvalidArgument,
)
from .ldd import effective_values, p_values

DEFAULT_TAIL_FRACTION = 0.1
MIN_EXCEEDANCES = 10
MLE_MAXITER = 200


@dataclass(frozen=True)
class AuditParams:
    t1: float
    t2: float
    estimated_fp: float
    estimated_detection: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "AuditParams":
        return cls(float(d["t1"]), float(d["t2"]), float(d["estimated_fp"]), float(d["estimated_detection"]))


@dataclass(frozen=True)
class EvtFit:
    threshold_u: float
    shape_xi: float
    scale_beta: float
    exceed_rate: float
    n_exceedances: int
    method: str = "mle"


@dataclass
class CeremonyInput:
    """Per-request distance values for the benign and attack setup corpora."""

    benign_stats: list[np.ndarray]
    attack_stats: list[np.ndarray]
    detection_target: float = 0.05

    def __post_init__(self):
        if not self.benign_stats or not self.attack_stats:
            raise InvalidArgument("both corpora must be non-empty")
        if not 0 < self.detection_target < 1:
            raise InvalidArgument("detection_target must lie in (0, 1)")
        self.benign_stats = [np.sort(effective_values(s)) for s in self.benign_stats]
        self.attack_stats = [np.sort(effective_values(s)) for s in self.attack_stats]
        if any(len(s) == 0 for s in self.benign_stats + self.attack_stats):
            raise InvalidArgument("every request needs at least one token sample")


# --------------------------------------------------------------------------
# generalized Pareto fit


def _profile_xi(theta: float, y: np.ndarray) -> float:
    return float(np.mean(np.log1p(theta * y)))


def _profile_nll(theta: float, y: np.ndarray) -> float:
    """Negative log-likelihood with (xi, beta) profiled out for theta = xi/beta."""
    n = len(y)
    if abs(theta) < 1e-12:
        m = y.mean()
        return n * math.log(m) + n
    xi = _profile_xi(theta, y)
    beta = xi / theta
    if beta <= 0:
        return math.inf
    return n * math.log(beta) + (1.0 + 1.0 / xi) * float(np.sum(np.log1p(theta * y))) if xi != 0 else math.inf


def _fit_mle(y: np.ndarray) -> tuple[float, float] | None:
    ymax, ymean = float(y.max()), float(y.mean())
    lo = -(1.0 - 1e-9) / ymax
    # keep xi >= -1; beyond it the likelihood is unbounded
    if _profile_xi(lo, y) < -1.0:
        lo = brentq(lambda t: _profile_xi(t, y) + 1.0, lo, -1e-12 / ymax, maxiter=MLE_MAXITER)
    hi = 100.0 / ymean
    grid = np.concatenate([np.linspace(lo, 0.0, 60, endpoint=False), np.geomspace(1e-6 / ymean, hi, 60)])
    vals = np.array([_profile_nll(t, y) for t in grid])
    j = int(np.argmin(vals))
    a, b = grid[max(j - 1, 0)], grid[min(j + 1, len(grid) - 1)]
    res = minimize_scalar(_profile_nll, bounds=(a, b), args=(y,), method="bounded",
                          options={"maxiter": MLE_MAXITER, "xatol": 1e-12 * max(1.0, abs(b - a))})
    if not res.success or not np.isfinite(res.fun):
        return None
    theta = float(res.x) if res.fun <= vals[j] else float(grid[j])
    if abs(theta) < 1e-12:
        return 0.0, ymean
    xi = max(_profile_xi(theta, y), -1.0)
    return xi, xi / theta if xi != 0 else ymean


def _fit_pwm(y: np.ndarray) -> tuple[float, float]:
    """Probability-weighted moments estimator."""
    s = np.sort(y)
    n = len(s)
    p = (np.arange(1, n + 1) - 0.35) / n
    a0 = s.mean()
    a1 = float(np.mean((1.0 - p) * s))
    xi = 2.0 - a0 / (a0 - 2.0 * a1)
    beta = 2.0 * a0 * a1 / (a0 - 2.0 * a1)
    return xi, beta


def fit_evt(values: Sequence[float], tail_fraction: float = DEFAULT_TAIL_FRACTION) -> EvtFit:
    """Peaks-over-threshold generalized Pareto fit."""
    x = np.asarray(values, dtype=np.float64)
    if len(x) < 100:
        raise InvalidArgument("need at least 100 values")
    if not 0 < tail_fraction <= 0.5:
        raise InvalidArgument("tail_fraction must lie in (0, 0.5]")
    x = np.where(np.isinf(x), 1.0, x)
    u = float(np.quantile(x, 1.0 - tail_fraction))
    y = x[x > u] - u
    if len(y) < MIN_EXCEEDANCES:
        raise InsufficientTail(f"{len(y)} exceedances above u={u!r}")
    rate = len(y) / len(x)
    try:
        est = _fit_mle(y)
    except (ValueError, FloatingPointError):
        est = None
    method = "mle"
    if est is None or not est[1] > 0:
        est, method = _fit_pwm(y), "pwm"
    return EvtFit(u, float(est[0]), float(est[1]), rate, int(len(y)), method)


def gpd_survival(y: float, xi: float, beta: float) -> float:
    if abs(xi) < 1e-12:
        return math.exp(-y / beta)
    base = 1.0 + xi * y / beta
    if base <= 0:
        return 0.0
    return base ** (-1.0 / xi)


def estimate_fp_evt(fit: EvtFit, t2: float) -> float:
    """Estimated P[p > t2] for a benign request."""
    if t2 < fit.threshold_u:
        raise BelowThreshold(f"t2={t2!r} below threshold u={fit.threshold_u!r}")
    v = fit.exceed_rate * gpd_survival(t2 - fit.threshold_u, fit.shape_xi, fit.scale_beta)
    return min(max(v, 0.0), 1.0)


# --------------------------------------------------------------------------
# ceremony


@dataclass(frozen=True)
class GridPoint:
    t1: float
    t2: float | None
    detection: float
    fp: float | None
    fp_method: str


def _largest_t2(attack_p: np.ndarray, target: float) -> float | None:
    """Largest attack order statistic t2 with mean(attack_p > t2) >= target."""
    need = math.ceil(target * len(attack_p) - 1e-12)
    desc = np.sort(attack_p)[::-1]
    bound = desc[need - 1]  # t2 must lie strictly below this value
    below = desc[desc < bound]
    if len(below) == 0:
        return None
    return float(below[0])


def ceremony_grid(inp: CeremonyInput, t1_grid: Sequence[float],
                  tail_fraction: float = DEFAULT_TAIL_FRACTION) -> list[GridPoint]:
    """Evaluate every t1 in the grid; skipped points carry ``fp=None``."""
    out = []
    for t1 in t1_grid:
        t1 = float(t1)
        ap = p_values(inp.attack_stats, t1)
        bp = p_values(inp.benign_stats, t1)
        t2 = _largest_t2(ap, inp.detection_target)
        if t2 is None:
            out.append(GridPoint(t1, None, 0.0, None, "no-t2"))
            continue
        det = float(np.mean(ap > t2))
        try:
            fit = fit_evt(bp, tail_fraction)
        except InsufficientTail:
            out.append(GridPoint(t1, t2, det, None, "insufficient-tail"))
            continue
        if t2 >= fit.threshold_u:
            out.append(GridPoint(t1, t2, det, estimate_fp_evt(fit, t2), "evt-" + fit.method))
        else:
            out.append(GridPoint(t1, t2, det, float(np.mean(bp > t2)), "empirical"))
    return out


def run_ceremony(inp: CeremonyInput, t1_grid: Sequence[float],
                 tail_fraction: float = DEFAULT_TAIL_FRACTION) -> AuditParams:
    grid = list(t1_grid)
    if not grid:
        raise InvalidArgument("t1_grid must be non-empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise InvalidArgument("t1_grid must be increasing")
    points = [p for p in ceremony_grid(inp, grid, tail_fraction) if p.fp is not None]
    if not points:
        raise CalibrationInfeasible("no (t1, t2) reaches the detection target with a usable benign tail")
    best = min(points, key=lambda p: (p.fp, p.t1, -p.t2))
    return AuditParams(best.t1, best.t2, best.fp, best.detection)


def default_t1_grid() -> list[float]:
    return [round(0.005 * i, 3) for i in range(1, 61)]
