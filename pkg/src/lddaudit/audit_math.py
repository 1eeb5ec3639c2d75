"""Randomized-audit arithmetic: sample sizes and binomial tail bounds."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import gammaln

from .errors import Infeasible, InvalidArgument


def _unit_open(name: str, v: float) -> None:
    if not 0 < v < 1:
        raise InvalidArgument(f"{name} must lie in (0, 1), got {v!r}")


def required_samples(alpha: float, p_detect: float, eta: float) -> int:
    """Audits needed so an alpha-dishonest server evades with prob <= eta.

    Each audit catches the server with probability alpha * p_detect.
    """
    if not 0 < alpha <= 1 or not 0 < p_detect <= 1:
        raise InvalidArgument("alpha and p_detect must lie in (0, 1]")
    _unit_open("eta", eta)
    q = alpha * p_detect
    if q >= 1:
        return 1
    return max(1, math.ceil(math.log(eta) / math.log1p(-q)))


def log_binom_sf(n: int, p: float, k: int) -> float:
    """log P[Binomial(n, p) > k], summing the upper tail in log space."""
    if n < 1 or not 0 <= k < n:
        raise InvalidArgument("need n >= 1 and 0 <= k < n")
    if not 0 <= p <= 1:
        raise InvalidArgument("p must lie in [0, 1]")
    if p == 0:
        return -math.inf
    if p == 1:
        return 0.0
    j = np.arange(k + 1, n + 1, dtype=np.float64)
    logs = (gammaln(n + 1) - gammaln(j + 1) - gammaln(n - j + 1)
            + j * math.log(p) + (n - j) * math.log1p(-p))
    top = float(logs.max())
    return top + math.log(math.fsum(np.exp(logs - top).tolist()))


def binom_sf(n: int, p: float, k: int) -> float:
    return min(1.0, math.exp(log_binom_sf(n, p, k)))


def false_reject_prob(n: int, fp: float, k: int) -> float:
    """P[an honest server collects more than k flags in n audits]."""
    return binom_sf(n, fp, k)


def detect_prob(n: int, p: float, k: int) -> float:
    """P[a server flagged with per-audit probability p exceeds k flags]."""
    return binom_sf(n, p, k)


def detect_prob_folded(n: int, alpha: float, p_detect: float, k: int) -> float:
    """``detect_prob`` with the per-audit rate alpha * p_detect."""
    return detect_prob(n, alpha * p_detect, k)


def persistent_detection(daily: float, days: int) -> float:
    """P[at least one rejecting day] over independent daily campaigns."""
    return -math.expm1(days * math.log1p(-daily)) if daily < 1 else 1.0


@dataclass(frozen=True)
class CampaignPlan:
    alpha: float
    per_request_detect: float
    evasion_eta: float
    n_audits: int
    reject_threshold_k: int
    false_reject: float = 0.0
    soundness: float = 0.0

    def __post_init__(self):
        if self.n_audits < 1 or self.reject_threshold_k < 0:
            raise InvalidArgument("n_audits >= 1 and reject_threshold_k >= 0 required")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignPlan":
        return cls(float(d["alpha"]), float(d["per_request_detect"]), float(d["evasion_eta"]),
                   int(d["n_audits"]), int(d["reject_threshold_k"]),
                   float(d.get("false_reject", 0.0)), float(d.get("soundness", 0.0)))


def plan_campaign(alpha: float, p_detect: float, eta: float, fp: float,
                  completeness_target: float) -> CampaignPlan:
    """Audit count from the evasion target, then the smallest tolerated flag
    count k keeping honest false rejection within the completeness target."""
    if not 0 <= fp <= 1:
        raise InvalidArgument("fp must lie in [0, 1]")
    if not 0 <= completeness_target <= 1:
        raise InvalidArgument("completeness_target must lie in [0, 1]")
    n = required_samples(alpha, p_detect, eta)
    limit = max(n - 1, 0)
    k = next((k for k in range(limit + 1) if n == 1 or false_reject_prob(n, fp, k) <= completeness_target), None)
    if k is None:
        raise Infeasible(f"no k < {n} keeps false rejection below {completeness_target!r}")
    fr = false_reject_prob(n, fp, k) if n > 1 else (fp if k == 0 else 0.0)
    sound = detect_prob_folded(n, alpha, p_detect, k) if n > 1 else alpha * p_detect
    return CampaignPlan(alpha, p_detect, eta, n, k, fr, sound)
