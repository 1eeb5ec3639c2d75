"""Auditing LLM inference through logit distance distributions.

A server commits to a per-request decision trace; an auditor probes it,
demands the opening, and a trusted checker re-executes the reference model
on the committed decisions to measure how far the served logits drift.
"""

from .audit_math import (
    CampaignPlan,
    detect_prob,
    detect_prob_folded,
    false_reject_prob,
    persistent_detection,
    plan_campaign,
    required_samples,
)
from .calibration import AuditParams, CeremonyInput, EvtFit, estimate_fp_evt, fit_evt, run_ceremony
from .commitment import Commitment, TraceOpening, commit_model, commit_trace, verify
from .ldd import LddHistogram, RequestVerdict, build_histogram, decide, separation_report, tail_statistic
from .metrics import (
    DistanceKind,
    DistanceSample,
    kl_divergence,
    topk_distance,
    topk_distance_oracle,
    tv_distance,
)
from .model import (
    DecisionKind,
    DeviationConfig,
    DeviationKind,
    ExecutionResult,
    LoggingMode,
    ModelSpec,
    StepTrace,
    Trace,
    run,
    run_batch,
    transform_overreport,
)

__version__ = "0.1.0"

__all__ = [
    "AuditParams", "CampaignPlan", "CeremonyInput", "Commitment", "DecisionKind", "DeviationConfig",
    "DeviationKind", "DistanceKind", "DistanceSample", "EvtFit", "ExecutionResult", "LddHistogram",
    "LoggingMode", "ModelSpec", "RequestVerdict", "StepTrace", "Trace", "TraceOpening", "build_histogram",
    "commit_model", "commit_trace", "decide", "detect_prob", "detect_prob_folded", "estimate_fp_evt",
    "false_reject_prob", "fit_evt", "kl_divergence", "persistent_detection", "plan_campaign",
    "required_samples", "run", "run_batch", "run_ceremony", "separation_report", "tail_statistic",
    "topk_distance", "topk_distance_oracle", "transform_overreport", "tv_distance", "verify",
]
