"""Run configuration and the ceremony, campaign and report pipelines.

Every random choice flows from ``RunConfig.rng_seed`` through named
sub-streams, so a config reproduces its outputs byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import prf
from .calibration import (
    DEFAULT_TAIL_FRACTION,
    AuditParams,
    CeremonyInput,
    GridPoint,
    ceremony_grid,
    default_t1_grid,
    run_ceremony,
)
from .commitment import commit_model
from .errors import InvalidArgument
from .ldd import TAIL_THRESHOLDS, build_histogram, log_histogram, separation_report
from .metrics import DistanceKind, SampleBatch, samples_from_csv, samples_to_csv
from .model import DeviationConfig, LoggingMode, ModelSpec
from .protocol.auditor import PROMPT_LEN, Auditor, LocalTransport, Outcome, ProbeResult, Transport
from .protocol.logstore import DEFAULT_MAX_AGE, LogStore, SimClock
from .protocol.server import Server

DAY = DEFAULT_MAX_AGE


@dataclass(frozen=True)
class CeremonySettings:
    benign: DeviationConfig
    attack: DeviationConfig
    detection_target: float = 0.05
    t1_grid: tuple[float, ...] | None = None
    tail_fraction: float = DEFAULT_TAIL_FRACTION

    def to_dict(self) -> dict:
        return {
            "benign": self.benign.to_dict(),
            "attack": self.attack.to_dict(),
            "detection_target": self.detection_target,
            "t1_grid": None if self.t1_grid is None else list(self.t1_grid),
            "tail_fraction": self.tail_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CeremonySettings":
        if d.get("benign") is None or d.get("attack") is None:
            raise KeyError("ceremony needs both 'benign' and 'attack' deviations")
        grid = d.get("t1_grid")
        return cls(DeviationConfig.from_dict(d["benign"]), DeviationConfig.from_dict(d["attack"]),
                   float(d.get("detection_target", 0.05)),
                   None if grid is None else tuple(float(t) for t in grid),
                   float(d.get("tail_fraction", DEFAULT_TAIL_FRACTION)))


@dataclass(frozen=True)
class CampaignSettings:
    n_audits: int
    reject_threshold_k: int
    days: int = 1

    def __post_init__(self):
        if self.n_audits < 1:
            raise InvalidArgument("n_audits must be at least 1")
        if self.reject_threshold_k < 0 or self.days < 1:
            raise InvalidArgument("need reject_threshold_k >= 0 and days >= 1")

    def to_dict(self) -> dict:
        return {"n_audits": self.n_audits, "reject_threshold_k": self.reject_threshold_k, "days": self.days}

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignSettings":
        return cls(int(d["n_audits"]), int(d["reject_threshold_k"]), int(d.get("days", 1)))


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    deviation: DeviationConfig = field(default_factory=DeviationConfig)
    honest_deviation: DeviationConfig = field(default_factory=DeviationConfig)
    dishonest_fraction: float = 1.0
    logging_mode: LoggingMode = LoggingMode.FULL
    corpus_size: int = 200
    distance_kind: DistanceKind | None = None
    audit_params: AuditParams | None = None
    campaign: CampaignSettings | None = None
    ceremony: CeremonySettings | None = None
    prompt_len: tuple[int, int] = PROMPT_LEN
    output_dir: str = "out"
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rng_seed < 2**64:
            raise InvalidArgument("rng_seed must be a 64-bit unsigned integer")
        if not 0 <= self.dishonest_fraction <= 1:
            raise InvalidArgument("dishonest_fraction must lie in [0, 1]")
        if self.corpus_size < 1:
            raise InvalidArgument("corpus_size must be positive")
        lo, hi = self.prompt_len
        if not 1 <= lo <= hi:
            raise InvalidArgument("prompt_len must satisfy 1 <= lo <= hi")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "deviation": self.deviation.to_dict(),
            "honest_deviation": self.honest_deviation.to_dict(),
            "dishonest_fraction": self.dishonest_fraction,
            "logging_mode": self.logging_mode.value,
            "corpus_size": self.corpus_size,
            "distance_kind": None if self.distance_kind is None else self.distance_kind.value,
            "audit_params": None if self.audit_params is None else self.audit_params.to_dict(),
            "campaign": None if self.campaign is None else self.campaign.to_dict(),
            "ceremony": None if self.ceremony is None else self.ceremony.to_dict(),
            "prompt_len": list(self.prompt_len),
            "output_dir": self.output_dir,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        if "model" not in d:
            raise KeyError("config needs a 'model' section")
        kw: dict = {"model": ModelSpec.from_dict(d["model"])}
        for name in ("deviation", "honest_deviation"):
            if d.get(name) is not None:
                kw[name] = DeviationConfig.from_dict(d[name])
        if "dishonest_fraction" in d:
            kw["dishonest_fraction"] = float(d["dishonest_fraction"])
        if "logging_mode" in d:
            kw["logging_mode"] = LoggingMode(d["logging_mode"])
        if "corpus_size" in d:
            kw["corpus_size"] = int(d["corpus_size"])
        if d.get("distance_kind") is not None:
            kw["distance_kind"] = DistanceKind(d["distance_kind"])
        if d.get("audit_params") is not None:
            kw["audit_params"] = AuditParams.from_dict(d["audit_params"])
        if d.get("campaign") is not None:
            kw["campaign"] = CampaignSettings.from_dict(d["campaign"])
        if d.get("ceremony") is not None:
            kw["ceremony"] = CeremonySettings.from_dict(d["ceremony"])
        if "prompt_len" in d:
            lo, hi = d["prompt_len"]
            kw["prompt_len"] = (int(lo), int(hi))
        if "output_dir" in d:
            kw["output_dir"] = str(d["output_dir"])
        if "rng_seed" in d:
            kw["rng_seed"] = int(d["rng_seed"])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, s: str) -> "RunConfig":
        return cls.from_dict(json.loads(s))


def sub_seed(rng_seed: int, *labels: object) -> int:
    """Independent 64-bit root for a named component."""
    return prf.derive_key("run", rng_seed, *labels) & ((1 << 64) - 1)


# --------------------------------------------------------------------------
# ceremony


@dataclass
class Corpus:
    samples: list[SampleBatch]
    aborted: int

    @property
    def token_values(self) -> list[np.ndarray]:
        return [s.token().value for s in self.samples]


def collect_corpus(spec: ModelSpec, dev: DeviationConfig, n: int, *, logging: LoggingMode = LoggingMode.FULL,
                   kind: DistanceKind | None = None, root_seed: int = 0,
                   prompt_len: tuple[int, int] = PROMPT_LEN) -> Corpus:
    """Probe a server running ``dev`` and keep the per-request distance samples."""
    server = Server(spec, dev, logging, root_seed=root_seed, distance_kind=kind)
    auditor = Auditor(LocalTransport(server), AuditParams(0.0, 0.0, 0.0, 0.0), spec.vocab_size,
                      root_seed=root_seed, prompt_len=prompt_len)
    probes = auditor.probe_many(n)
    kept = [p.report.samples for p in probes if p.report is not None and not p.report.aborted]
    return Corpus(kept, n - len(kept))


@dataclass
class CeremonyResult:
    params: AuditParams
    grid: list[GridPoint]
    benign: Corpus
    attack: Corpus


def ceremony(cfg: RunConfig) -> CeremonyResult:
    if cfg.ceremony is None:
        raise KeyError("config has no 'ceremony' section")
    c = cfg.ceremony
    corpora = [
        collect_corpus(cfg.model, dev, cfg.corpus_size, logging=cfg.logging_mode, kind=cfg.distance_kind,
                       root_seed=sub_seed(cfg.rng_seed, "ceremony", label), prompt_len=cfg.prompt_len)
        for label, dev in (("benign", c.benign), ("attack", c.attack))
    ]
    inp = CeremonyInput([s.token() for s in corpora[0].samples], [s.token() for s in corpora[1].samples],
                        c.detection_target)
    grid = list(c.t1_grid) if c.t1_grid is not None else default_t1_grid()
    params = run_ceremony(inp, grid, c.tail_fraction)
    return CeremonyResult(params, ceremony_grid(inp, grid, c.tail_fraction), corpora[0], corpora[1])


# --------------------------------------------------------------------------
# campaign


def build_server(cfg: RunConfig, clock: SimClock | None = None) -> Server:
    store = LogStore(max_age=DAY, clock=clock if clock is not None else SimClock())
    return Server(cfg.model, cfg.deviation, cfg.logging_mode, root_seed=sub_seed(cfg.rng_seed, "server"),
                  honest_deviation=cfg.honest_deviation, dishonest_fraction=cfg.dishonest_fraction,
                  store=store, distance_kind=cfg.distance_kind)


@dataclass
class DayResult:
    day: int
    flags: int
    bottoms: int
    reject_threshold_k: int
    probes: list[ProbeResult] = field(repr=False, default_factory=list)

    @property
    def detections(self) -> int:
        return self.flags + self.bottoms

    @property
    def decision(self) -> str:
        return "REJECT" if self.detections > self.reject_threshold_k else "ACCEPT"


def _probe_parallel(auditor: Auditor, n: int, parallel: int) -> list[ProbeResult]:
    reqs = auditor.make_requests(n)
    if parallel <= 1 or n < 2:
        return auditor.probe_requests(reqs)
    chunks = [list(c) for c in np.array_split(np.arange(n), min(parallel, n))]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        parts = list(pool.map(lambda idx: auditor.probe_requests([reqs[i] for i in idx]), chunks))
    return [p for part in parts for p in part]


def run_days(auditor: Auditor, settings: CampaignSettings, *, parallel: int = 1, clock: SimClock | None = None,
             purge=None, keep_probes: bool = True) -> list[DayResult]:
    """Daily campaigns of ``n_audits`` probes; the log is purged between days."""
    days = []
    for day in range(settings.days):
        probes = _probe_parallel(auditor, settings.n_audits, parallel)
        flags = sum(p.outcome is Outcome.FLAG for p in probes)
        bottoms = sum(p.outcome is Outcome.BOTTOM for p in probes)
        days.append(DayResult(day, flags, bottoms, settings.reject_threshold_k, probes if keep_probes else []))
        if clock is not None:
            clock.advance(DAY)
        if purge is not None:
            purge()
    return days


def campaign(cfg: RunConfig, transport: Transport | None = None, *, parallel: int = 1) -> list[DayResult]:
    """Run the configured campaign, in process unless a transport is given."""
    if cfg.audit_params is None:
        raise KeyError("config has no 'audit_params'")
    if cfg.campaign is None:
        raise KeyError("config has no 'campaign' section")
    clock = purge = None
    if transport is None:
        clock = SimClock()
        server = build_server(cfg, clock)
        transport = LocalTransport(server)
        purge = server.store.purge
    auditor = Auditor(transport, cfg.audit_params, cfg.model.vocab_size,
                      root_seed=sub_seed(cfg.rng_seed, "auditor"), prompt_len=cfg.prompt_len)
    return run_days(auditor, cfg.campaign, parallel=parallel, clock=clock, purge=purge)


# --------------------------------------------------------------------------
# output files


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_ceremony(out: Path, result: CeremonyResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "audit_params.json", result.params.to_json())
    rows = [(_fmt(g.t1), _fmt(g.t2), _fmt(g.detection), _fmt(g.fp), g.fp_method) for g in result.grid]
    _write(out / "ceremony_grid.csv", _csv(rows, ("t1", "t2", "detection", "fp", "fp_method")))


def _all_samples(probes: Sequence[ProbeResult]) -> tuple[SampleBatch | None, SampleBatch | None]:
    reports = [p.report.samples for p in probes if p.report is not None and not p.report.aborted]
    if not reports:
        return None, None
    cat = SampleBatch(
        np.concatenate([r.step_index for r in reports]),
        np.concatenate([r.value for r in reports]),
        np.concatenate([r.flagged for r in reports]),
        np.concatenate([r.routing for r in reports]),
        reports[0].kind,
    )
    return cat.token(), cat.routes()


def write_campaign(out: Path, cfg: RunConfig, days: Sequence[DayResult]) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for d in days:
        for p in d.probes:
            v = p.verdict
            rows.append((d.day, p.request_id, p.outcome.name.lower(), _fmt(v.p_t1) if v else "",
                         v.num_steps if v else "", p.reason or ""))
    _write(out / "verdicts.csv", _csv(rows, ("day", "request_id", "outcome", "p_t1", "num_steps", "reason")))
    probes = [p for d in days for p in d.probes]
    tok, routes = _all_samples(probes)
    if tok is not None and len(tok):
        hist = build_histogram(tok)
        _write(out / "histogram.json", _dump({"kind": tok.kind.value, **hist.to_dict()}))
        _write(out / "samples.csv", samples_to_csv(tok.samples()))
    if routes is not None and len(routes):
        _write(out / "routing_samples.csv", samples_to_csv(routes.samples()))
    report = {
        "model_commitment": commit_model(cfg.model).hex,
        "audit_params": cfg.audit_params.to_dict(),
        "n_audits": cfg.campaign.n_audits,
        "reject_threshold_k": cfg.campaign.reject_threshold_k,
        "days": [{"day": d.day, "flags": d.flags, "bottoms": d.bottoms, "detections": d.detections,
                  "decision": d.decision} for d in days],
        "reject_days": sum(d.decision == "REJECT" for d in days),
        "decision": "REJECT" if any(d.decision == "REJECT" for d in days) else "ACCEPT",
        "config": cfg.to_dict(),
    }
    _write(out / "campaign_report.json", _dump(report))
    return report


# --------------------------------------------------------------------------
# report


def _read_samples(directory: Path) -> dict[DistanceKind, np.ndarray]:
    path = directory / "samples.csv"
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    by_kind: dict[DistanceKind, list[float]] = {}
    for s in samples_from_csv(path.read_text(encoding="utf-8")):
        by_kind.setdefault(DistanceKind(s.kind), []).append(math.inf if s.flagged else s.value)
    if not by_kind:
        raise FileNotFoundError(f"{path} holds no samples")
    return {k: np.array(v) for k, v in by_kind.items()}


def report(inputs: Sequence[str | os.PathLike], out: Path, bins: int = 40) -> list[str]:
    """Log-binned histograms and tail tables from campaign directories.

    With exactly two inputs the first is read as benign, the second as the
    attack, and a separation table is added.
    """
    dirs = [Path(p) for p in inputs]
    if not dirs:
        raise FileNotFoundError("no input directories")
    data = [_read_samples(d) for d in dirs]
    out.mkdir(parents=True, exist_ok=True)
    written = []
    tail_rows = []
    for d, by_kind in zip(dirs, data):
        for kind in sorted(by_kind, key=lambda k: k.value):
            v = by_kind[kind]
            edges, counts = log_histogram(v, bins)
            rows = [(_fmt(lo), _fmt(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
            name = f"hist_{d.name}_{kind.value}.csv" if len(dirs) > 1 else f"hist_{kind.value}.csv"
            _write(out / name, _csv(rows, ("bin_lo", "bin_hi", "count")))
            written.append(name)
            h = build_histogram(v)
            tail_rows += [(d.name, kind.value, _fmt(t), _fmt(h.tail_probs[t]), h.total) for t in TAIL_THRESHOLDS]
    _write(out / "tail_table.csv", _csv(tail_rows, ("source", "kind", "tau", "tail_prob", "n_samples")))
    written.append("tail_table.csv")
    if len(dirs) == 2:
        rows = []
        for kind in sorted(set(data[0]) & set(data[1]), key=lambda k: k.value):
            sep = separation_report(build_histogram(data[0][kind]), build_histogram(data[1][kind]))
            rows += [(kind.value, _fmt(r.tau), _fmt(r.benign_tail), _fmt(r.attack_tail),
                      "inf" if math.isinf(r.ratio) else _fmt(r.ratio), int(r.ordered)) for r in sep]
        _write(out / "separation.csv", _csv(rows, ("kind", "tau", "benign_tail", "attack_tail", "ratio", "ordered")))
        written.append("separation.csv")
    return written


def with_overrides(cfg: dict, sets: Sequence[str]) -> dict:
    """Apply ``KEY=VAL`` overrides; dotted keys reach nested sections and
    values parse as JSON when they can."""
    cfg = json.loads(json.dumps(cfg))
    for item in sets:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValueError(f"--set expects KEY=VAL, got {item!r}")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = val
    return cfg


__all__ = [
    "CampaignSettings", "CeremonyResult", "CeremonySettings", "Corpus", "DayResult", "RunConfig", "build_server",
    "campaign", "ceremony", "collect_corpus", "report", "run_days", "sub_seed", "with_overrides",
    "write_campaign", "write_ceremony",
]
