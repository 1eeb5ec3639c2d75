"""The twelve acceptance criteria at their stated tolerances.

Each test records one pass/fail line; the lines are repeated in the
"acceptance criteria" section at the end of the pytest run.
"""

import json
import math
import time
from dataclasses import replace
from pathlib import Path

import mpmath
import numpy as np
import pytest
from scipy import stats

from lddaudit import audit_math as am
from lddaudit import model as m
from lddaudit.calibration import AuditParams, fit_evt
from lddaudit.commitment import TraceOpening, commit_model, per_token_bytes, serialize_opening
from lddaudit.ldd import build_histogram
from lddaudit.metrics import topk_distance, topk_distance_oracle
from lddaudit.model import DeviationConfig, LoggingMode, ModelSpec
from lddaudit.pipeline import (
    CampaignSettings, RunConfig, build_server, ceremony, collect_corpus, run_days, sub_seed, write_ceremony,
)
from lddaudit.protocol import Auditor, LocalTransport, LogStore, Outcome, Server, SimClock, VcInput, vc_execute_many
from lddaudit.protocol.messages import Audit, Request

from conftest import record

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "quantized.json"
SIGMA_B, SIGMA_Q, BIAS = 0.01, 0.05, 0.5


def _config() -> RunConfig:
    return RunConfig.from_json(CONFIG.read_text())


# 1 ---------------------------------------------------------------------------


def test_c01_topk_oracle_equivalence():
    rng = np.random.default_rng(101)
    cases = []
    for _ in range(10_000):
        n = int(rng.integers(1, 21))
        k = int(rng.integers(1, n + 1))
        cases.append((rng.uniform(-10, 10, n), set(rng.choice(n, k, replace=False).tolist()), k))
    t0 = time.perf_counter()
    fast = [topk_distance(ls, idx, k) for ls, idx, k in cases]
    elapsed = time.perf_counter() - t0
    slow = [topk_distance_oracle(ls, idx, k) for ls, idx, k in cases]
    err = max(abs(a - b) for a, b in zip(fast, slow))
    ex1 = topk_distance([1, 2, 3], {0}, 1)
    ex2 = topk_distance([5, 4, 3, 2], {0, 2}, 2)
    ok = err <= 1e-9 and elapsed < 5.0 and abs(ex1 - 2) <= 1e-9 and abs(ex2 - 1) <= 1e-9
    record(1, ok, f"max |fast-oracle|={err:.2e} on 1e4, fast path {elapsed:.2f}s, examples {ex1:g} and {ex2:g}")
    assert ok


# 2 ---------------------------------------------------------------------------


def test_c02_required_samples():
    n = am.required_samples(0.1, 0.01, 0.05)
    with mpmath.workdps(60):
        q = mpmath.mpf("0.1") * mpmath.mpf("0.01")
        exact = int(mpmath.ceil(mpmath.log(mpmath.mpf("0.05")) / mpmath.log(1 - q)))
        minimal = (1 - q) ** n <= mpmath.mpf("0.05") < (1 - q) ** (n - 1)
    ok = n == 2995 and exact == n and minimal
    record(2, ok, f"required_samples={n}, high-precision value {exact}, minimal={minimal}")
    assert ok


# 3 ---------------------------------------------------------------------------


def test_c03_completeness_bound():
    fr = am.false_reject_prob(3000, 1e-5, 3)
    pois = float(stats.poisson.sf(3, 0.03))
    rel = abs(fr - pois) / pois
    ok = fr <= 1e-7 and rel <= 0.10
    record(3, ok, f"false_reject={fr:.4e}, Poisson(0.03) tail {pois:.4e}, rel diff {rel:.2%}")
    assert ok


# 4 ---------------------------------------------------------------------------


def test_c04_soundness_bound():
    d = am.detect_prob(3000, 1e-3, 3)
    trials = 1_000_000
    hits = np.random.default_rng(404).binomial(3000, 1e-3, trials) > 3
    mc = float(hits.mean())
    se = math.sqrt(mc * (1 - mc) / trials)
    ok = 0.30 <= d <= 0.40 and abs(d - mc) <= 3 * se
    record(4, ok, f"detect_prob={d:.6f}, Monte Carlo {mc:.6f} +- {se:.1e}, |diff|={abs(d - mc) / se:.2f} SE")
    assert ok


# 5 ---------------------------------------------------------------------------


@pytest.mark.parametrize("moe", [False, True], ids=["dense", "moe"])
def test_c05_overreport_reduction(moe):
    spec = (ModelSpec(seed=21, num_experts=8, top_k_experts=2, max_steps=16) if moe
            else ModelSpec(seed=21, max_steps=24))
    rng = np.random.default_rng(505)
    prompts = [tuple(rng.integers(0, spec.vocab_size, rng.integers(4, 40)).tolist()) for _ in range(100)]
    seeds = [rng.bytes(32) for _ in prompts]
    base = m.run_batch(spec, DeviationConfig(), prompts, seeds)
    bad = []
    for K in (1, 5, 17):
        dspec, dev = m.transform_overreport(spec, K)
        runs = m.run_batch(dspec, dev, prompts, seeds)
        inputs = [VcInput(commit_model(spec), _commit(r), p, r.output_tokens, r.reported_token_count, spec,
                          TraceOpening(r.seed_r, r.trace)) for p, r in zip(prompts, runs)]
        reports = vc_execute_many(inputs)
        for b, r, rep in zip(base, runs, reports):
            tok = rep.samples.token()
            if (r.output_tokens != b.output_tokens or r.reported_token_count != b.reported_token_count + K
                    or rep.aborted or not tok.flagged[-K:].all() or tok.flagged[:-K].any()):
                bad.append(K)
    ok = not bad
    record(5, ok, f"{'MoE' if moe else 'dense'}: 100 prompts x K in {{1,5,17}}, {len(bad)} failures "
                  "(y equal, T+K, every dummy step flagged)")
    assert ok


def _commit(result):
    from lddaudit.protocol.server import commit_trace_of
    return commit_trace_of(result)


# 6 ---------------------------------------------------------------------------


def test_c06_honest_completeness():
    spec = _config().model
    server = Server(spec, DeviationConfig.benign(0.0), root_seed=606)
    params = AuditParams(0.0, 0.0, 0.0, 0.0)
    probes = Auditor(LocalTransport(server, wire=True), params, spec.vocab_size, root_seed=607).probe_many(100)
    vc_pass = sum(p.report is not None and p.report.ok for p in probes)
    nonzero = sum(int(np.count_nonzero(p.report.samples.value)) for p in probes if p.report is not None)
    verdict0 = sum(p.outcome is Outcome.PASS for p in probes)
    ok = vc_pass == 100 and nonzero == 0 and verdict0 == 100
    record(6, ok, f"{vc_pass}/100 VC passes, {nonzero} nonzero distances, {verdict0}/100 verdict 0")
    assert ok


# 7 ---------------------------------------------------------------------------


def _mutations(spec):
    """Single-field mutations of a stored opening or a response."""

    def seed(inp, rng):
        b = bytearray(inp.opening.seed_r)
        b[rng.integers(len(b))] ^= 1 << int(rng.integers(8))
        return replace_opening(inp, seed_r=bytes(b))

    def tags(inp, rng):
        tr = inp.opening.trace.copy()
        tr.rand_tags[rng.integers(len(tr.rand_tags))] ^= np.uint64(1) << np.uint64(rng.integers(64))
        return replace_opening(inp, trace=tr)

    def payload(inp, rng):
        tr = inp.opening.trace.copy()
        i, j = rng.integers(tr.token_payload.shape[0]), rng.integers(tr.token_payload.shape[1])
        if tr.mode is LoggingMode.FULL:
            tr.token_payload[i, j] += rng.choice([-1, 1]) * 10.0 ** rng.uniform(-12, 0)
        else:
            row = set(tr.token_payload[i].tolist())
            tr.token_payload[i, j] = rng.choice([v for v in range(spec.vocab_size) if v not in row])
        return replace_opening(inp, trace=tr)

    def decision(inp, rng):
        tr = inp.opening.trace.copy()
        i = rng.integers(len(tr.token_decisions))
        tr.token_decisions[i] = (tr.token_decisions[i] + rng.integers(1, spec.vocab_size)) % spec.vocab_size
        return replace_opening(inp, trace=tr)

    def kind(inp, rng):
        tr = inp.opening.trace.copy()
        tr.kinds[rng.integers(len(tr.kinds))] ^= 1
        return replace_opening(inp, trace=tr)

    def route(inp, rng):
        tr = inp.opening.trace.copy()
        i, j = rng.integers(tr.route_indices.shape[0]), rng.integers(tr.route_indices.shape[1])
        row = set(tr.route_indices[i].tolist())
        tr.route_indices[i, j] = rng.choice([v for v in range(spec.num_experts) if v not in row])
        return replace_opening(inp, trace=tr)

    def y(inp, rng):
        out = list(inp.y)
        if out and rng.random() < 0.5:
            i = rng.integers(len(out))
            out[i] = (out[i] + rng.integers(1, spec.vocab_size - 1)) % (spec.vocab_size - 1)
        else:
            out.append(int(rng.integers(spec.vocab_size - 1)))
        return replace(inp, y=out)

    def count(inp, rng):
        return replace(inp, T=max(0, inp.T + int(rng.choice([-2, -1, 1, 2]))))

    def commitment(inp, rng):
        b = bytearray(inp.trace_commitment.digest)
        b[rng.integers(32)] ^= 1 << int(rng.integers(8))
        return replace(inp, trace_commitment=type(inp.trace_commitment)(bytes(b)))

    fns = [seed, tags, payload, decision, kind, y, count, commitment]
    return fns + [route] if spec.moe else fns


def replace_opening(inp, **kw):
    op = inp.opening
    return replace(inp, opening=TraceOpening(kw.get("seed_r", op.seed_r), kw.get("trace", op.trace)))


def test_c07_tamper_evidence():
    rng = np.random.default_rng(707)
    setups = [(ModelSpec(seed=31, max_steps=16), LoggingMode.FULL),
              (ModelSpec(seed=31, max_steps=16), LoggingMode.COMPACT),
              (ModelSpec(seed=32, num_experts=8, top_k_experts=2, max_steps=12), LoggingMode.FULL),
              (ModelSpec(seed=32, num_experts=8, top_k_experts=2, max_steps=12), LoggingMode.COMPACT)]
    total, escapes, by_field = 0, 0, {}
    for s, (spec, mode) in enumerate(setups):
        server = Server(spec, DeviationConfig.benign(0.01), mode, root_seed=700 + s)
        prompts = [tuple(rng.integers(0, spec.vocab_size, rng.integers(4, 30)).tolist()) for _ in range(50)]
        responses = server.handle_requests(prompts)
        clean = [server._vc_input(server.store.get(r.request_id)) for r in responses]
        clean = [replace(inp, y=list(r.y), T=r.T, trace_commitment=r.trace_commitment)
                 for inp, r in zip(clean, responses)]
        assert all(rep.ok for rep in vc_execute_many(clean))
        fns = _mutations(spec)
        mutated, names = [], []
        for i in range(250):
            fn = fns[i % len(fns)]
            mutated.append(fn(clean[int(rng.integers(len(clean)))], rng))
            names.append(fn.__name__)
        for name, rep in zip(names, vc_execute_many(mutated)):
            total += 1
            by_field[name] = by_field.get(name, 0) + 1
            escapes += not rep.aborted
    ok = total == 1000 and escapes == 0
    record(7, ok, f"{total} mutations over {len(by_field)} fields, {escapes} escapes")
    assert ok


# 8 ---------------------------------------------------------------------------

DEVIATIONS = {
    "Benign": DeviationConfig.benign(SIGMA_B),
    "Quantized": DeviationConfig.quantized(SIGMA_Q),
    "Substituted": DeviationConfig.substituted(BIAS),
}


def test_c08_ldd_signatures():
    spec = _config().model
    tails, steps = {}, {}
    for i, (name, dev) in enumerate(DEVIATIONS.items()):
        corpus = collect_corpus(spec, dev, 5500, root_seed=sub_seed(8, name))
        h = build_histogram(np.concatenate(corpus.token_values))
        tails[name], steps[name] = h.tail_probs[0.1], h.total
    b, q, s = tails["Benign"], tails["Quantized"], tails["Substituted"]
    # with no benign exceedances, compare against the 95% upper bound 3/N as well
    b_upper = b if b > 0 else 3.0 / steps["Benign"]
    ok = (min(steps.values()) >= 100_000 and b < q < s and q >= 10 * b_upper and s >= 10 * q)
    record(8, ok, f"tail@0.1 benign={b:.2e} (bound {b_upper:.1e}) quantized={q:.2e} substituted={s:.2e}, "
                  f"min steps {min(steps.values())}")
    assert ok


# 9 ---------------------------------------------------------------------------


def test_c09_ceremony(tmp_path):
    cfg = _config()
    first = ceremony(cfg)
    second = ceremony(cfg)
    write_ceremony(tmp_path / "a", first)
    write_ceremony(tmp_path / "b", second)
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("audit_params.json", "ceremony_grid.csv"))
    p = first.params
    n = (len(first.benign.samples), len(first.attack.samples))
    ok = p.estimated_detection >= 0.05 and p.estimated_fp < 1e-3 and same and n == (200, 200)
    record(9, ok, f"{n[0]}+{n[1]} requests, t1={p.t1:g} t2={p.t2:.4f} detection={p.estimated_detection:.3f} "
                  f"fp={p.estimated_fp:.2e}, byte-identical rerun={same}")
    assert ok


# 10 --------------------------------------------------------------------------


def test_c10_evt_recovery():
    rng = np.random.default_rng(1010)
    xi_exp = fit_evt(rng.exponential(1.0, 10_000)).shape_xi
    xi_uni = fit_evt(rng.uniform(0.0, 1.0, 10_000)).shape_xi
    ok = abs(xi_exp - 0.0) <= 0.15 and abs(xi_uni + 1.0) <= 0.15
    record(10, ok, f"xi exponential={xi_exp:+.3f} (0), uniform={xi_uni:+.3f} (-1)")
    assert ok


# 11 --------------------------------------------------------------------------

C11_REPS, C11_DAYS, C11_N = 20, 30, 3000
C11_ALPHA = 0.1
C11_MAX_STEPS = 12
C11_BUDGET = 600.0


@pytest.mark.slow
def test_c11_campaign_detection():
    t0 = time.perf_counter()
    base = _config()
    cfg = replace(base, model=replace(base.model, max_steps=C11_MAX_STEPS), dishonest_fraction=C11_ALPHA,
                  rng_seed=11)
    params = ceremony(cfg).params
    k = cfg.campaign.reject_threshold_k
    settings = CampaignSettings(C11_N, k, C11_DAYS)
    reject_days, any_reject, detections = 0, 0, []
    for rep in range(C11_REPS):
        clock = SimClock()
        server = build_server(replace(cfg, rng_seed=sub_seed(cfg.rng_seed, "rep", rep)), clock)
        auditor = Auditor(LocalTransport(server), params, cfg.model.vocab_size,
                          root_seed=sub_seed(cfg.rng_seed, "rep", rep, "auditor"), prompt_len=cfg.prompt_len,
                          keep_reports=False)
        days = run_days(auditor, settings, clock=clock, purge=server.store.purge, keep_probes=False)
        r = sum(d.decision == "REJECT" for d in days)
        reject_days += r
        any_reject += r > 0
        detections += [d.detections for d in days]
    elapsed = time.perf_counter() - t0
    d = reject_days / (C11_REPS * C11_DAYS)
    expected = am.persistent_detection(d, C11_DAYS)
    freq = any_reject / C11_REPS
    sigma = math.sqrt(expected * (1 - expected) / C11_REPS)
    consistent = abs(freq - expected) <= 3 * sigma
    ok = consistent and elapsed < C11_BUDGET
    record(11, ok, f"per-day d={d:.4f} (mean {np.mean(detections):.1f} detections/day, k={k}), "
                   f">=1 REJECT in {any_reject}/{C11_REPS} reps vs 1-(1-d)^30={expected:.4f} "
                   f"(3 sigma={3 * sigma:.4f}), wall clock {elapsed:.0f}s of {C11_BUDGET:.0f}s")
    assert ok


# 12 --------------------------------------------------------------------------


def test_c12_storage_bound():
    worst, worst_line = 0.0, 0.0
    for spec in (ModelSpec(seed=41, max_steps=32), ModelSpec(seed=42, num_experts=8, top_k_experts=2, max_steps=32)):
        server = Server(spec, DeviationConfig.benign(0.01), LoggingMode.COMPACT, root_seed=1200)
        rng = np.random.default_rng(1201)
        server.handle_requests([tuple(rng.integers(0, spec.vocab_size, rng.integers(8, 64)).tolist())
                                for _ in range(100)])
        for e in server.store.entries():
            worst = max(worst, per_token_bytes(e.opening))
            worst_line = max(worst_line, e.per_token_bytes())
    ok = worst <= 1024
    record(12, ok, f"compact opening <= {worst:.0f} B/token worst case (JSON log line <= {worst_line:.0f} B/token)")
    assert ok
