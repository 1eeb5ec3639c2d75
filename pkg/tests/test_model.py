import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lddaudit import model as m
from lddaudit.errors import AlignmentError, InvalidArgument, InvalidDecision, InvalidPrompt, ShapeError
from lddaudit.model import DecisionKind, DeviationConfig, DeviationKind, LoggingMode, ModelSpec

from conftest import BENIGN, QUANTIZED, prompts, seeds


def test_modelspec_validation():
    with pytest.raises(InvalidArgument):
        ModelSpec(seed=-1)
    with pytest.raises(InvalidArgument):
        ModelSpec(seed=0, top_k_tokens=100)
    with pytest.raises(InvalidArgument):
        ModelSpec(seed=0, num_experts=4)
    with pytest.raises(InvalidArgument):
        ModelSpec(seed=0, top_k_experts=1)
    s = ModelSpec(seed=0, num_experts=4, top_k_experts=2)
    assert s.moe and s.points_per_step == 2 and s.stop_token == 63
    assert s.decision_kind(0) is DecisionKind.ROUTE and s.decision_kind(1) is DecisionKind.TOKEN


def test_spec_json_roundtrip(any_spec):
    assert ModelSpec.from_json(any_spec.to_json()) == any_spec
    with pytest.raises(InvalidArgument):
        ModelSpec.from_dict({"seed": 1, "bogus": 2})


@given(st.sampled_from(list(DeviationKind)), st.floats(0, 1, allow_nan=False), st.floats(0, 1, allow_nan=False))
def test_deviation_json_roundtrip_is_exact(kind, sigma, bias):
    kw = {"kind": kind, "noise_sigma": sigma}
    if kind is DeviationKind.SUBSTITUTED:
        kw["bias_scale"] = bias
    if kind is DeviationKind.OVERREPORT:
        kw["dummy_steps"] = 3
    dev = DeviationConfig(**kw)
    d = json.loads(dev.to_json())
    assert isinstance(d["noise_sigma"], str)
    assert DeviationConfig.from_json(dev.to_json()) == dev


def test_deviation_validation():
    with pytest.raises(InvalidArgument):
        DeviationConfig(DeviationKind.BENIGN, bias_scale=0.1)
    with pytest.raises(InvalidArgument):
        DeviationConfig(DeviationKind.OVERREPORT)
    with pytest.raises(InvalidArgument):
        DeviationConfig.quantized(-0.1)
    with pytest.raises(InvalidArgument):
        DeviationConfig(DeviationKind.OVERREPORT, dummy_steps=1, overreport_mode="bogus")
    assert DeviationConfig.quantized(0).is_reference and not BENIGN.is_reference


def test_step_without_noise_matches_reference(spec):
    h = m.embed(spec, [1, 2, 3])
    ref = DeviationConfig()
    a = m.step(spec, ref, h, 0)
    b = m.step(spec, DeviationConfig.quantized(0.0), h, 0)
    assert np.array_equal(a[1], b[1]) and a[1].shape == (spec.vocab_size,)


def test_step_noise_is_zero_mean_with_sigma(spec):
    # unit-norm output rows make each logit's perturbation N(0, sigma^2)
    h = m.embed(spec, [5, 6, 7, 8])
    _, ref = m.step(spec, DeviationConfig(), h, 0)
    sigma = 0.05
    rng = np.random.default_rng(0)
    diffs = np.array([m.step(spec, DeviationConfig.quantized(sigma), h, 0, rng)[1] - ref for _ in range(4000)])
    assert abs(diffs.mean()) < 5 * sigma / np.sqrt(diffs.size) * 10
    assert abs(diffs.std() / sigma - 1) < 0.15


def test_step_shapes_and_errors(moe_spec):
    h = m.embed(moe_spec, [1, 2])
    _, r = m.step(moe_spec, DeviationConfig(), h, 0)
    assert r.shape == (moe_spec.num_experts,)
    ht, t = m.step(moe_spec, DeviationConfig(), h, 1)
    assert t.shape == (moe_spec.vocab_size,)
    with pytest.raises(ShapeError):
        m.step(moe_spec, DeviationConfig(), np.zeros(3), 0)
    with pytest.raises(InvalidDecision):
        m.update(moe_spec, ht, 1000)
    with pytest.raises(InvalidDecision):
        m.update(moe_spec, ht, (0, 0))


def test_embed_rejects_bad_prompts(spec):
    for bad in ([], [64], [-1], [[1, 2]], [1.5]):
        with pytest.raises(InvalidPrompt):
            m.embed(spec, bad)


def test_dummy_update_is_identity(spec):
    h = m.embed(spec, [1, 2, 3])
    assert np.array_equal(m.update(spec, h, spec.stop_token, dummy=True), h)
    h2, ell = m.dummy_step(spec, h)
    assert np.array_equal(h2, h) and m.select(ell, 12345, spec.top_k_tokens) == spec.stop_token


def test_reconstruct():
    assert m.reconstruct([4, 5, 63, 7], 63) == ([4, 5], 4)
    assert m.reconstruct([1, 2], 63) == ([1, 2], 2)
    assert m.reconstruct([], 63) == ([], 0)


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=12), st.integers(1, 12),
       st.integers(0, 2**64 - 1))
def test_select_returns_one_of_top_k(logits, k, tag):
    k = min(k, len(logits))
    d = m.select(logits, tag, k)
    top = m.topk_rows(np.array([logits]), k)[0]
    assert d in top.tolist()


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=16), st.integers(1, 16))
def test_topk_rows_matches_stable_sort(vals, k):
    x = np.array([vals], dtype=float)
    k = min(k, len(vals))
    assert np.array_equal(m.topk_rows(x, k), np.argsort(-x, axis=1, kind="stable")[:, :k])


def test_route_is_ranked_topk():
    assert m.route([0.1, 0.9, 0.5, 0.9], 2) == (1, 3)


def test_select_k1_is_argmax():
    assert m.select([0.0, 3.0, 1.0], 2**63, 1) == 1


def test_run_is_deterministic_and_batch_invariant(any_spec, rng):
    ps = prompts(rng, 12)
    ss = seeds(12)
    for dev in (DeviationConfig(), QUANTIZED, DeviationConfig.substituted(0.5)):
        batch = m.run_batch(any_spec, dev, ps, ss, list(range(12)))
        for i in (0, 5, 11):
            one = m.run(any_spec, dev, ps[i], ss[i], noise_key=i)
            assert one.trace == batch[i].trace
            assert one.output_tokens == batch[i].output_tokens
            assert one.reported_token_count == batch[i].reported_token_count


def test_run_trace_structure(any_spec, rng):
    r = m.run(any_spec, DeviationConfig(), prompts(rng, 1)[0], seeds(1)[0])
    tr = r.trace
    assert len(tr) == r.reported_token_count * any_spec.points_per_step
    assert r.reported_token_count <= any_spec.max_steps
    y, T = m.reconstruct(tr.token_decisions, any_spec.stop_token)
    assert y == r.output_tokens and T == r.reported_token_count
    for i, s in enumerate(tr):
        assert s.step_index == i and s.decision_kind is any_spec.decision_kind(i)


def test_stop_token_ends_generation(spec, rng):
    for r in m.run_batch(spec, DeviationConfig(), prompts(rng, 40), seeds(40)):
        dec = r.trace.token_decisions.tolist()
        if spec.stop_token in dec:
            assert dec.index(spec.stop_token) == len(dec) - 1


def test_rerun_reproduces_reference_exactly(any_spec, rng):
    ps = prompts(rng, 8)
    for r, p in zip(m.run_batch(any_spec, DeviationConfig(), ps, seeds(8)), ps):
        refs = m.reexecute_aligned(any_spec, p, r.trace.decisions())
        for step_ref, s in zip(refs, r.trace):
            if s.logits is not None:
                assert np.array_equal(step_ref, s.logits)


def test_compact_logging_stores_topk(spec, rng):
    p, s = prompts(rng, 1)[0], seeds(1)[0]
    full = m.run(spec, DeviationConfig(), p, s, LoggingMode.FULL)
    compact = m.run(spec, DeviationConfig(), p, s, LoggingMode.COMPACT)
    assert np.array_equal(full.trace.token_decisions, compact.trace.token_decisions)
    assert np.array_equal(compact.trace.token_payload, m.topk_rows(full.trace.token_payload, spec.top_k_tokens))


def test_overreport_transform(spec, rng):
    p, s = prompts(rng, 1)[0], seeds(1)[0]
    base = m.run(spec, DeviationConfig(), p, s)
    _, dev = m.transform_overreport(spec, 5)
    over = m.run(spec, dev, p, s)
    assert over.output_tokens == base.output_tokens
    assert over.reported_token_count == base.reported_token_count + 5
    assert over.executed_steps == base.executed_steps
    assert over.trace.token_decisions[-5:].tolist() == [spec.stop_token] * 5
    with pytest.raises(InvalidArgument):
        m.transform_overreport(spec, 0)


def test_naive_overreport_inflates_only_count(spec, rng):
    p, s = prompts(rng, 1)[0], seeds(1)[0]
    base = m.run(spec, DeviationConfig(), p, s)
    dev = DeviationConfig(DeviationKind.OVERREPORT, dummy_steps=3, overreport_mode="naive")
    over = m.run(spec, dev, p, s)
    assert over.trace == base.trace and over.reported_token_count == base.reported_token_count + 3


def test_fabricated_commits_reference_like_logits(spec, rng):
    ps, ss = prompts(rng, 5), seeds(5)
    dev = DeviationConfig(DeviationKind.FABRICATED, noise_sigma=0.2, fabrication_sigma=0.001)
    noisy = m.run_batch(spec, DeviationConfig.quantized(0.2), ps, ss, list(range(5)))
    fab = m.run_batch(spec, dev, ps, ss, list(range(5)))
    for r, n, p in zip(fab, noisy, ps):
        # fake logits track the reference along the path the noisy run actually took
        refs = np.array(m.reexecute_aligned(spec, p, n.trace.decisions()))
        assert np.abs(refs - r.trace.token_payload).max() < 0.02
        assert r.output_tokens == n.output_tokens


def test_substitution_changes_logits(spec, rng):
    p, s = prompts(rng, 1)[0], seeds(1)[0]
    a = m.run(spec, DeviationConfig(), p, s)
    b = m.run(spec, DeviationConfig.substituted(substitute_seed=99), p, s)
    assert not np.array_equal(a.trace.token_payload[0], b.trace.token_payload[0])


def test_alignment_errors(moe_spec):
    with pytest.raises(AlignmentError):
        m.reexecute_aligned(moe_spec, [1, 2], [(0, 1), 5, (0, 1)])
    with pytest.raises(AlignmentError):
        m.reexecute_aligned(moe_spec, [1, 2], [5])


def test_trace_from_steps_roundtrip(any_spec, rng):
    r = m.run(any_spec, QUANTIZED, prompts(rng, 1)[0], seeds(1)[0], noise_key=3)
    steps = list(r.trace)
    again = m.Trace.from_steps(steps, r.trace.mode)
    assert again == r.trace
    c = r.trace.copy()
    c.token_decisions[0] ^= 1
    assert c != r.trace


def test_trace_rejects_mismatched_columns():
    with pytest.raises(ShapeError):
        m.Trace(LoggingMode.FULL, np.zeros(2, np.uint8), np.zeros(1, np.uint64), np.zeros((2, 4)),
                np.zeros(2, np.int64), np.zeros((0, 0), np.int64))
