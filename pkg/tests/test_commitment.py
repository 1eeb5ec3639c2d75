import numpy as np
import pytest

from lddaudit import commitment as c
from lddaudit import model as m
from lddaudit.errors import InvalidArgument, ShapeError, UnsupportedScheme
from lddaudit.model import DeviationConfig, LoggingMode, ModelSpec

from conftest import prompts, seeds


def _opening(spec, mode=LoggingMode.FULL, i=0):
    rng = np.random.default_rng(i)
    r = m.run(spec, DeviationConfig(), prompts(rng, 1)[0], seeds(1, i)[0], mode)
    return c.TraceOpening(r.seed_r, r.trace)


@pytest.mark.parametrize("mode", list(LoggingMode))
def test_serialize_roundtrip(any_spec, mode):
    op = _opening(any_spec, mode)
    scheme, back = c.deserialize_opening(c.serialize_opening(op))
    assert scheme == c.SCHEME and back.seed_r == op.seed_r and back.trace == op.trace


@pytest.mark.parametrize("mode", list(LoggingMode))
def test_vectorized_records_match_per_step_encoding(any_spec, mode):
    op = _opening(any_spec, mode)
    assert c._records(op.trace) == c.steps_bytes(list(op.trace))


def test_commit_verify_binding(spec):
    op = _opening(spec)
    com = c.commit_trace(op)
    assert c.verify(com, op)
    tr = op.trace.copy()
    tr.token_payload[0, 0] = np.nextafter(tr.token_payload[0, 0], np.inf)
    assert not c.verify(com, c.TraceOpening(op.seed_r, tr))
    assert not c.verify(com, c.TraceOpening(b"\xff" * 32, op.trace))


def test_model_commitment(spec):
    assert c.verify(c.commit_model(spec), spec)
    assert not c.verify(c.commit_model(spec), ModelSpec(seed=spec.seed + 1, max_steps=spec.max_steps))
    assert c.commit_model(spec).hex == c.commit_model(ModelSpec(seed=11, max_steps=16)).hex


def test_unknown_scheme_raises(spec):
    com = c.Commitment(c.commit_model(spec).digest, "other")
    with pytest.raises(UnsupportedScheme):
        c.verify(com, spec)


def test_commitment_validation():
    with pytest.raises(InvalidArgument):
        c.Commitment(b"short")
    d = bytes(range(32))
    assert c.Commitment.from_hex(d.hex()).digest == d


def test_truncated_and_trailing_bytes_rejected(spec):
    data = c.serialize_opening(_opening(spec))
    with pytest.raises(ShapeError):
        c.deserialize_opening(data[:-1])
    with pytest.raises(ShapeError):
        c.deserialize_opening(data + b"\x00")


def test_per_token_bytes(spec):
    full = c.per_token_bytes(_opening(spec, LoggingMode.FULL))
    compact = c.per_token_bytes(_opening(spec, LoggingMode.COMPACT))
    assert compact < full
    assert compact <= 1024
