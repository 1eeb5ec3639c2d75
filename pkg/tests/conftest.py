import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lddaudit.model import DeviationConfig, ModelSpec

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def spec():
    return ModelSpec(seed=11, max_steps=16)


@pytest.fixture
def moe_spec():
    return ModelSpec(seed=12, num_experts=8, top_k_experts=2, max_steps=12)


@pytest.fixture(params=["dense", "moe"])
def any_spec(request):
    if request.param == "dense":
        return ModelSpec(seed=11, max_steps=16)
    return ModelSpec(seed=12, num_experts=8, top_k_experts=2, max_steps=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def prompts(rng, n, vocab=64, lo=4, hi=24):
    return [tuple(int(t) for t in rng.integers(0, vocab, rng.integers(lo, hi + 1))) for _ in range(n)]


def seeds(n, base=0):
    return [bytes([(base + i) % 256, (base + i) // 256 % 256]) * 16 for i in range(n)]


BENIGN = DeviationConfig.benign(0.01)
QUANTIZED = DeviationConfig.quantized(0.05)


# acceptance results, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_COUNT = 12


def record(n: int, ok: bool, detail: str) -> None:
    """Store one criterion result; parametrized parts of a criterion are merged."""
    if n in ACCEPTANCE:
        prev_ok, prev = ACCEPTANCE[n]
        ok, detail = prev_ok and ok, f"{prev}; {detail}"
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


_COLLECTED: set[int] = set()


def pytest_collection_finish(session):
    for item in session.items:
        m = re.match(r"test_c(\d\d)_", item.name)
        if m and item.module.__name__.endswith("test_acceptance"):
            _COLLECTED.add(int(m.group(1)))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _COLLECTED:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            status = "PASS" if ok else "FAIL"
        elif n in _COLLECTED:
            status, detail = "FAIL", "errored before a result"
        else:
            status, detail = "SKIP", "not run (deselected)"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
