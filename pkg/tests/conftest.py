import numpy as np
import pytest

from causal_fingerprint.ingest import Recording
from causal_fingerprint.synth import sample_system, simulate

_CRITERIA = {}


def record_criterion(number, passed, detail):
    _CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        ok, detail = _CRITERIA[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_recording(system, T=300, subject="s001", task="REST", session="A", seed=0,
                   sigma_noise=0.02):
    X, U = simulate(system, T, sigma_noise=sigma_noise, seed=seed)
    return Recording(subject, task, session, np.vstack([X, U]), 0.72)


@pytest.fixture
def small_system():
    return sample_system(5, 2, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
