import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def log_row(x_id, S, Y=None, logp=-10.0, length=50, **extra):
    row = {"x_id": x_id, "judge_S": S, "logp_pi0": logp, "covariates": {"response_length": length}}
    if Y is not None:
        row["oracle_Y"] = Y
    row.update(extra)
    return row


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def _verdict(label: str, ok: bool, detail: str):
        line = f"{label}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return _verdict


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
