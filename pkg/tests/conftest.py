import re

import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    # one verdict line per acceptance criterion, in criterion order
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_(\d+)_", rep.nodeid)
            if rep.when == "call" and m:
                detail = dict(rep.user_properties).get("detail", "")
                lines.append((int(m.group(1)), "PASS" if rep.passed else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for n, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {n}: {verdict}  {detail}")
