import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest
import torch


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
