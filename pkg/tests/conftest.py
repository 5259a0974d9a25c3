import numpy as np
import pytest

from rick import rng as rngmod
from rick.models import build_gan


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def point_gan():
    return build_gan("point-mlp", rngmod.stream(0, "init"))


@pytest.fixture
def icon_gan():
    return build_gan("icon-conv", rngmod.stream(0, "init"))


# acceptance criteria report: test_acceptance records one line per criterion
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
