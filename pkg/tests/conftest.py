import pytest

from sernet.model import LflbSpec, ModelConfig, PathSpec


TINY_CFG = ModelConfig(
    paths=(PathSpec("h", (3, 1), 2), PathSpec("v", (1, 3), 2), PathSpec("l", (3, 3), 2)),
    lflbs=(LflbSpec((3, 3), 4, (2, 2)), LflbSpec((3, 3), 4, None)),
    num_classes=3,
)


@pytest.fixture
def tiny_cfg():
    return TINY_CFG


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
