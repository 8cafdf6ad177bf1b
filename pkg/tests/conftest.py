from __future__ import annotations

import pytest

from fedgrid import grid
from fedgrid.env import MicrogridEnv

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion, ok: bool, detail: str) -> None:
    """Store and print one acceptance line; ``criterion`` is a number or a sub-part such as "7a"."""
    ACCEPTANCE[str(criterion)] = (ok, detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("ab")), k)):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>3s}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def nm3_model():
    return grid.nm3()


@pytest.fixture(scope="session")
def nm3_env(nm3_model):
    return MicrogridEnv(nm3_model)
