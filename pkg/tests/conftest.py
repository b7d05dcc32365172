from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import matchkit
from matchkit.data import panel_from_frame
from matchkit.simulation import DgpConfig, generate_cd_dgp

FIXTURES = Path(matchkit.__file__).parent / "fixtures"

# acceptance outcomes, filled by test_acceptance and echoed in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"CRITERION {k}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def cd_panel_600():
    return generate_cd_dgp(DgpConfig(T=600, seed=3))


@pytest.fixture(scope="session")
def cd_panel_200():
    return generate_cd_dgp(DgpConfig(T=200, seed=4))


def make_panel(H, U, V, markets=None, periods=None):
    n = len(H)
    markets = ["m"] * n if markets is None else markets
    periods = list(range(n)) if periods is None else periods
    return panel_from_frame(pd.DataFrame({"market_id": markets, "period": periods,
                                          "hires": H, "unemployed": U, "vacancies": V}))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
