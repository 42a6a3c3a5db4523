import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE))

PD_MODEL = """
ind60 =~ x1 + x2 + x3
dem60 =~ y1 + y2 + y3 + y4
dem65 =~ y5 + y6 + y7 + y8
dem60 ~ ind60
dem65 ~ ind60 + dem60
y1 ~~ y5
y2 ~~ y4 + y6
y3 ~~ y7
y4 ~~ y8
y6 ~~ y8
"""


@pytest.fixture(scope="session")
def pd_frame():
    return pd.read_csv(HERE / "data" / "political_democracy.csv")


@pytest.fixture(scope="session")
def pd_model():
    return PD_MODEL


@pytest.fixture(scope="session")
def pd_fit(pd_frame):
    from semlaplace import fit_model

    return fit_model(PD_MODEL, pd_frame)


@pytest.fixture(scope="session")
def small_frame():
    from oracles.sim import one_factor

    return one_factor(n=75, seed=3)


@pytest.fixture(scope="session")
def small_fit(small_frame):
    from oracles.sim import ONE_FACTOR_MODEL
    from semlaplace import fit_model

    return fit_model(ONE_FACTOR_MODEL, small_frame, seed=5, nsamp=400)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(LINES):
            terminalreporter.write_line(LINES[k])
