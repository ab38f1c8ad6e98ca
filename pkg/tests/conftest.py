import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from stats_models import ProblemSpec  # noqa: E402

CONFIG_DIR = ROOT / "configs"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the multi-seed acceptance experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-seed experiment runs (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# ------------------------------------------------------------------ #
# Fixtures
# ------------------------------------------------------------------ #


@pytest.fixture()
def rng():
    return np.random.default_rng(42)


@pytest.fixture()
def config_dir():
    return CONFIG_DIR


@pytest.fixture()
def poisson_spec():
    return ProblemSpec(
        name="poisson_wellspec", model_family="poisson", param_bounds=[(0.1, 10.0)],
        grid_resolution=1001, true_process={"kind": "poisson", "rate": 3.0},
    )


@pytest.fixture()
def poisson_misspec():
    return ProblemSpec(
        name="poisson_misspec", model_family="poisson", param_bounds=[(0.1, 10.0)],
        grid_resolution=1001, true_process={"kind": "neg_binomial", "r": 10, "p": 0.8},
    )


@pytest.fixture()
def gaussian_spec():
    return ProblemSpec(
        name="gaussian_wellspec", model_family="gaussian", param_bounds=[(-3.0, 5.0), (-3.0, 3.0)],
        grid_resolution=101, true_process={"kind": "gaussian", "mean": 1.0, "var": 1.0},
    )


@pytest.fixture()
def regression_spec():
    return ProblemSpec(
        name="regression_wellspec", model_family="regression",
        param_bounds=[(-2.0, 2.0), (-3.0, 1.0), (-4.0, 2.0)], grid_resolution=21,
        true_process={"kind": "regression_gaussian", "beta0": 0.0, "beta1": -1.0, "sigma": 0.5},
    )


@pytest.fixture(autouse=True)
def _no_thread_env(monkeypatch):
    monkeypatch.delenv("ROBUST_BELIEF_THREADS", raising=False)
