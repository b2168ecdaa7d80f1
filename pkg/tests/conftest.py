import pathlib

import pytest

from securekf.decomposition import build_decomposition
from securekf.model import load_model
from securekf.spectral import spectral_design

REPO_ROOT = pathlib.Path(__file__).resolve().parent.parent
PENDULUM_PATH = REPO_ROOT / "configs" / "pendulum.json"


@pytest.fixture(scope="session")
def pendulum_model():
    return load_model(PENDULUM_PATH)


@pytest.fixture(scope="session")
def pendulum_path():
    return PENDULUM_PATH


@pytest.fixture(scope="session")
def pendulum_design(pendulum_model):
    return spectral_design(pendulum_model)


@pytest.fixture(scope="session")
def pendulum_decomposition(pendulum_model, pendulum_design):
    return build_decomposition(pendulum_model, pendulum_design)
