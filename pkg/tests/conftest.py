"""
Shared fixtures for the test suite
"""

import numpy as np
import pytest

from app.models import ExperimentConfig
from app.services.coefficients_service import builtin_model
from app.services.levy_service import levy_model


@pytest.fixture
def trig_model():
    """Headline coefficients a = 0.3 sin, b = 0.4 cos, c = 0.5 sin."""
    return builtin_model("bounded_trig", [0.3, 0.4, 0.5])


@pytest.fixture
def linear_model():
    return builtin_model("linear", [0.05, 0.2, 0.3])


@pytest.fixture
def constant_model():
    return builtin_model("constant", [1.0, 2.0, 3.0])


@pytest.fixture
def headline_levy():
    return levy_model("compound_poisson_normal", [1.0, 0.0, 0.5])


@pytest.fixture
def atoms_levy():
    """Small jumps at +-1/2 with intensity 1 each."""
    return levy_model("compound_poisson_fixed", [1.0, 0.5, 1.0])


@pytest.fixture
def no_jumps():
    return levy_model("compound_poisson_fixed", [0.0, 1.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    """Run in an empty directory so logs/ and data/ land in tmp_path."""
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def small_trig_config(tmp_path):
    """Desk-sized bounded_trig experiment against the reference integrator."""
    return ExperimentConfig.model_validate({
        "model": {"name": "bounded_trig", "params": [0.3, 0.4, 0.5]},
        "levy": {"family": "compound_poisson_normal", "params": [1.0, 0.0, 0.5]},
        "run": {
            "test_function": "gaussian_bump",
            "x0": 0.5,
            "T": 1.0,
            "h_list": [0.25, 0.125, 0.0625],
            "h_fine": 0.0078125,
            "n_paths": 1000,
            "batch_size": 500,
            "seed": 7,
            "output_dir": str(tmp_path / "out"),
        },
    })


@pytest.fixture
def linear_config(tmp_path):
    """Linear model with the exact oracle; the scheme is exact at every h."""
    return ExperimentConfig.model_validate({
        "model": {"name": "linear", "params": [0.05, 0.2, 0.3]},
        "levy": {"family": "compound_poisson_normal", "params": [1.0, 0.0, 0.5]},
        "run": {
            "test_function": "identity",
            "oracle": "exact_linear",
            "x0": 1.0,
            "T": 1.0,
            "h_list": [0.25, 0.125, 0.0625],
            "n_paths": 1000,
            "batch_size": 500,
            "seed": 11,
            "output_dir": str(tmp_path / "linear"),
        },
    })
