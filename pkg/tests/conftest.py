import numpy as np
import pytest

from controllers import ControlProblem
from estimation import fit_least_squares
from sysdata import Dimensions, benchmark_plant, build_bundle, generate_training


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def plant():
    return benchmark_plant()


def make_bundle(rho, T, N, seed=0, noise_std=0.1, input_std=0.6):
    dims = Dimensions(rho, T, 1, 1, N)
    record = generate_training(benchmark_plant(), dims, input_std=input_std, noise_std=noise_std, seed=seed)
    return build_bundle(record, dims)


def make_problem(bundle, setpoint=0.75, column=0, box=(-1.0, 1.0)):
    d = bundle.dims
    return ControlProblem.tracking(bundle.Z[:, column], d.future_horizon, setpoint, q=1.0, r=0.1, input_box=box)


@pytest.fixture
def bundle_factory():
    return make_bundle


@pytest.fixture
def problem_factory():
    return make_problem


@pytest.fixture
def noisy_bundle():
    """rho = 3, T = 5: n_phi = 11, N well above n_phi + T"""
    return make_bundle(3, 5, 60, seed=7)


@pytest.fixture
def noisy_model(noisy_bundle):
    return fit_least_squares(noisy_bundle)


@pytest.fixture
def clean_bundle():
    return make_bundle(4, 5, 80, seed=3, noise_std=0.0)
