import numpy as np
import pytest

from adranklab import DEFAULT_BOUNDS
from adranklab.calibration import fit_from_responses
from adranklab.env import Calibrators, EnvConfig
from adranklab.nets import StateSpec
from adranklab.replay import GeneratorConfig, generate_log, sample_responses


@pytest.fixture(scope="session")
def small_config():
    return GeneratorConfig(num_sessions=200, positions_per_session=4,
                           candidates_min=5, candidates_max=12,
                           query_vocab=6, device_vocab=2)


@pytest.fixture(scope="session")
def small_records(small_config):
    return list(generate_log(small_config, seed=42))


@pytest.fixture(scope="session")
def fitted_calibrators(small_records):
    ctr, cvr = fit_from_responses(sample_responses(small_records, seed=11),
                                  min_samples=200)
    return Calibrators(ctr=ctr, cvr=cvr)


@pytest.fixture(scope="session")
def identity_cal():
    return Calibrators.identity()


@pytest.fixture(scope="session")
def env_cfg(small_config):
    return EnvConfig(delta=1.0, gamma=0.9,
                     positions_per_session=small_config.positions_per_session)


@pytest.fixture(scope="session")
def bounds():
    return DEFAULT_BOUNDS


@pytest.fixture(scope="session")
def tiny_spec(small_config):
    return StateSpec(fields=("query_id", "ad_position"),
                     vocab={"query_id": small_config.query_vocab,
                            "ad_position": small_config.positions_per_session})


@pytest.fixture
def rng():
    return np.random.default_rng(0)
