import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vmrfanet.data import load_manifest, synth_generate
from vmrfanet.network import Network, NetworkConfig

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def toy_config():
    return NetworkConfig.toy(num_identities=4)


@pytest.fixture(scope="session")
def toy_net(toy_config):
    return Network(toy_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """6 identities x 3 cameras x 6 images at 64x24, for fast pipeline tests."""
    out = tmp_path_factory.mktemp("tiny")
    manifest = synth_generate(6, 3, 6, 64, 24, seed=5, out_dir=str(out))
    return manifest, load_manifest(manifest)
