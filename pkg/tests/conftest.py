import numpy as np
import pytest

from defit import BackboneConfig, DualEncoder, SyntheticBenchConfig
from defit import generate_synthetic_benchmark


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_backbone():
    return BackboneConfig.tiny(seed=0)


@pytest.fixture
def model(tiny_backbone):
    return DualEncoder(tiny_backbone, lora_rank=4, lora_scale=1.0,
                       prompt_depth=3, prompt_width=2, theta_seed=7)


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    """Small on-disk synthetic benchmark shared by IO-heavy tests."""
    root = tmp_path_factory.mktemp("bench")
    cfg = SyntheticBenchConfig(num_classes=3, train_per_class=6,
                               test_id_per_class=4, test_ood_per_class=4,
                               rho_train=0.9, rho_ood=1.0 / 3.0, seed=11)
    return generate_synthetic_benchmark(cfg, root)
