import pytest

from dropsim.config import SimConfig
from dropsim.core import ModelSpec
from dropsim.costmodel import CostCoefficients


@pytest.fixture
def small_model():
    # 8 layers x 2 GB, 200 KB per cached token
    return ModelSpec(num_layers=8, bytes_per_layer=2_000_000_000,
                     kv_bytes_per_token=200_000)


@pytest.fixture
def desk_cfg():
    """Default config shrunk to trigger memory pressure quickly."""
    cfg = SimConfig()
    cfg.cluster.hbm_bytes = 16_800_000_000  # 0.8 GB KVCache per instance
    cfg.report.drain_s = 600
    return cfg


@pytest.fixture
def unit_coeffs():
    return CostCoefficients(alpha=1e-3, beta=1e-2, gamma=0.0)
