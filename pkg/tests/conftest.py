import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sim_device import build_propagation
from system_config import SystemConfig
from upgd import make_context

@pytest.fixture
def tiny_cfg():
    """M=8, L=3, K=2, Nc=4: small enough for finite-difference checks"""
    return SystemConfig(Mx=4, Mz=2, L=3, K=2, S=2, Nc=4, N=2, V=1, T=5, paths=4)

@pytest.fixture
def tiny_prop(tiny_cfg):
    return build_propagation(tiny_cfg)

@pytest.fixture
def tiny_contexts(tiny_cfg, tiny_prop):
    return [make_context(tiny_cfg, seed, tiny_prop) for seed in range(4)]

@pytest.fixture
def rng():
    return np.random.default_rng(1234)
