import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from power_alloc import effective_gains, uniform_active, waterfill

def test_waterfilling_satisfies_kkt_on_random_gains():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        gains = 10 ** rng.uniform(-2, 3, size=int(rng.integers(1, 33)))
        Pt = 10 ** rng.uniform(-3, 1)
        allocation = waterfill(gains, Pt)
        p, mu = allocation.p, allocation.mu
        assert p.sum() == pytest.approx(Pt, rel=1e-9)
        assert np.all(p >= 0)
        on = p > 0
        # Powered links sit exactly on the water level, switched-off links lie above it
        assert np.allclose(p[on] + 1 / gains[on], mu, rtol=1e-9)
        assert np.all(1 / gains[~on] >= mu * (1 - 1e-9))

def test_equal_gains_share_the_budget_equally():
    allocation = waterfill(np.full(8, 5.0), 1.0)
    assert np.allclose(allocation.p, 1 / 8)

def test_stronger_links_get_more_power():
    allocation = waterfill(np.array([1.0, 10.0, 100.0]), 2.0)
    assert np.all(np.diff(allocation.p) >= 0)

def test_inactive_links_carry_no_power_but_keep_a_tone_power():
    gains = np.array([[4.0, 4.0], [4.0, 4.0]])
    Z = np.array([[1, 0], [0, 1]])
    allocation = waterfill(gains, 1.0, Z)
    assert np.allclose(allocation.p, [[0.5, 0.0], [0.0, 0.5]])
    assert np.allclose(allocation.tone_power, 0.5)

def test_zero_budget_allocates_nothing():
    allocation = waterfill(np.ones(4), 0.0)
    assert allocation.total == 0.0

def test_invalid_inputs_raise():
    with pytest.raises(ValueError):
        waterfill(np.ones(3), 1.0, np.zeros(3))
    with pytest.raises(ValueError):
        waterfill(np.ones(3), -1.0)
    with pytest.raises(ValueError, match="shape"):
        waterfill(np.ones(3), 1.0, np.ones(4))
    with pytest.raises(ValueError):
        waterfill(np.zeros(3), 1.0, np.ones(3))

@given(arrays(np.float64, 6, elements=st.floats(min_value=0.01, max_value=1e3)),
       st.floats(min_value=1e-3, max_value=10.0))
@settings(max_examples=50, deadline=None)
def test_budget_is_always_met(gains, Pt):
    assert waterfill(gains, Pt).total == pytest.approx(Pt, rel=1e-9)

def test_blocks_view(rng):
    allocation = waterfill(rng.uniform(1, 10, (2, 8)), 1.0)
    assert allocation.blocks(4).shape == (2, 2, 4)

def test_effective_gains_read_the_diagonal():
    S = np.array([[[2.0, 7.0], [9.0, 1.0j]]])
    assert np.allclose(effective_gains(S, 0.5), [[8.0], [2.0]])

def test_uniform_allocation_over_active_links():
    Z = np.array([[1, 0, 1, 0], [0, 1, 1, 0]])
    allocation = uniform_active(Z, 0.6)
    assert allocation.total == pytest.approx(0.6)
    assert np.allclose(allocation.p[Z == 1], 0.15)
    assert np.all(allocation.p[Z == 0] == 0)
    with pytest.raises(ValueError):
        uniform_active(np.zeros((2, 4)), 1.0)
