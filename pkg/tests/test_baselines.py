import itertools

import numpy as np
import pytest

from aggnn.baselines import (
    equal_allocation,
    neighbor_mask_from_threshold,
    random_allocation,
    wmmse_k,
    wmmse_k_detailed,
)
from aggnn.metrics import sum_capacity


def random_channel(m, seed, direct_boost=4.0):
    """Random power-gain matrix with strengthened direct links."""
    rng = np.random.default_rng(seed)
    H = rng.uniform(0.05, 1.0, (m, m))
    H[np.diag_indices(m)] = rng.uniform(1.0, 1.0 + direct_boost, m)
    return H


class TestWmmse:
    def test_single_link_reaches_full_power(self):
        # one link, unit gain, unit noise: optimum is the cap, rate log2(3)
        H = np.array([[1.0]])
        p = wmmse_k(H, iterations=5, p0=2.0, noise_power=1.0)
        assert p[0] == pytest.approx(2.0, abs=1e-12)
        assert sum_capacity(p, H) == pytest.approx(np.log2(3.0), abs=1e-12)

    def test_no_interference_everyone_at_cap(self):
        H = np.diag([1.0, 2.0, 0.5])
        p = wmmse_k(H, iterations=6, p0=2.0, noise_power=1.0)
        np.testing.assert_allclose(p, np.full(3, 2.0), atol=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_sum_rate_monotone_over_iterations(self, seed):
        H = random_channel(4, seed)
        run = wmmse_k_detailed(H, iterations=12, p0=2.0, noise_power=1.0)
        rates = [sum_capacity(p, H) for p in run.per_iteration]
        for earlier, later in zip(rates, rates[1:]):
            assert later >= earlier - 1e-9

    @pytest.mark.parametrize("seed", range(20))
    def test_power_cap_respected_every_iteration(self, seed):
        H = random_channel(5, seed + 100)
        run = wmmse_k_detailed(H, iterations=8, p0=2.0)
        for p in run.per_iteration:
            assert np.all(p >= 0.0) and np.all(p <= 2.0 + 1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_near_bruteforce_on_three_links(self, seed):
        # discretized exhaustive search over {0, p0/10, ..., p0}^3
        H = random_channel(3, seed + 500)
        p0 = 2.0
        levels = np.linspace(0.0, p0, 11)
        best = max(
            sum_capacity(np.array(combo), H)
            for combo in itertools.product(levels, repeat=3)
        )
        p = wmmse_k(H, iterations=50, p0=p0)
        assert sum_capacity(p, H) >= 0.95 * best

    def test_neighborhood_mask_limits_coupling(self):
        H = random_channel(4, seed=3)
        mask = neighbor_mask_from_threshold(H, h_eps=0.5)
        assert mask.diagonal().all()
        p_full = wmmse_k(H, iterations=5, p0=2.0)
        p_masked = wmmse_k(H, iterations=5, p0=2.0, neighbor_mask=mask)
        assert p_masked.shape == p_full.shape
        assert np.all(p_masked <= 2.0 + 1e-15)

    def test_validation(self):
        with pytest.raises(ValueError):
            wmmse_k(np.eye(2), iterations=0, p0=2.0)
        with pytest.raises(ValueError):
            wmmse_k(np.eye(2), iterations=1, p0=0.0)
        with pytest.raises(ValueError):
            wmmse_k(-np.eye(2), iterations=1, p0=1.0)

    def test_zero_gain_links_guarded(self):
        # an all-zero row would divide by zero without the denominator floor
        H = np.array([[0.0, 0.0], [0.0, 1.0]])
        run = wmmse_k_detailed(H, iterations=3, p0=2.0)
        assert np.all(np.isfinite(run.powers))


class TestEqualAllocation:
    def test_paper_scale(self):
        np.testing.assert_array_equal(equal_allocation(25, 25.0), np.ones(25))

    def test_single_node(self):
        np.testing.assert_array_equal(equal_allocation(1, 7.0), [7.0])

    def test_budget_met_exactly(self):
        for m in (2, 9, 33):
            assert equal_allocation(m, 13.0).sum() == pytest.approx(13.0, rel=1e-12)


class TestRandomAllocation:
    def test_transmit_probability(self):
        rng = np.random.default_rng(0)
        draws = np.array([random_allocation(25, 2.0, 25.0, rng) for _ in range(10_000)])
        # p0=2, P_max=25, m=25 -> transmit probability 1/2
        assert (draws > 0).mean() == pytest.approx(0.5, abs=0.01)
        assert draws.sum(axis=1).mean() == pytest.approx(25.0, abs=1.0)

    def test_full_budget_means_everyone_on(self):
        rng = np.random.default_rng(1)
        p = random_allocation(4, 2.0, 8.0, rng)
        np.testing.assert_array_equal(p, np.full(4, 2.0))

    def test_overcommitted_budget_rejected(self):
        with pytest.raises(ValueError):
            random_allocation(4, 1.0, 8.0, np.random.default_rng(0))

    def test_values_binary(self):
        rng = np.random.default_rng(2)
        p = random_allocation(50, 2.0, 30.0, rng)
        assert set(np.unique(p)) <= {0.0, 2.0}
