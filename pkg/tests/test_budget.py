import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ghostkv import (BudgetPlan, InfeasibleBudgetError, LayerProfile, ValidationError,
                     ZeroNormSampleError, allocate_budgets, mean_cosine_profile, sweep_temperature)

import oracles as O

HAND_LAYERS = [
    [([1, 0, 0, 0], [1, 1, 0, 0]), ([0, 1, 2, 0], [0, 1, 0, 0]), ([1, 1, 1, 1], [1, -1, 1, -1])],
    [([1, 2, 3, 4], [4, 3, 2, 1]), ([1, 0, 1, 0], [1, 0, 1, 0]), ([2, 0, 0, 1], [0, 0, 0, 3])],
    [([1, 1, 0, 0], [-1, 0, 0, 0]), ([0, 0, 1, 1], [0, 0, 1, 2]), ([3, 1, 4, 1], [5, 9, 2, 6])],
]
# mean of the three per-sample cosines, computed by the oracle
HAND_RHO = [0.3847734588955018, 0.7046267540555414, 0.28227108714982063]


class TestProfile:
    def test_identity(self, rng):
        xs = [[(x, x) for x in rng.normal(size=(4, 6))] for _ in range(3)]
        np.testing.assert_allclose(mean_cosine_profile(xs).rho_bar, 1.0, rtol=1e-15)

    def test_antiparallel(self, rng):
        xs = [[(x, -x) for x in rng.normal(size=(4, 6))] for _ in range(2)]
        np.testing.assert_allclose(mean_cosine_profile(xs).rho_bar, -1.0, rtol=1e-15)

    def test_hand_vectors(self):
        prof = mean_cosine_profile(HAND_LAYERS)
        np.testing.assert_allclose(prof.rho_bar, HAND_RHO, rtol=1e-12)
        assert prof.sample_count.tolist() == [3, 3, 3]

    def test_zero_norm_location(self):
        layers = [[([1, 0], [1, 0])], [([1, 1], [1, 1]), ([0, 0], [1, 0])]]
        with pytest.raises(ZeroNormSampleError, match="layer 1, sample 1"):
            mean_cosine_profile(layers)


class TestAllocate:
    def test_uniform_24(self):
        plan = allocate_budgets(LayerProfile.from_values([0.8] * 24), 0.5, 1_200_000)
        assert plan.budgets.tolist() == [50_000] * 24

    def test_residual_to_layer_zero(self):
        plan = allocate_budgets(LayerProfile.from_values([0.7] * 5), 0.5, 5 * 11 + 3, floor=0)
        assert plan.budgets.tolist() == [14, 11, 11, 11, 11]

    def test_argmin_rho_gets_argmax_budget(self, rng):
        for _ in range(50):
            rho = rng.uniform(-1, 1, size=int(rng.integers(2, 30)))
            plan = allocate_budgets(LayerProfile.from_values(rho), float(rng.uniform(0.1, 2)), 500_000, floor=0)
            assert plan.budgets[np.argmin(rho)] == plan.budgets.max()

    def test_two_layer_sharp_limit(self):
        # direct evaluation at tau = 1e-3
        plan = allocate_budgets(LayerProfile.from_values([0.0, 1.0]), 1e-3, 10_000, floor=100)
        assert plan.budgets.tolist() == [9_900, 100]

    def test_infeasible(self):
        with pytest.raises(InfeasibleBudgetError):
            allocate_budgets(LayerProfile.from_values([0.5, 0.6]), 0.5, 100, floor=51)

    def test_bad_tau(self):
        with pytest.raises(ValidationError):
            allocate_budgets(LayerProfile.from_values([0.5, 0.6]), 0.0, 100, floor=0)

    def test_default_floor_is_one_frame(self):
        plan = allocate_budgets(LayerProfile.from_values([0.0, 1.0]), 0.05, 100_000)
        assert plan.floor == 581 and plan.budgets.min() == 581

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=12), st.floats(0.02, 5),
           st.integers(0, 50), st.integers(0, 5000))
    def test_matches_literal_oracle(self, rho, tau, floor, extra):
        total = len(rho) * floor + extra
        plan = allocate_budgets(LayerProfile.from_values(rho), tau, total, floor)
        assert plan.budgets.tolist() == O.allocate(rho, tau, total, floor)


class TestSweep:
    def test_variance_nonincreasing(self):
        prof = LayerProfile.from_values(np.linspace(0.99, 0.6, 24))
        plans = sweep_temperature(prof, (0.3, 0.5, 0.7, 1.0), 1_200_000)
        var = [float(np.var(p.budgets)) for p in plans]
        assert all(a >= b for a, b in zip(var, var[1:]))

    def test_constant_profile(self):
        plans = sweep_temperature(LayerProfile.from_values([0.9] * 4), (0.3, 1.0, 3.0), 400, floor=0)
        assert all(p.budgets.tolist() == [100] * 4 for p in plans)


class TestPlan:
    def test_dict_roundtrip(self):
        plan = allocate_budgets(LayerProfile.from_values([0.9, 0.7, 0.8]), 0.5, 3000, floor=10)
        assert BudgetPlan.from_dict(plan.to_dict()) == plan

    def test_sum_checked(self):
        with pytest.raises(ValidationError):
            BudgetPlan([1, 2], 4)
