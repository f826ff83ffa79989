import numpy as np
import pytest

from stratakit.core import InfeasibleBudgetError, Propensity, RandomSource, StratakitError
from stratakit.optimal import (
    BudgetSpec,
    VarianceProfile,
    alternating_design,
    cut_weight,
    design_mse,
    discretize_propensity,
    feasibility_rounding,
    neyman_propensity,
    optimal_constant_propensity,
    optimal_sampling_propensity,
)


def all_allocations(n: int) -> np.ndarray:
    codes = np.arange(2**n)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(float)


# ------------------------ Propensities ------------------------


def test_neyman_propensity_hand_computed():
    profile = VarianceProfile([3.0, 1.0], [1.0, 1.0])
    np.testing.assert_allclose(neyman_propensity(profile), [0.75, 0.5])


def test_constant_propensity_uses_root_mean_squares():
    assert optimal_constant_propensity(VarianceProfile.homoskedastic(10, 3.0, 1.0)) == pytest.approx(0.75)
    profile = VarianceProfile([1.0, 7.0], [5.0, 5.0])
    assert optimal_constant_propensity(profile) == pytest.approx(5.0 / 10.0)


def test_profile_rejects_non_positive_spread():
    with pytest.raises(StratakitError):
        VarianceProfile([1.0, 0.0], [1.0, 1.0])


def test_sampling_propensity_scales_with_inverse_root_cost():
    costs = np.array([2.0, 3.0, 5.0, 8.0])
    budget = BudgetSpec(1.0, costs)
    q = optimal_sampling_propensity(VarianceProfile.homoskedastic(4), 0.5, budget)
    ratio = q * np.sqrt(costs)
    np.testing.assert_allclose(ratio, ratio[0])
    assert np.mean(q * costs) == pytest.approx(1.0)


def test_budget_spec_flags_saturation():
    assert BudgetSpec(5.0, [1.0, 9.0]).saturated
    assert not BudgetSpec(4.9, [1.0, 9.0]).saturated
    with pytest.raises(StratakitError):
        BudgetSpec(0.0, [1.0])


# ----------------------- Feasibility --------------------------


def test_feasibility_rounding_on_random_instances():
    gen = np.random.default_rng(2024)
    for _ in range(100):
        n = int(gen.integers(20, 200))
        costs = gen.uniform(0.1, 10.0, size=n)
        profile = VarianceProfile(gen.uniform(0.5, 3.0, size=n), gen.uniform(0.5, 3.0, size=n))
        B = float(gen.uniform(0.2, 0.9) * costs.mean())
        q_star = optimal_sampling_propensity(profile, neyman_propensity(profile), BudgetSpec(B, costs))
        q = feasibility_rounding(q_star, costs, B)
        assert np.mean(q * costs) == pytest.approx(B, rel=1e-9)
        assert q.max() <= 1.0 + 1e-12
        assert q.min() > 0


def test_feasibility_rounding_freezes_one_unit_at_a_time():
    costs = np.array([0.01] * 3 + [1.0] * 97)
    B = 0.3
    q_star = optimal_sampling_propensity(VarianceProfile.homoskedastic(100), 0.5, BudgetSpec(B, costs))
    assert np.sum(q_star > 1) == 3
    q = feasibility_rounding(q_star, costs, B)
    np.testing.assert_allclose(q[:3], 1.0)
    np.testing.assert_allclose(q[3:], (B - 0.03 / 100) * 100 / 97)
    assert np.mean(q * costs) == pytest.approx(B, rel=1e-9)


def test_feasibility_rounding_saturated_budget(capsys):
    q = feasibility_rounding([1.2, 1.2], [1.0, 1.0], 1.2)
    np.testing.assert_array_equal(q, [1.0, 1.0])
    assert "[optimal] WARNING" in capsys.readouterr().out


def test_feasibility_rounding_checks_input_spend():
    with pytest.raises(InfeasibleBudgetError):
        feasibility_rounding([0.5, 0.5], [1.0, 1.0], 0.9)


def test_spend_check_is_relative_for_small_budgets():
    B = 1e-3
    with pytest.raises(InfeasibleBudgetError):
        feasibility_rounding([B, B], [1.0, 1.0], B * (1 + 1e-7))
    q = feasibility_rounding([B, B], [1.0, 1.0], B * (1 + 1e-12))
    np.testing.assert_allclose(q, [B, B])


# ------------------------ Discretization ----------------------


def test_discretize_constant_value():
    pm = discretize_propensity(np.full(6, 0.75), 8, 3)
    assert pm.levels == (Propensity(3, 4),)


def test_discretize_respects_level_budget():
    q = [0.1, 0.1, 0.5, 0.5, 0.9]
    assert [str(v) for v in discretize_propensity(q, 10, 3).values] == ["1/10", "1/10", "1/2", "1/2", "9/10"]
    assert discretize_propensity(q, 10, 1).levels == (Propensity(2, 5),)


def test_discretize_midpoint_goes_down():
    q = [0.125] * 3 + [0.375] * 3 + [0.25]
    pm = discretize_propensity(q, 8, 2)
    assert pm.levels == (Propensity(1, 8), Propensity(3, 8))
    assert pm[6] == Propensity(1, 8)


def test_discretize_rejects_out_of_range():
    with pytest.raises(StratakitError):
        discretize_propensity([0.0, 0.5], 8, 2)
    with pytest.raises(StratakitError):
        discretize_propensity([0.5], 1, 2)


# ---------------------- Alternating design --------------------


def test_cut_weight_hand_computed():
    assert cut_weight([1.0, 2.0, 3.0], [1, 0, 0]) == 5.0


@pytest.mark.parametrize("n", [8, 12, 16])
def test_exact_allocation_matches_brute_force(n):
    gen = np.random.default_rng(n)
    allocs = all_allocations(n)
    for _ in range(20):
        h = gen.normal(size=n) + 2.0
        best = float(np.min(((allocs - 0.5) @ h) ** 2))
        design = alternating_design(h, "exact", RandomSource(n))
        assert design.objective == pytest.approx(best, abs=1e-9)
        assert design.d_star[0] == 0
        assert design.cut == pytest.approx(h.sum() ** 2 / 4 - design.objective)


def test_heuristic_allocation_finds_the_optimum_on_small_inputs():
    gen = np.random.default_rng(5)
    allocs = all_allocations(8)
    for i in range(10):
        h = gen.uniform(1.0, 5.0, size=8)
        best = float(np.min(((allocs - 0.5) @ h) ** 2))
        design = alternating_design(h, "heuristic", RandomSource(i), restarts=200)
        assert design.objective == pytest.approx(best, abs=1e-9)


def test_alternating_design_beats_complete_randomization():
    gen = np.random.default_rng(3)
    n = 12
    y0 = gen.normal(size=n)
    y1 = y0 + gen.normal(size=n) + 1.0
    design = alternating_design(y1 + y0, "exact", RandomSource(0))
    balanced = [d for d in all_allocations(n) if d.sum() == n // 2]
    assert design_mse(y1, y0, [design.allocation]) <= design_mse(y1, y0, balanced) + 1e-12
    # the mirror carries the same error
    mirrored = design_mse(y1, y0, [design.d_star, 1 - design.d_star], weights=[0.5, 0.5])
    assert mirrored == pytest.approx(design_mse(y1, y0, [design.d_star]))


def test_mirror_is_a_coin_flip():
    h = np.arange(1.0, 9.0)
    firsts = set()
    for seed in range(40):
        design = alternating_design(h, "exact", RandomSource(seed))
        assert design.allocation.tolist() in (design.d_star.tolist(), (1 - design.d_star).tolist())
        firsts.add(int(design.allocation[0]))
    assert firsts == {0, 1}


def test_alternating_design_argument_checks():
    with pytest.raises(StratakitError):
        alternating_design(np.ones(30), "exact")
    with pytest.raises(StratakitError):
        alternating_design(np.ones(4), "greedy")
    with pytest.raises(StratakitError):
        alternating_design([], "exact")


def test_design_mse_single_allocation_hand_computed():
    y1 = np.array([2.0, 4.0])
    y0 = np.array([0.0, 0.0])
    # treat unit 0: estimate mean(4, 0) = 2, sample ATE 3
    assert design_mse(y1, y0, [np.array([1, 0])]) == pytest.approx(1.0)
