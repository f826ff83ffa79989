"""Monte Carlo checks; run with `pytest -m slow`."""

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from stratakit.cli import main
from stratakit.core import PropensityMap, RandomSource
from stratakit.estimate import estimate_design
from stratakit.pilot import PilotData, estimate_variance_functions
from stratakit.randomize import draw_groups, stratify, two_stage
from stratakit.sim import (
    DesignConfig,
    DesignId,
    DesignKind,
    DgpSpec,
    analytic_variance,
    generate_dgp,
    reveal,
    run_design_comparison,
    run_reps,
    summarize_reps,
    variance_functions,
)

pytestmark = pytest.mark.slow

WORKERS = os.cpu_count() or 1


def test_exact_counts_over_a_thousand_seeds():
    pts = np.random.default_rng(0).normal(size=(800, 2))
    partition, _ = stratify(pts, PropensityMap.constant(800, "3/8"), fold_size=100)
    groups = [np.asarray(g) for g in partition.groups]
    for seed in range(1000):
        T = draw_groups(partition, 800, RandomSource(seed))
        assert all(int(T[g].sum()) == 3 for g in groups)


def test_local_designs_reproduce_the_model_five_ratios():
    spec = DgpSpec.model(5, 800, dim=2)
    designs = [DesignId(DesignKind.CR), DesignId(DesignKind.CR_LOC), DesignId(DesignKind.LOC)]
    summary = run_design_comparison(spec, designs, 500, RandomSource(1), workers=WORKERS)
    assert summary.loc["CR_Loc", "sd_ratio"] == pytest.approx(0.56, abs=0.07)
    assert summary.loc["Loc", "sd_ratio"] == pytest.approx(0.54, abs=0.07)
    assert summary.loc["Loc", "pct_delta_ci"] < 0
    for design in ("CR", "CR_Loc", "Loc"):
        assert 0.92 <= summary.loc[design, "coverage"] <= 0.99


def test_oracle_and_large_pilot_designs_on_model_one():
    spec = DgpSpec.model(1, 800, dim=2)
    designs = [DesignId(DesignKind.CR), DesignId(DesignKind.OPT), DesignId.parse("pilotl")]
    summary = run_design_comparison(spec, designs, 500, RandomSource(7), workers=WORKERS,
                                    config=DesignConfig(k_max=8, L_max=3))
    assert summary.loc["Opt", "sd_ratio"] == pytest.approx(0.80, abs=0.07)
    assert summary.loc["PilotL", "sd_ratio"] == pytest.approx(summary.loc["Opt", "sd_ratio"], abs=0.08)


def test_local_design_ratio_on_model_six():
    spec = DgpSpec.model(6, 800, dim=2)
    designs = [DesignId(DesignKind.CR), DesignId(DesignKind.LOC)]
    summary = run_design_comparison(spec, designs, 500, RandomSource(8), workers=WORKERS)
    assert summary.loc["Loc", "sd_ratio"] == pytest.approx(0.58, abs=0.07)


def _model_six_theta(rep: int) -> float:
    spec = DgpSpec.model(6, 1600)
    q, p = PropensityMap.constant(spec.n, "1/2"), PropensityMap.constant(spec.n, "3/10")
    rng = RandomSource(2).child("rep", rep)
    table = generate_dgp(spec, rng.child("dgp"))
    design = two_stage(table, q, p, rng=rng.child("design"), fold_size=100, quiet=True)
    return estimate_design(design, reveal(table, design), table.psi1).theta_hat


def test_scaled_variance_matches_the_limit_formula():
    spec = DgpSpec.model(6, 1600)
    with ProcessPoolExecutor(max_workers=WORKERS) as pool:
        thetas = list(pool.map(_model_six_theta, range(2000), chunksize=25))
    scaled = spec.n * np.var(thetas, ddof=1)
    assert scaled == pytest.approx(analytic_variance(spec, 0.5, 0.3), rel=0.10)


@pytest.mark.parametrize("model", [1, 2, 3, 4, 5, 6])
def test_local_design_intervals_cover_the_true_ate(model):
    spec = DgpSpec.model(model, 400)
    frame = run_reps(spec, [DesignId(DesignKind.LOC)], 1000, RandomSource(30 + model), workers=WORKERS,
                     config=DesignConfig(k_max=8, L_max=3))
    summary = summarize_reps(frame)
    assert summary.loc["Loc", "coverage"] >= 0.92
    if model <= 3:
        assert summary.loc["Loc", "sate_coverage"] >= 0.93


def test_pilot_tracks_the_heteroskedastic_arm():
    spec = DgpSpec.model(2, 400)
    pilot_table = generate_dgp(spec, RandomSource(4).child("pilot"))
    half = PropensityMap.constant(400, "1/2")
    run = two_stage(pilot_table, PropensityMap.constant(400, "1"), half, rng=RandomSource(5), quiet=True)
    pilot = PilotData.from_design(pilot_table.with_outcomes(y_obs=reveal(pilot_table, run)), run)
    main_psi = generate_dgp(spec, RandomSource(6)).psi1
    profile = estimate_variance_functions(pilot, main_psi, seed=0)
    _, z1 = variance_functions(spec, main_psi)
    assert np.corrcoef(profile.sigma1**2, z1)[0, 1] > 0.6


def test_simulation_output_is_identical_across_thread_counts(tmp_path):
    outputs = []
    for threads in (1, 4, 8):
        out = tmp_path / f"sim{threads}.csv"
        argv = ["simulate", "--model", "3", "--n", "200", "--reps", "8", "--designs", "cr,loc,hom,opt",
                "--seed", "9", "--threads", str(threads), "--out", str(out)]
        assert main(argv) == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]
