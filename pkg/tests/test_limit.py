import math

import numpy as np
import pytest

from rmfsim.errors import GridTooShort, InputHorizonMismatch
from rmfsim.gl import single_neuron_law
from rmfsim.limit import (
    MeanIntensityGrid,
    PointProcessPaths,
    SpikeTrain,
    constant_grid,
    phi_apply,
    phi_apply_path,
    phi_contraction_curve,
    picard_solve_means,
    seed_iterate_path,
    simulate_limit,
    simulate_limit_path,
    sup_distance,
    StepPath,
)
from rmfsim.model import InitialCondition, NetworkParams, validate_params
from rmfsim.rmf import simulate_rmf
from rmfsim.stats import EmpiricalPmf, empirical_tv, poisson_pmf_dict


def params_k1():
    return validate_params(NetworkParams.from_arrays([[0.0]], b=[1.0], r=[1.0]))


def params_k2(mu01=0.5, mu10=0.3):
    return validate_params(
        NetworkParams.from_arrays([[0.0, mu01], [mu10, 0.0]], b=[1, 1], r=[1, 1])
    )


def params_k2_symmetric(w=0.4):
    return validate_params(
        NetworkParams.from_arrays([[0.0, w], [w, 0.0]], b=[1, 1], r=[1, 1])
    )


INIT1 = InitialCondition.deterministic([2.0])
INIT2 = InitialCondition.deterministic([2.0, 2.0])


def test_step_path_sup_distance():
    a = StepPath(np.array([0.0, 1.0]), np.array([2.0, 3.0]))
    b = StepPath(np.array([0.0, 0.5]), np.array([2.0, 1.0]))
    assert sup_distance(a, b, 2.0) == 2.0
    assert sup_distance(a, a, 2.0) == 0.0


def test_grid_too_short():
    grid = constant_grid(np.array([1.0]), 0.5, 0.1)
    with pytest.raises(GridTooShort):
        simulate_limit_path(params_k1(), grid, 1.0, 1, 0, INIT1)


def test_picard_initial_value_exact():
    params = params_k2()
    grid, gaps = picard_solve_means(params, INIT2, 0.25, 0.05, 400, 6, 0.05, 3)
    assert np.array_equal(grid.values[:, 0], np.array([2.0, 2.0]))
    assert gaps  # at least one iteration happened


def test_picard_k1_matches_closed_form():
    params = params_k1()
    grid, _ = picard_solve_means(params, INIT1, 1.0, 0.1, 3000, 6, 0.01, 17)
    for g, t in enumerate(grid.times):
        _, mean = single_neuron_law(2.0, 1.0, float(t))
        band = 3 * grid.se[0, g] if grid.se[0, g] > 0 else 1e-12
        assert abs(grid.values[0, g] - mean) <= band + 1e-9


def test_picard_k1_second_gap_vanishes():
    # with no interactions the dynamics ignore the rate grid entirely, and
    # common random numbers make the second picard gap exactly zero
    params = params_k1()
    _, gaps = picard_solve_means(params, INIT1, 0.5, 0.1, 200, 6, 1e-9, 5)
    assert len(gaps) >= 2
    assert gaps[1] == 0.0


def test_picard_symmetric_network():
    params = params_k2_symmetric()
    grid, _ = picard_solve_means(params, INIT2, 0.5, 0.1, 2000, 8, 0.01, 23)
    pooled = np.sqrt(grid.se[0] ** 2 + grid.se[1] ** 2)
    gap = np.abs(grid.values[0] - grid.values[1])
    assert np.all(gap <= 3 * pooled + 1e-12)


def test_limit_channel_marginal_poisson():
    params = params_k2()
    means, _ = picard_solve_means(params, INIT2, 0.5, 0.1, 2000, 8, 0.01, 29)
    batch = simulate_limit(params, means, 0.5, 4000, 31, INIT2)
    cum = means.cumulative()
    a12 = batch.channel_counts[:, 0, 1, -1]  # channel 1 -> 2 at t = 0.5
    tv = empirical_tv(
        EmpiricalPmf.from_samples(a12), poisson_pmf_dict(float(cum[0, -1]))
    )
    assert tv.value < 0.02 + tv.bias_bound


def test_limit_channels_independent():
    params = validate_params(
        NetworkParams.from_arrays(
            [[0.0, 0.3, 0.3], [0.3, 0.0, 0.3], [0.3, 0.3, 0.0]],
            b=[1, 1, 1], r=[1, 1, 1],
        )
    )
    init = InitialCondition.deterministic([2.0, 2.0, 2.0])
    means = constant_grid(np.array([1.5, 1.5, 1.5]), 0.5, 0.1)
    batch = simulate_limit(params, means, 0.5, 4000, 37, init)
    a12 = batch.channel_counts[:, 0, 1, -1]
    a13 = batch.channel_counts[:, 0, 2, -1]
    corr = np.corrcoef(a12, a13)[0, 1]
    assert abs(corr) < 3 / math.sqrt(len(a12))


def test_limit_zero_rate_degenerate():
    params = params_k2()
    means = MeanIntensityGrid(
        np.linspace(0, 0.5, 6), np.zeros((2, 6)), np.zeros((2, 6))
    )
    res = simulate_limit_path(params, means, 0.5, 41, 0, INIT2)
    assert res.channel_counts.sum() == 0
    # resets only: intensities can only take the initial or reset value
    for i in (1, 2):
        assert set(res.paths[i].values) <= {2.0, 1.0}


def test_phi_empty_input_pure_reset():
    params = params_k2()
    inputs = {
        (m, i): SpikeTrain(np.empty(0), None) for m in (1, 2, 3) for i in (1, 2)
    }
    out = phi_apply_path(inputs, params, 3, 1.0, 47, 0, INIT2)
    for key, path in out.paths.items():
        assert set(path.values) <= {2.0, 1.0}


def test_phi_determinism():
    params = params_k2()
    train = SpikeTrain(np.array([0.2, 0.4]), None)
    inputs = {(m, i): train for m in (1, 2) for i in (1, 2)}
    a = phi_apply_path(inputs, params, 2, 1.0, 53, 1, INIT2, mark_salt=5)
    b = phi_apply_path(inputs, params, 2, 1.0, 53, 1, INIT2, mark_salt=5)
    for key in a.trains:
        assert np.array_equal(a.trains[key].times, b.trains[key].times)


def test_phi_horizon_mismatch():
    params = params_k2()
    pp = PointProcessPaths(0.5, 2, 2, [{
        (m, i): SpikeTrain(np.empty(0), None) for m in (1, 2) for i in (1, 2)
    }])
    with pytest.raises(InputHorizonMismatch):
        phi_apply(pp, params, 1.0, 1, INIT2)


def test_phi_fixed_point_exact_replay():
    # feeding the embedded-engine solution back through the mapping, with the
    # same embeddings and per-point marks, must reproduce it exactly
    params = params_k2()
    m_count = 3
    for p in range(5):
        res = simulate_rmf(params, m_count, INIT2, 1.0, 0.25, 61, p,
                           engine="embedded")
        trains = {
            (m, i): SpikeTrain(np.empty(0), []) for m in range(1, 4) for i in (1, 2)
        }
        per_stream: dict = {k: ([], []) for k in trains}
        for (m, i, pid, t) in res.consumed_points:
            per_stream[(m, i)][0].append(t)
            per_stream[(m, i)][1].append(pid)
        for key, (ts, ids) in per_stream.items():
            trains[key] = SpikeTrain(np.asarray(ts), ids)
        out = phi_apply_path(trains, params, m_count, 1.0, 61, p, INIT2)
        for key in trains:
            assert np.array_equal(out.trains[key].times, trains[key].times), key
            tr = res.trajectories[key]
            want = np.array([tr.value(t) for t in res.grid])
            got = out.paths[key].grid_values(res.grid)
            assert np.allclose(got, want, rtol=0, atol=0)


def test_seed_iterate_is_poisson():
    params = params_k2()
    n = 3000
    counts = np.empty(n, dtype=np.int64)
    for p in range(n):
        trains = seed_iterate_path(params, 2, 1.0, 71, p, np.array([2.0, 2.0]))
        counts[p] = len(trains[(1, 1)].times)
    tv = empirical_tv(EmpiricalPmf.from_samples(counts), poisson_pmf_dict(2.0))
    assert tv.value < 0.03 + tv.bias_bound


def test_contraction_curve_decreases():
    params = params_k2()
    d, se = phi_contraction_curve(params, 3, 0.5, 4, 300, 83, INIT2)
    assert d[0] > 0
    # beyond-noise decrease from the first to the last measured distance
    assert d[-1] < d[0] - 3 * math.hypot(se[0], se[-1])


def test_grid_refinement_stability():
    # halving the grid step moves the solved means by less than the MC band;
    # shared embeddings make the two solves positively correlated, so the
    # pooled SE is a conservative yardstick
    params = params_k2()
    coarse, _ = picard_solve_means(params, INIT2, 0.5, 0.1, 2000, 8, 5e-3, 77)
    fine, _ = picard_solve_means(params, INIT2, 0.5, 0.05, 2000, 8, 5e-3, 77)
    for i in range(2):
        gap = abs(coarse.values[i, -1] - fine.values[i, -1])
        pooled = math.hypot(coarse.se[i, -1], fine.se[i, -1])
        assert gap <= pooled


def test_limit_second_moment_below_growth_bound():
    from rmfsim.stats import moment_bound_q

    params = params_k2()
    means, _ = picard_solve_means(params, INIT2, 0.5, 0.1, 1500, 8, 5e-3, 91)
    batch = simulate_limit(params, means, 0.5, 1500, 93, INIT2)
    second = batch.lam_sumsq / batch.paths
    assert np.max(second) <= moment_bound_q(2, 2.0, 2, 1.0, 0.5)
