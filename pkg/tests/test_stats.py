import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmfsim.errors import GridMismatch, LatticeMismatch, NotStationary
from rmfsim.model import InitialCondition, NetworkParams, validate_params
from rmfsim.stats import (
    EmpiricalPmf,
    chen_stein_bound,
    chi_square_two_sample,
    empirical_tv,
    lattice_from_weighted,
    loglog_slope,
    mean_equality_check,
    mgf_residual,
    moment_bound_check,
    moment_bound_q,
    poisson_pmf_dict,
    stein_solve,
    tlln_error,
    tlln_folded_normal,
)


# -- total variation ----------------------------------------------------------

def test_tv_identical_samples_zero():
    a = EmpiricalPmf.from_samples([0, 1, 1, 2, 5])
    assert empirical_tv(a, a).value == 0.0


def test_tv_disjoint_supports_one():
    a = EmpiricalPmf.from_samples([0, 0, 1])
    b = EmpiricalPmf.from_samples([5, 6, 6])
    assert empirical_tv(a, b).value == 1.0


def test_tv_poisson_plugin_small():
    rng = np.random.Generator(np.random.Philox(key=[1, 2]))
    samples = rng.poisson(1.0, size=1_000_000)
    tv = empirical_tv(EmpiricalPmf.from_samples(samples), poisson_pmf_dict(1.0))
    assert tv.value < 0.005


def test_tv_lattice_mismatch():
    a = EmpiricalPmf.from_samples([0, 1], scale=Fraction(1, 2))
    b = EmpiricalPmf.from_samples([0, 1], scale=Fraction(1, 3))
    with pytest.raises(LatticeMismatch):
        empirical_tv(a, b)


def test_tv_exact_reference_counts_tail_mass():
    a = EmpiricalPmf.from_samples([0, 0, 0, 0])
    ref = {0: 0.5, 1: 0.25, 2: 0.25}
    # |1-0.5| + |0-0.25| + |0-0.25| halved
    assert empirical_tv(a, ref).value == pytest.approx(0.5)


def test_weighted_lattice():
    counts = np.array([[1, 2], [0, 0], [3, 1]])
    pmf = lattice_from_weighted(counts, [0.5, 0.25])
    assert pmf.scale == Fraction(1, 4)
    # 0.5*1 + 0.25*2 = 1.0 -> 4; 0 -> 0; 0.5*3+0.25 = 1.75 -> 7
    assert set(pmf.counts) == {4, 0, 7}


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 8), min_size=5, max_size=60),
       st.lists(st.integers(0, 8), min_size=5, max_size=60),
       st.lists(st.integers(0, 8), min_size=5, max_size=60))
def test_tv_metric_properties(xs, ys, zs):
    a = EmpiricalPmf.from_samples(xs)
    b = EmpiricalPmf.from_samples(ys)
    c = EmpiricalPmf.from_samples(zs)
    ab = empirical_tv(a, b).value
    ba = empirical_tv(b, a).value
    assert ab == pytest.approx(ba, abs=1e-12)
    ac = empirical_tv(a, c).value
    cb = empirical_tv(c, b).value
    assert ab <= ac + cb + 1e-12
    assert 0 <= ab <= 1


# -- Stein equation -----------------------------------------------------------

def test_stein_empty_set_zero():
    sol = stein_solve(1.0, frozenset(), 20)
    assert np.all(sol.g == 0.0)


def test_stein_full_space_zero():
    sol = stein_solve(1.0, frozenset(range(52)), 51)
    assert np.max(np.abs(sol.g)) == 0.0


def test_stein_hand_values():
    sol = stein_solve(1.0, {0}, 15)
    assert sol.g[1] == pytest.approx(1 - math.exp(-1), abs=1e-12)
    assert sol.g[2] == pytest.approx(1 - 2 * math.exp(-1), abs=1e-12)


def test_stein_pointwise_residual():
    sol = stein_solve(2.5, {1, 3, 4}, 30)
    assert np.max(np.abs(sol.residuals())) < 1e-12


@settings(max_examples=40, deadline=None)
@given(
    lam=st.floats(0.25, 8.0),
    subset=st.sets(st.integers(0, 30), min_size=1, max_size=12),
)
def test_stein_random_cases(lam, subset):
    sol = stein_solve(lam, subset, max(subset) + 12)
    assert np.max(np.abs(sol.residuals())) < 1e-12
    assert sol.norm_dg <= min(1.0, 1.0 / lam) + 1e-12


# -- Chen-Stein bound ---------------------------------------------------------

def test_chen_stein_hand_example():
    # M = 11, pooled mean 2, L1 term 5:
    # term1 = (0.74/sqrt(2)) * 5/10 = 0.26163, term2 = (1/10)*min(1,1/2)*2 = 0.1
    m_count = 11
    others_a = [3] * 5 + [2] * 5
    others_b = [1] * 5 + [2] * 5
    rows = []
    for rep in range(50):
        rows.append([2] + others_a)
        rows.append([2] + others_b)
    counts = np.array(rows)[:, :, None]  # (paths, M, K=1)
    channel = np.zeros(100, dtype=np.int64)
    rep = chen_stein_bound(counts, channel, 1, 1, 0.5, m_count, 1,
                           picard_mean=0.0, min_paths=10)
    assert rep.mean_n1j == pytest.approx(2.0)
    assert rep.l1_term == pytest.approx(5.0)
    assert rep.term2 == pytest.approx(0.1, abs=1e-12)
    assert rep.term1 == pytest.approx(0.74 / math.sqrt(2) * 0.5, abs=1e-12)


def test_chen_stein_empty_channel():
    counts = np.zeros((100, 5, 2), dtype=np.int64)
    channel = np.zeros(100, dtype=np.int64)
    rep = chen_stein_bound(counts, channel, 1, 2, 0.5, 5, 1,
                           picard_mean=0.0, min_paths=10)
    assert rep.bound == 0.0
    assert rep.tv_picard.value == 0.0


# -- TLLN ---------------------------------------------------------------------

def test_tlln_deterministic_counts_zero():
    counts = np.full((2000, 8), 3)
    err, se = tlln_error(counts, 8)
    assert err == 0.0 and se == 0.0


def test_tlln_synthetic_clt_scaling():
    rng = np.random.Generator(np.random.Philox(key=[7, 8]))
    mu = 2.0
    errs = []
    for m in (16, 64, 256):
        counts = rng.poisson(mu, size=(40_000, m))
        err, _ = tlln_error(counts, m)
        errs.append(err)
    slope = loglog_slope([16, 64, 256], errs)
    assert -0.6 <= slope <= -0.4
    # folded-normal CLT at M = 256, within 5 percent
    pred = tlln_folded_normal(mu, 256)
    assert abs(errs[-1] - pred) / pred < 0.05


# -- mean equality, moment bounds --------------------------------------------

def test_mean_equality_exact_tie():
    grid = np.linspace(0, 1, 3)
    mean = np.ones((2, 3))
    se = np.zeros((2, 3))
    rows, passed = mean_equality_check(mean, se, mean.copy(), se.copy(), grid, 5)
    assert passed and all(r["z"] == 0 for r in rows)


def test_mean_equality_shape_mismatch():
    with pytest.raises(GridMismatch):
        mean_equality_check(np.ones((2, 3)), np.ones((2, 3)),
                            np.ones((2, 4)), np.ones((2, 4)),
                            np.linspace(0, 1, 3), 5)


def test_moment_bound_k1_closed_form():
    # exact single-neuron mean r + (lam0-r)e^{-lam0 t} vs bound lam0 e^{r T}
    lam0, r, horizon = 2.0, 1.0, 1.0
    ts = np.linspace(0, horizon, 11)
    exact = r + (lam0 - r) * np.exp(-lam0 * ts)
    ok, margin, q = moment_bound_check(exact, 1, lam0, 1, r, horizon)
    assert ok and margin > 0
    assert q == pytest.approx(lam0 * math.exp(r * horizon))


def test_moment_bound_trivial_at_t0():
    ok, margin, q = moment_bound_check(np.array([2.0]), 1, 2.0, 2, 1.0, 0.5)
    assert ok and q >= 2.0


# -- generator residual -------------------------------------------------------

def params_k2(mu01=0.5, mu10=0.3):
    return validate_params(
        NetworkParams.from_arrays([[0.0, mu01], [mu10, 0.0]], b=[1, 1], r=[1, 1])
    )


def test_mgf_residual_zero_at_u0():
    rng = np.random.Generator(np.random.Philox(key=[3, 4]))
    lam = 1.0 + rng.random((500, 6))
    res, se, alt = mgf_residual(lam, lam.copy(), np.zeros((3, 2)), params_k2(), 3)
    assert res == 0.0
    assert alt != 0.0  # the (M-1)^-K prefactor misses by a factor M-1


def test_mgf_residual_degenerate_single_neuron():
    params = validate_params(NetworkParams.from_arrays([[0.0]], b=[1.0], r=[1.0]))
    lam = np.full((200, 1), 1.0)  # stationary lambda stuck at r after a spike
    res, se, _ = mgf_residual(lam, lam.copy(), np.array([[0.05]]), params, 1)
    assert res == 0.0


def test_mgf_residual_not_stationary():
    w1 = np.full((400, 4), 1.0)
    w2 = np.full((400, 4), 2.0)
    with pytest.raises(NotStationary):
        mgf_residual(w1, w2, np.zeros((2, 2)), params_k2(), 2)


def test_mgf_residual_stationary_rmf():
    from rmfsim.rmf import simulate_rmf_batch

    params = params_k2()
    init = InitialCondition.deterministic([2.0, 2.0])
    batch = simulate_rmf_batch(params, 3, init, 32.0, 16.0, 505, 4000,
                               keep_lam_paths=True)
    w1 = batch.lam_paths[:, :, 1]
    w2 = batch.lam_paths[:, :, 2]
    u = np.array([[0.05, 0.05], [0.0, 0.0], [0.0, 0.0]])
    res, se, alt = mgf_residual(w1, w2, u, params, 3)
    assert abs(res) <= 4 * se
    assert abs(alt) > 10 * se  # wrong prefactor clearly rejected


# -- chi-square helper --------------------------------------------------------

def test_chi_square_same_law_accepts():
    rng = np.random.Generator(np.random.Philox(key=[9, 9]))
    x = rng.poisson(2.0, 5000)
    y = rng.poisson(2.0, 5000)
    _, _, p = chi_square_two_sample(x, y)
    assert p > 0.001


def test_chi_square_different_law_rejects():
    rng = np.random.Generator(np.random.Philox(key=[9, 10]))
    x = rng.poisson(2.0, 5000)
    y = rng.poisson(3.0, 5000)
    _, _, p = chi_square_two_sample(x, y)
    assert p < 1e-6
