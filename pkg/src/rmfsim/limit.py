"""The decoupled limit process and its fixed-point machinery.

In the limit regime every neuron receives, per sending neuron j, an
independent inhomogeneous Poisson arrival stream whose instantaneous rate is
the mean intensity of j, while its own resets stay untouched.  The mean
intensity function solves a McKean-Vlasov fixed point; `picard_solve_means`
finds it by successive substitution of the empirical mean.

Arrivals and own spikes are realized by thinning against the same lazy
Poisson embeddings that drive the replica systems (channel j -> i uses the
embedding of stream (j, i), own spikes of i use stream (i, i)), so all
processes live on one probability space.  The mapping that drives the
replica equation with externally given input point processes is implemented
by `phi_apply`; successive coupled iterates of it contract pathwise, which
`phi_contraction_curve` measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    GridTooShort,
    HorizonNonPositive,
    InputHorizonMismatch,
    NoConvergence,
)
from .gl import H_MAX_DEFAULT
from .model import InitialCondition, ValidatedParams
from .randomness import (
    LazyPoissonField,
    RoutingMarks,
    StreamKey,
    StreamTag,
    derive_path_seed,
    keyed_generator,
)
from .rmf import shared_initial


@dataclass
class MeanIntensityGrid:
    """Time-gridded estimate of the limit mean intensity per neuron."""

    times: np.ndarray    # (G+1,)
    values: np.ndarray   # (K, G+1) instantaneous rate at grid times (left rule)
    se: np.ndarray       # (K, G+1) Monte Carlo standard errors (zeros if exact)

    @property
    def k(self) -> int:
        return self.values.shape[0]

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])

    def cell_rates(self) -> np.ndarray:
        """Constant rate used on each grid cell: the endpoint average.

        Averaging the endpoints keeps the driving rate piecewise constant
        (so inhomogeneous sampling stays exact) while making the
        discretization error second order in the grid step; the left
        endpoint alone biases the arrival volume by O(step) on the strongly
        decaying early cells.
        """
        return 0.5 * (self.values[:, :-1] + self.values[:, 1:])

    def cumulative(self) -> np.ndarray:
        """Integral of the cell rates up to each grid time (trapezoid rule)."""
        out = np.zeros_like(self.values)
        out[:, 1:] = np.cumsum(self.cell_rates(), axis=1) * self.step
        return out

    def cell_index(self, t: float) -> int:
        g = int(t / self.step)
        return min(g, len(self.times) - 2)


def constant_grid(values: np.ndarray, horizon: float, grid_step: float) -> MeanIntensityGrid:
    n = int(round(horizon / grid_step))
    times = np.linspace(0.0, horizon, n + 1)
    vals = np.tile(np.asarray(values, dtype=float)[:, None], (1, n + 1))
    return MeanIntensityGrid(times, vals, np.zeros_like(vals))


@dataclass
class SpikeTrain:
    """Spike times of one stream; ids are embedding point ids when available."""

    times: np.ndarray
    ids: list | None = None


@dataclass
class StepPath:
    """Cadlag piecewise-constant intensity path: value[k] holds on [t[k], t[k+1])."""

    times: np.ndarray   # starts at 0.0
    values: np.ndarray

    def at(self, t: float) -> float:
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.values[max(idx, 0)])

    def grid_values(self, grid: np.ndarray) -> np.ndarray:
        idx = np.maximum(np.searchsorted(self.times, grid, side="right") - 1, 0)
        return self.values[idx]


def sup_distance(a: StepPath, b: StepPath, horizon: float) -> float:
    """sup over [0, horizon] of |a - b| for two step paths."""
    cuts = np.unique(np.concatenate([a.times, b.times, [0.0, horizon]]))
    cuts = cuts[cuts < horizon]
    return float(np.max(np.abs(a.grid_values(cuts) - b.grid_values(cuts))))


def _field_for(path_seed: int, m: int, i: int, horizon: float, h_max: float,
               cache: dict | None):
    if cache is not None and (m, i) in cache:
        return cache[(m, i)]
    f = LazyPoissonField(path_seed, StreamKey(m, i, StreamTag.EMBEDDING), horizon, h_max)
    if cache is not None:
        cache[(m, i)] = f
    return f


def _channel_arrivals(field: LazyPoissonField, means: MeanIntensityGrid, j: int,
                      horizon: float):
    """Arrival times of one channel: embedding points under the rate step curve."""
    rates = means.cell_rates()
    times = []
    for g in range(len(means.times) - 1):
        t0, t1 = float(means.times[g]), float(means.times[g + 1])
        if t1 > horizon:
            break
        level = float(rates[j - 1, g])
        if level <= 0:
            continue
        ts, _, _ = field.points(t0, t1, 0.0, level)
        times.append(ts)
    if not times:
        return np.empty(0)
    return np.sort(np.concatenate(times))


@dataclass
class LimitPathResult:
    grid: np.ndarray
    lam_grid: np.ndarray        # (K, G+1) intensity at grid times
    spike_counts: np.ndarray    # (K, G+1)
    channel_counts: np.ndarray  # (K, K, G+1): [j-1, i-1] arrivals j -> i
    paths: dict                 # neuron -> StepPath
    trains: dict                # neuron -> SpikeTrain


def simulate_limit_path(
    params: ValidatedParams,
    means: MeanIntensityGrid,
    horizon: float,
    master_seed: int,
    path: int,
    init: InitialCondition,
    h_max: float = H_MAX_DEFAULT,
) -> LimitPathResult:
    """One exact sample path of the limit process driven by the given means."""
    if horizon <= 0:
        raise HorizonNonPositive(f"horizon {horizon} must be positive")
    if means.times[-1] < horizon - 1e-12:
        raise GridTooShort(
            f"means grid ends at {means.times[-1]}, horizon is {horizon}"
        )
    k = params.k
    mu = params.mu_array()
    r = np.asarray(params.r)
    z = shared_initial(params, init, master_seed, path)
    path_seed = derive_path_seed(master_seed, path)

    n_grid = int(round(horizon / means.step))
    grid = means.times[: n_grid + 1]
    lam_grid = np.zeros((k, n_grid + 1))
    spike_counts = np.zeros((k, n_grid + 1), dtype=np.int64)
    channel_counts = np.zeros((k, k, n_grid + 1), dtype=np.int64)
    paths_out, trains_out = {}, {}

    for i in range(1, k + 1):
        # merge arrival streams of every sender into one jump schedule
        arr_times, arr_jumps, arr_src = [], [], []
        for j in range(1, k + 1):
            if j == i:
                continue
            f = _field_for(path_seed, j, i, horizon, h_max, None)
            ts = _channel_arrivals(f, means, j, horizon)
            arr_times.append(ts)
            arr_jumps.append(np.full(len(ts), mu[j - 1, i - 1]))
            arr_src.append(np.full(len(ts), j, dtype=np.int64))
        if arr_times:
            at = np.concatenate(arr_times)
            order = np.argsort(at, kind="stable")
            at = at[order]
            aj = np.concatenate(arr_jumps)[order]
            asrc = np.concatenate(arr_src)[order]
        else:
            at = np.empty(0)
            aj = np.empty(0)
            asrc = np.empty(0, dtype=np.int64)

        own = _field_for(path_seed, i, i, horizon, h_max, None)
        lam = float(z[i - 1])
        t = 0.0
        step_t, step_v = [0.0], [lam]
        spike_times, spike_ids = [], []
        a_idx = 0
        cand = own.first_below(0.0, lam)
        while True:
            t_arr = at[a_idx] if a_idx < len(at) else math.inf
            t_own = cand[0] if cand is not None else math.inf
            t_next = min(t_arr, t_own)
            if t_next > horizon:
                break
            t = t_next
            if t_own <= t_arr:
                lam = float(r[i - 1])
                spike_times.append(t)
                spike_ids.append(cand[2])
            else:
                lam += float(aj[a_idx])
                a_idx += 1
            step_t.append(t)
            step_v.append(lam)
            cand = own.first_below(t, lam)

        sp = StepPath(np.asarray(step_t), np.asarray(step_v))
        paths_out[i] = sp
        trains_out[i] = SpikeTrain(np.asarray(spike_times), spike_ids)
        lam_grid[i - 1] = sp.grid_values(grid)
        st = np.asarray(spike_times)
        for g in range(n_grid + 1):
            spike_counts[i - 1, g] = int((st <= grid[g]).sum())
        for j in range(1, k + 1):
            if j == i:
                continue
            ts = at[asrc == j]
            for g in range(n_grid + 1):
                channel_counts[j - 1, i - 1, g] = int((ts <= grid[g]).sum())

    return LimitPathResult(grid, lam_grid, spike_counts, channel_counts,
                           paths_out, trains_out)


@dataclass
class LimitBatchResult:
    grid: np.ndarray
    lam_sum: np.ndarray          # (K, G+1)
    lam_sumsq: np.ndarray
    channel_counts: np.ndarray   # (paths, K, K, G+1) int32
    spike_counts: np.ndarray     # (paths, K, G+1) int32
    paths: int

    def lam_mean(self):
        return self.lam_sum / self.paths

    def lam_se(self):
        var = self.lam_sumsq / self.paths - (self.lam_sum / self.paths) ** 2
        return np.sqrt(np.maximum(var, 0.0) / self.paths)


def simulate_limit(
    params: ValidatedParams,
    means: MeanIntensityGrid,
    horizon: float,
    paths: int,
    master_seed: int,
    init: InitialCondition,
    h_max: float = H_MAX_DEFAULT,
) -> LimitBatchResult:
    """Batch of limit-process paths; keeps per-path counts for marginal tests."""
    k = params.k
    n_grid = int(round(horizon / means.step))
    lam_sum = np.zeros((k, n_grid + 1))
    lam_sumsq = np.zeros((k, n_grid + 1))
    ch = np.zeros((paths, k, k, n_grid + 1), dtype=np.int32)
    sc = np.zeros((paths, k, n_grid + 1), dtype=np.int32)
    for p in range(paths):
        res = simulate_limit_path(params, means, horizon, master_seed, p, init, h_max)
        lam_sum += res.lam_grid
        lam_sumsq += res.lam_grid ** 2
        ch[p] = res.channel_counts
        sc[p] = res.spike_counts
    return LimitBatchResult(
        np.linspace(0.0, horizon, n_grid + 1), lam_sum, lam_sumsq, ch, sc, paths
    )


def picard_solve_means(
    params: ValidatedParams,
    init: InitialCondition,
    horizon: float,
    grid_step: float,
    paths: int,
    max_iters: int,
    tol: float,
    master_seed: int,
    h_max: float = H_MAX_DEFAULT,
) -> tuple[MeanIntensityGrid, list[float]]:
    """Fixed-point iteration on the mean-intensity grid.

    Iterate l+1 is the empirical mean of `paths` limit-process simulations
    driven by iterate l.  All iterations share the per-path embeddings
    (common random numbers), so the successive gap decays below the Monte
    Carlo floor.  Stops when the sup gap drops under max(tol, 2 * pooled SE).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    k = params.k
    n_grid = int(round(horizon / grid_step))
    grid = np.linspace(0.0, horizon, n_grid + 1)
    lam0_mean = init.mean()
    current = constant_grid(lam0_mean, horizon, grid_step)
    gaps: list[float] = []
    rising = 0
    for it in range(max_iters):
        lam_sum = np.zeros((k, n_grid + 1))
        lam_sumsq = np.zeros((k, n_grid + 1))
        for p in range(paths):
            res = simulate_limit_path(params, current, horizon, master_seed, p, init, h_max)
            lam_sum += res.lam_grid
            lam_sumsq += res.lam_grid ** 2
        mean = lam_sum / paths
        var = np.maximum(lam_sumsq / paths - mean ** 2, 0.0)
        se = np.sqrt(var / paths)
        mean[:, 0] = lam0_mean  # exact at t=0 by construction
        gap = float(np.max(np.abs(mean - current.values)))
        pooled = float(np.max(np.sqrt(se ** 2 + current.se ** 2)))
        nxt = MeanIntensityGrid(grid, mean, se)
        if gaps and gap > gaps[-1] + 3 * pooled:
            rising += 1
            if rising >= 3:
                raise NoConvergence(
                    f"picard gap rose beyond noise for 3 iterations: {gaps + [gap]}"
                )
        else:
            rising = 0
        gaps.append(gap)
        current = nxt
        if gap < max(tol, 2 * pooled):
            break
    return current, gaps


# ---------------------------------------------------------------------------
# the input-driven mapping and its coupled iterates


@dataclass
class PointProcessPaths:
    """Input point processes for the mapping, one dict per path keyed (m, i)."""

    horizon: float
    m_count: int
    k: int
    trains: list  # list over paths of dict[(m, i)] -> SpikeTrain


@dataclass
class PhiPathOutput:
    paths: dict    # (m, i) -> StepPath
    trains: dict   # (m, i) -> SpikeTrain


def _route_input(
    train: SpikeTrain, path_seed: int, n: int, j: int, target: int,
    m_count: int, mark_salt: int, marks: RoutingMarks,
) -> np.ndarray:
    """Replica choices for every point of an input train toward one target."""
    out = np.empty(len(train.times), dtype=np.int64)
    if train.ids is not None:
        for idx in range(len(train.times)):
            out[idx] = marks.choice(train.ids[idx], target, m_count, n)
    else:
        for idx in range(len(train.times)):
            g = keyed_generator(
                path_seed, "phimark", mark_salt, n, j, idx, target, m_count
            )
            v = int(g.integers(1, m_count))
            out[idx] = v + 1 if v >= n else v
    return out


def phi_apply_path(
    inputs: dict,
    params: ValidatedParams,
    m_count: int,
    horizon: float,
    master_seed: int,
    path: int,
    init: InitialCondition,
    mark_salt: int = 0,
    field_cache: dict | None = None,
    h_max: float = H_MAX_DEFAULT,
) -> PhiPathOutput:
    """Drive the replica equation with given input spike trains on one path.

    Input points carrying embedding ids reuse the per-point routing marks
    (the coupling used by the contraction measurement); id-less inputs get
    fresh deterministic marks keyed by (salt, stream, point index).
    """
    k = params.k
    mu = params.mu_array()
    r = np.asarray(params.r)
    path_seed = derive_path_seed(master_seed, path)
    z = shared_initial(params, init, master_seed, path)

    # arrival schedule per output stream
    sched: dict = {(m, i): [] for m in range(1, m_count + 1) for i in range(1, k + 1)}
    for (n, j), train in inputs.items():
        if len(train.times) and train.times[-1] > horizon + 1e-12:
            raise InputHorizonMismatch(
                f"input train of ({n},{j}) extends past horizon {horizon}"
            )
        marks = RoutingMarks(path_seed, StreamKey(n, j, StreamTag.EMBEDDING))
        for i in range(1, k + 1):
            if i == j:
                continue
            w = mu[j - 1, i - 1]
            votes = _route_input(train, path_seed, n, j, i, m_count, mark_salt, marks)
            for idx, v in enumerate(votes):
                sched[(int(v), i)].append((float(train.times[idx]), w))

    out_paths, out_trains = {}, {}
    for m in range(1, m_count + 1):
        for i in range(1, k + 1):
            arrivals = sorted(sched[(m, i)])
            f = _field_for(path_seed, m, i, horizon, h_max, field_cache)
            lam = float(z[i - 1])
            t = 0.0
            step_t, step_v = [0.0], [lam]
            sp_t, sp_id = [], []
            a_idx = 0
            cand = f.first_below(0.0, lam)
            while True:
                t_arr = arrivals[a_idx][0] if a_idx < len(arrivals) else math.inf
                t_own = cand[0] if cand is not None else math.inf
                t_next = min(t_arr, t_own)
                if t_next > horizon:
                    break
                t = t_next
                if t_own <= t_arr:
                    lam = float(r[i - 1])
                    sp_t.append(t)
                    sp_id.append(cand[2])
                else:
                    lam += arrivals[a_idx][1]
                    a_idx += 1
                step_t.append(t)
                step_v.append(lam)
                cand = f.first_below(t, lam)
            out_paths[(m, i)] = StepPath(np.asarray(step_t), np.asarray(step_v))
            out_trains[(m, i)] = SpikeTrain(np.asarray(sp_t), sp_id)
    return PhiPathOutput(out_paths, out_trains)


def phi_apply(
    inputs: PointProcessPaths,
    params: ValidatedParams,
    horizon: float,
    master_seed: int,
    init: InitialCondition,
    mark_salt: int = 0,
    h_max: float = H_MAX_DEFAULT,
) -> list[PhiPathOutput]:
    if inputs.horizon < horizon - 1e-12:
        raise InputHorizonMismatch(
            f"inputs defined on [0,{inputs.horizon}], need [0,{horizon}]"
        )
    return [
        phi_apply_path(
            inputs.trains[p], params, inputs.m_count, horizon, master_seed, p,
            init, mark_salt, h_max=h_max,
        )
        for p in range(len(inputs.trains))
    ]


def seed_iterate_path(
    params: ValidatedParams,
    m_count: int,
    horizon: float,
    master_seed: int,
    path: int,
    rates: np.ndarray,
    field_cache: dict | None = None,
    h_max: float = H_MAX_DEFAULT,
) -> dict:
    """Iterate-0 inputs: homogeneous Poisson trains read off the embeddings.

    Taking the points of stream (m, i)'s own embedding below the constant
    level rates[i-1] yields independent Poisson(rate) trains whose points
    carry ids, so later iterates reuse the same routing marks.
    """
    path_seed = derive_path_seed(master_seed, path)
    trains = {}
    for m in range(1, m_count + 1):
        for i in range(1, params.k + 1):
            f = _field_for(path_seed, m, i, horizon, h_max, field_cache)
            ts, _, ids = f.points(0.0, horizon, 0.0, float(rates[i - 1]))
            trains[(m, i)] = SpikeTrain(ts, ids)
    return trains


def phi_contraction_curve(
    params: ValidatedParams,
    m_count: int,
    horizon: float,
    n_iters: int,
    paths: int,
    master_seed: int,
    init: InitialCondition,
    h_max: float = H_MAX_DEFAULT,
):
    """Pathwise sup-distances d_l between successive coupled iterates.

    d_l averages, over paths, the sup over time of the intensity gap between
    iterates l+1 and l, summed over all M*K streams.  Returns (d, se) arrays
    of length n_iters.
    """
    if n_iters < 3:
        raise ValueError("need at least 3 iterations")
    k = params.k
    rates = init.mean()
    sums = np.zeros(n_iters)
    sumsq = np.zeros(n_iters)
    for p in range(paths):
        cache: dict = {}
        current = seed_iterate_path(
            params, m_count, horizon, master_seed, p, rates, cache, h_max
        )
        prev_out = None
        for level in range(n_iters + 1):
            out = phi_apply_path(
                current, params, m_count, horizon, master_seed, p, init,
                field_cache=cache, h_max=h_max,
            )
            if prev_out is not None:
                d = sum(
                    sup_distance(out.paths[(m, i)], prev_out.paths[(m, i)], horizon)
                    for m in range(1, m_count + 1)
                    for i in range(1, k + 1)
                )
                sums[level - 1] += d
                sumsq[level - 1] += d * d
            prev_out = out
            current = out.trains
    d = sums / paths
    se = np.sqrt(np.maximum(sumsq / paths - d ** 2, 0.0) / paths)
    rising = 0
    for l in range(1, n_iters):
        if d[l] > d[l - 1] + 3 * math.sqrt(se[l] ** 2 + se[l - 1] ** 2):
            rising += 1
            if rising >= 3:
                raise NoConvergence(f"contraction distances rose beyond noise: {d}")
        else:
            rising = 0
    return d, se
