"""Event-driven simulation of the M-replica system.

Two engines produce statistically indistinguishable laws:

- ``direct``: competing-exponentials selection over all M*K streams, with a
  compiled batch kernel for large path counts and a pure-python reference
  that consumes the identical draw sequence (paths replay bit-for-bit).
- ``embedded``: per-stream thinning against shared lazy Poisson embeddings
  with per-point routing marks, so runs with different M (and the limit
  process) are coupled pathwise on one probability space.

Only the no-decay regime is supported here; finite relaxation times are
rejected because every downstream convergence check assumes pure-jump
dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    DecayNotSupported,
    HorizonNonPositive,
    InsufficientPaths,
    IntensityOverflow,
    MTooSmall,
)
from .gl import H_MAX_DEFAULT, Event, Trajectory, _PathDraws
from .model import InitialCondition, ValidatedParams, sample_initial
from .randomness import (
    LazyPoissonField,
    RoutingMarks,
    StreamKey,
    StreamTag,
    derive_path_seed,
    keyed_generator,
)


def _require_pure_jump(params: ValidatedParams):
    if not params.convergence_eligible:
        raise DecayNotSupported(
            "replica simulation requires tau = inf for every neuron"
        )


def _check_m(m_count: int):
    if m_count < 2:
        raise MTooSmall(f"replica count must be >= 2, got {m_count}")


def shared_initial(
    params: ValidatedParams, init: InitialCondition, master_seed: int, path: int
) -> np.ndarray:
    """Initial intensity vector Z (length K), shared by all replicas of a path.

    All replicas of every M-system, and the limit process, start from the
    same Z on a given path; this equality is part of the coupling.
    """
    stream = keyed_generator(derive_path_seed(master_seed, path), "init")
    return sample_initial(init, params, stream)


@dataclass
class ArrivalTally:
    """Per-channel routed-arrival counts into one focal replica."""

    focal_replica: int
    grid: np.ndarray
    channel_counts: np.ndarray  # (K, K, G+1): [j-1, i-1] = count of j -> (focal, i)

    def weighted_sum(self, mu: np.ndarray, i: int, g: int) -> float:
        """A_{focal,i}(t_g) = sum_j mu[j][i] * channel count."""
        return float(
            sum(
                mu[j, i - 1] * self.channel_counts[j, i - 1, g]
                for j in range(self.channel_counts.shape[0])
                if j != i - 1
            )
        )


@dataclass
class RmfPathResult:
    m_count: int
    k: int
    grid: np.ndarray
    trajectories: dict  # (replica, neuron) -> Trajectory
    spike_counts: np.ndarray  # (M*K, G+1)
    tally: ArrivalTally
    consumed_points: list = field(default_factory=list)  # embedded engine event ids


def arrival_decomposition(result: RmfPathResult, m: int, i: int, t: float, mu: np.ndarray):
    """Channel counts {A_{j->(m,i)}(t)} and their exactly weighted sum.

    ``t`` must lie on the grid; ``m`` must be the tally's focal replica.
    """
    if m != result.tally.focal_replica:
        raise ValueError(f"tallies recorded for focal replica {result.tally.focal_replica}")
    g = int(round(t / (result.grid[1] - result.grid[0])))
    if not math.isclose(result.grid[g], t, rel_tol=0, abs_tol=1e-9):
        raise ValueError(f"t={t} is not a grid time")
    channels = {
        j + 1: int(result.tally.channel_counts[j, i - 1, g])
        for j in range(result.k)
        if j != i - 1
    }
    weighted = result.tally.weighted_sum(mu, i, g)
    return channels, weighted


def _direct_uniform_route(u: float, m_count: int, origin: int) -> int:
    """Map one uniform onto {1..M}\\{origin}; identical to the batch kernel."""
    v = 1 + int(u * (m_count - 1))
    if v > m_count - 1:
        v = m_count - 1
    return v + 1 if v >= origin else v


def simulate_rmf(
    params: ValidatedParams,
    m_count: int,
    init: InitialCondition,
    horizon: float,
    grid_step: float,
    master_seed: int,
    path: int,
    engine: str = "direct",
    focal: int = 1,
    h_max: float = H_MAX_DEFAULT,
) -> RmfPathResult:
    """One exact sample path of the M-replica dynamics."""
    _require_pure_jump(params)
    _check_m(m_count)
    if horizon <= 0:
        raise HorizonNonPositive(f"horizon {horizon} must be positive")
    if engine == "direct":
        return _simulate_direct_path(
            params, m_count, init, horizon, grid_step, master_seed, path, focal, h_max
        )
    if engine == "embedded":
        return _simulate_embedded_path(
            params, m_count, init, horizon, grid_step, master_seed, path, focal, h_max
        )
    raise ValueError(f"unknown engine {engine!r}")


def _new_state(params, m_count, init, master_seed, path, horizon, grid_step):
    k = params.k
    z = shared_initial(params, init, master_seed, path)
    lam = np.tile(z, m_count)  # stream index s = (m-1)*K + (i-1)
    n_grid = int(round(horizon / grid_step))
    grid = np.linspace(0.0, horizon, n_grid + 1)
    trajs = {
        (m + 1, i + 1): Trajectory(
            replica=m + 1, neuron=i + 1, b=params.b[i], tau=math.inf,
            segments=[(0.0, float(z[i]))],
        )
        for m in range(m_count)
        for i in range(k)
    }
    return lam, grid, trajs


def _simulate_direct_path(
    params, m_count, init, horizon, grid_step, master_seed, path, focal, h_max
):
    k = params.k
    mu = params.mu_array()
    r = np.asarray(params.r)
    lam, grid, trajs = _new_state(params, m_count, init, master_seed, path, horizon, grid_step)
    n_grid = len(grid) - 1
    draws = _PathDraws(master_seed, path, "rmf-direct")

    spikes_cum = np.zeros(m_count * k, dtype=np.int64)
    spike_counts = np.zeros((m_count * k, n_grid + 1), dtype=np.int64)
    fa_cum = np.zeros((k, k), dtype=np.int64)
    fa = np.zeros((k, k, n_grid + 1), dtype=np.int64)

    t = 0.0
    g_next = 0

    def record(t_stop):
        nonlocal g_next
        while g_next <= n_grid and grid[g_next] <= t_stop:
            spike_counts[:, g_next] = spikes_cum
            fa[:, :, g_next] = fa_cum
            g_next += 1

    while True:
        total = float(lam.sum())
        dt = -math.log(draws.next()) / total
        t_new = t + dt
        record(min(t_new, horizon))
        if t_new > horizon:
            break
        t = t_new
        x = draws.next() * total
        acc = 0.0
        spiker = m_count * k - 1
        for s in range(m_count * k):
            acc += lam[s]
            if acc >= x:
                spiker = s
                break
        rep = spiker // k + 1
        neu = spiker % k  # 0-based
        spikes_cum[spiker] += 1
        jump = r[neu] - lam[spiker]
        lam[spiker] = r[neu]
        trajs[(rep, neu + 1)].segments.append((t, float(lam[spiker])))
        trajs[(rep, neu + 1)].events.append(
            Event(t, "spike", neu + 1, rep, float(jump), float(lam[spiker]))
        )
        for i in range(k):
            if i == neu:
                continue
            v = _direct_uniform_route(draws.next(), m_count, rep)
            if v == focal:
                fa_cum[neu, i] += 1
            w = mu[neu, i]
            if w != 0.0:
                tgt = (v - 1) * k + i
                lam[tgt] += w
                if lam[tgt] > h_max:
                    raise IntensityOverflow(
                        f"stream ({v},{i+1}) intensity {lam[tgt]} exceeded {h_max}"
                    )
                trajs[(v, i + 1)].segments.append((t, float(lam[tgt])))
                trajs[(v, i + 1)].events.append(
                    Event(t, "arrival", neu + 1, rep, float(w), float(lam[tgt]))
                )

    record(horizon)
    tally = ArrivalTally(focal, grid, fa)
    return RmfPathResult(m_count, k, grid, trajs, spike_counts, tally)


def _simulate_embedded_path(
    params, m_count, init, horizon, grid_step, master_seed, path, focal, h_max,
    fields: dict | None = None,
):
    k = params.k
    mu = params.mu_array()
    r = np.asarray(params.r)
    lam, grid, trajs = _new_state(params, m_count, init, master_seed, path, horizon, grid_step)
    n_grid = len(grid) - 1
    path_seed = derive_path_seed(master_seed, path)

    if fields is None:
        fields = {}
    marks = {}
    for m in range(1, m_count + 1):
        for i in range(1, k + 1):
            key = StreamKey(m, i, StreamTag.EMBEDDING)
            if (m, i) not in fields:
                fields[(m, i)] = LazyPoissonField(path_seed, key, horizon, h_max)
            marks[(m, i)] = RoutingMarks(path_seed, key)

    n_streams = m_count * k
    cand = [None] * n_streams

    def refresh(s, t_from):
        m, i = s // k + 1, s % k + 1
        cand[s] = fields[(m, i)].first_below(t_from, lam[s])

    for s in range(n_streams):
        refresh(s, 0.0)

    spikes_cum = np.zeros(n_streams, dtype=np.int64)
    spike_counts = np.zeros((n_streams, n_grid + 1), dtype=np.int64)
    fa_cum = np.zeros((k, k), dtype=np.int64)
    fa = np.zeros((k, k, n_grid + 1), dtype=np.int64)
    consumed_points = []

    t = 0.0
    g_next = 0

    def record(t_stop):
        nonlocal g_next
        while g_next <= n_grid and grid[g_next] <= t_stop:
            spike_counts[:, g_next] = spikes_cum
            fa[:, :, g_next] = fa_cum
            g_next += 1

    while True:
        # earliest candidate; ties (never seen in practice) break by stream index
        best_s, best = -1, None
        for s in range(n_streams):
            c = cand[s]
            if c is not None and (best is None or c[0] < best[0]):
                best_s, best = s, c
        if best is None or best[0] > horizon:
            break
        t_new, _, pid = best
        record(t_new)
        t = t_new
        rep = best_s // k + 1
        neu = best_s % k
        spikes_cum[best_s] += 1
        jump = r[neu] - lam[best_s]
        lam[best_s] = r[neu]
        trajs[(rep, neu + 1)].segments.append((t, float(lam[best_s])))
        trajs[(rep, neu + 1)].events.append(
            Event(t, "spike", neu + 1, rep, float(jump), float(lam[best_s]))
        )
        consumed_points.append((rep, neu + 1, pid, t))
        touched = {best_s}
        for i in range(k):
            if i == neu:
                continue
            v = marks[(rep, neu + 1)].choice(pid, i + 1, m_count, rep)
            if v == focal:
                fa_cum[neu, i] += 1
            w = mu[neu, i]
            if w != 0.0:
                tgt = (v - 1) * k + i
                lam[tgt] += w
                if lam[tgt] > h_max:
                    raise IntensityOverflow(
                        f"stream ({v},{i+1}) intensity {lam[tgt]} exceeded {h_max}"
                    )
                trajs[(v, i + 1)].segments.append((t, float(lam[tgt])))
                trajs[(v, i + 1)].events.append(
                    Event(t, "arrival", neu + 1, rep, float(w), float(lam[tgt]))
                )
                touched.add(tgt)
        for s in touched:
            refresh(s, t)

    record(horizon)
    tally = ArrivalTally(focal, grid, fa)
    return RmfPathResult(
        m_count, k, grid, trajs, spike_counts, tally, consumed_points
    )


@dataclass
class RmfBatchResult:
    """Aggregates over a batch of direct-engine paths.

    Mean/SE arrays are derived from running sums so that memory stays bounded;
    per-path arrays are kept only where the statistics need full samples
    (channel counts for TV, per-stream counts for the replica law of large
    numbers, routed counts for the conditional routing check).
    """

    m_count: int
    k: int
    paths: int
    grid: np.ndarray
    focal: int
    lam_sum: np.ndarray            # (M*K, G+1)
    lam_sumsq: np.ndarray
    diff_sum: np.ndarray | None    # (M*K, G+1) sums of N(0,t] - int lambda
    diff_sumsq: np.ndarray | None
    cnt_sum: np.ndarray | None
    int_sum: np.ndarray | None
    focal_arrivals: np.ndarray     # (paths, K, K, G+1) int32
    final_counts: np.ndarray       # (paths, M*K) int32 spike counts at horizon
    routed: np.ndarray | None      # (paths, M, K, K) int32
    lam_paths: np.ndarray | None = None  # (paths, M*K, G+1) full samples
    arrivals_by_replica: np.ndarray | None = None  # (paths, M, K, K) int32

    def lam_mean(self):
        return self.lam_sum / self.paths

    def lam_se(self):
        var = self.lam_sumsq / self.paths - (self.lam_sum / self.paths) ** 2
        return np.sqrt(np.maximum(var, 0.0) / self.paths)

    def stream_index(self, m: int, i: int) -> int:
        return (m - 1) * self.k + (i - 1)


def simulate_rmf_batch(
    params: ValidatedParams,
    m_count: int,
    init: InitialCondition,
    horizon: float,
    grid_step: float,
    master_seed: int,
    paths: int,
    focal: int = 1,
    want_int_grid: bool = False,
    want_routed: bool = False,
    keep_lam_paths: bool = False,
    want_channel_by_replica: bool = False,
    block: int = 8192,
    h_max: float = H_MAX_DEFAULT,
) -> RmfBatchResult:
    """Direct-engine batch via the compiled kernel; identical in law (and,
    path by path, in realization) to the python direct engine."""
    _require_pure_jump(params)
    _check_m(m_count)
    if horizon <= 0:
        raise HorizonNonPositive(f"horizon {horizon} must be positive")
    k = params.k
    mu = params.mu_array()
    r = np.asarray(params.r, dtype=float)
    n_streams = m_count * k
    n_grid = int(round(horizon / grid_step))
    grid = np.linspace(0.0, horizon, n_grid + 1)
    draws_per_event = 2 + (k - 1)

    # initial chunk guess: the smaller of the short-horizon growth bound and a
    # coarse stationary level; exhausted paths simply retry with a bigger chunk
    lam0_hi = float(np.max(params.floor()) + np.max(params.b))
    growth = lam0_hi * math.exp((k + max(params.r) - 1) * horizon)
    stationary = max(params.r) + (k - 1) * float(mu.max(initial=0.0))
    rate = min(growth, 2.0 * max(lam0_hi, stationary))
    exp_events = n_streams * rate * horizon
    chunk = int(draws_per_event * (exp_events + 12 * math.sqrt(exp_events + 1) + 64))

    lam_sum = np.zeros((n_streams, n_grid + 1))
    lam_sumsq = np.zeros((n_streams, n_grid + 1))
    diff_sum = np.zeros((n_streams, n_grid + 1)) if want_int_grid else None
    diff_sumsq = np.zeros((n_streams, n_grid + 1)) if want_int_grid else None
    cnt_sum = np.zeros((n_streams, n_grid + 1)) if want_int_grid else None
    int_sum = np.zeros((n_streams, n_grid + 1)) if want_int_grid else None
    focal_arrivals = np.zeros((paths, k, k, n_grid + 1), dtype=np.int32)
    final_counts = np.zeros((paths, n_streams), dtype=np.int32)
    routed_all = np.zeros((paths, m_count, k, k), dtype=np.int32) if want_routed else None
    lam_paths = (
        np.zeros((paths, n_streams, n_grid + 1)) if keep_lam_paths else None
    )
    arr_by_rep = (
        np.zeros((paths, m_count, k, k), dtype=np.int32)
        if want_channel_by_replica else None
    )

    dummy_f = np.zeros((1, 1, 1))
    dummy_i = np.zeros((1, 1, 1), dtype=np.int64)
    dummy_r = np.zeros((1, 1, 1, 1), dtype=np.int64)

    for start in range(0, paths, block):
        stop = min(start + block, paths)
        bsz = stop - start
        lam0 = np.empty((bsz, n_streams))
        for p in range(start, stop):
            z = shared_initial(params, init, master_seed, p)
            lam0[p - start] = np.tile(z, m_count)
        pending = list(range(start, stop))
        cur_chunk = chunk
        res = {}
        while pending:
            u = np.empty((len(pending), cur_chunk))
            for row, p in enumerate(pending):
                g = keyed_generator(derive_path_seed(master_seed, p), "rmf-direct")
                u[row] = g.random(cur_chunk)
            b_lam0 = np.ascontiguousarray(
                lam0[[p - start for p in pending]]
            )
            nb = len(pending)
            lam_grid = np.zeros((nb, n_streams, n_grid + 1))
            cnt_grid = (
                np.zeros((nb, n_streams, n_grid + 1), dtype=np.int64)
                if want_int_grid else dummy_i
            )
            int_grid = np.zeros((nb, n_streams, n_grid + 1)) if want_int_grid else dummy_f
            fa = np.zeros((nb, k, k, n_grid + 1), dtype=np.int64)
            fc = np.zeros((nb, n_streams), dtype=np.int64)
            routed = (
                np.zeros((nb, m_count, k, k), dtype=np.int64) if want_routed else dummy_r
            )
            arr_all = (
                np.zeros((nb, m_count, k, k), dtype=np.int64)
                if want_channel_by_replica else dummy_r
            )
            status = np.zeros(nb, dtype=np.int64)
            consumed = np.zeros(nb, dtype=np.int64)
            kernels.rmf_direct_block(
                b_lam0, mu, r, horizon, grid, u, m_count, k, focal, h_max,
                True, want_int_grid, want_int_grid, want_routed,
                want_channel_by_replica,
                lam_grid, cnt_grid, int_grid, fa, fc, routed, arr_all,
                status, consumed,
            )
            if np.any(status == kernels.STATUS_OVERFLOW):
                raise IntensityOverflow(f"some paths exceeded h_max={h_max}")
            done = status == kernels.STATUS_OK
            for row, p in enumerate(pending):
                if done[row]:
                    res[p] = (
                        lam_grid[row],
                        cnt_grid[row] if want_int_grid else None,
                        int_grid[row] if want_int_grid else None,
                        fa[row],
                        fc[row],
                        routed[row] if want_routed else None,
                        arr_all[row] if want_channel_by_replica else None,
                    )
            pending = [p for row, p in enumerate(pending) if not done[row]]
            cur_chunk *= 4

        # deterministic accumulation in path order
        b_lam = np.stack([res[p][0] for p in range(start, stop)])
        lam_sum += b_lam.sum(axis=0)
        lam_sumsq += (b_lam ** 2).sum(axis=0)
        if want_int_grid:
            b_cnt = np.stack([res[p][1] for p in range(start, stop)]).astype(float)
            b_int = np.stack([res[p][2] for p in range(start, stop)])
            d = b_cnt - b_int
            diff_sum += d.sum(axis=0)
            diff_sumsq += (d ** 2).sum(axis=0)
            cnt_sum += b_cnt.sum(axis=0)
            int_sum += b_int.sum(axis=0)
        for p in range(start, stop):
            focal_arrivals[p] = res[p][3]
            final_counts[p] = res[p][4]
            if want_routed:
                routed_all[p] = res[p][5]
            if keep_lam_paths:
                lam_paths[p] = res[p][0]
            if want_channel_by_replica:
                arr_by_rep[p] = res[p][6]

    return RmfBatchResult(
        m_count, k, paths, grid, focal,
        lam_sum, lam_sumsq, diff_sum, diff_sumsq, cnt_sum, int_sum,
        focal_arrivals, final_counts, routed_all, lam_paths, arr_by_rep,
    )


def routing_conditional_check(
    batch: RmfBatchResult, target_i: int, min_paths: int = 10_000, bin_cap: int = 6
):
    """Check that routing indicators behave like fair coin flips given counts.

    Conditionally on the per-channel spike counts, routed counts into the
    focal replica must be Binomial(count, 1/(M-1)) and independent across
    channels.  Returns a report dict with a per-bin mean check and a pairwise
    channel correlation check; ``passed`` aggregates both.
    """
    if batch.routed is None:
        raise ValueError("batch was run without want_routed")
    if batch.paths < min_paths:
        raise InsufficientPaths(f"need >= {min_paths} paths, got {batch.paths}")
    m_count, k = batch.m_count, batch.k
    p_route = 1.0 / (m_count - 1)
    counts = batch.final_counts.reshape(batch.paths, m_count, k)
    rows = []
    all_ok = True
    channels = [
        (n, j)
        for n in range(1, m_count + 1)
        for j in range(1, k + 1)
        if n != batch.focal and j != target_i
    ]
    for q in range(bin_cap + 1):
        n_spikes = 0
        n_routed = 0
        for (n, j) in channels:
            sel = counts[:, n - 1, j - 1] == q
            n_spikes += int(q * sel.sum())
            n_routed += int(batch.routed[sel, n - 1, j - 1, target_i - 1].sum())
        if n_spikes == 0:
            continue
        p_hat = n_routed / n_spikes
        half = 3 * math.sqrt(p_route * (1 - p_route) / n_spikes)
        ok = abs(p_hat - p_route) <= half
        all_ok &= ok
        rows.append(
            {"bin_count": q, "spikes": n_spikes, "p_hat": p_hat,
             "expected": p_route, "band": half, "ok": ok}
        )
    corr_rows = []
    for a in range(len(channels)):
        for b in range(a + 1, len(channels)):
            (n1, j1), (n2, j2) = channels[a], channels[b]
            q1 = counts[:, n1 - 1, j1 - 1]
            q2 = counts[:, n2 - 1, j2 - 1]
            c1 = batch.routed[:, n1 - 1, j1 - 1, target_i - 1]
            c2 = batch.routed[:, n2 - 1, j2 - 1, target_i - 1]
            # center by the conditional binomial mean, not the sample mean
            e1 = c1 - p_route * q1
            e2 = c2 - p_route * q2
            s1 = float(np.sqrt((e1 ** 2).mean()))
            s2 = float(np.sqrt((e2 ** 2).mean()))
            if s1 == 0 or s2 == 0:
                continue
            rho = float((e1 * e2).mean() / (s1 * s2))
            half = 3.0 / math.sqrt(batch.paths)
            ok = abs(rho) <= half
            all_ok &= ok
            corr_rows.append(
                {"ch1": (n1, j1), "ch2": (n2, j2), "rho": rho, "band": half, "ok": ok}
            )
    return {"target": target_i, "mean_bins": rows, "correlations": corr_rows,
            "passed": bool(all_ok)}
