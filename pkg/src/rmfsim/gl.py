"""Exact event-driven simulation of the finite spiking network.

Between events each intensity relaxes toward its base rate b_i with rate
1/tau_i (constant when tau_i is infinite).  A spike of neuron j adds
mu[j][i] to every other neuron's intensity and resets neuron j's own
intensity to r_j.  With all tau infinite the intensities are piecewise
constant and the direct (competing exponentials) method is exact; with
finite tau we use thinning with the dominating rate sum_i max(lambda_i, b_i),
valid because each intensity moves monotonically toward b_i between events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .errors import HorizonNonPositive, IntensityOverflow
from .model import InitialCondition, ValidatedParams, sample_initial
from .randomness import derive_path_seed, keyed_generator

H_MAX_DEFAULT = 1000.0


@dataclass
class Event:
    time: float
    kind: str          # "spike" or "arrival"
    source_neuron: int  # 1-based; for spikes, equals the stream's neuron
    source_replica: int
    jump: float        # signed intensity jump applied at the event
    lambda_after: float


@dataclass
class Trajectory:
    """Piecewise intensity path and event log of one (replica, neuron) stream."""

    replica: int
    neuron: int
    b: float
    tau: float
    segments: list[tuple[float, float]] = field(default_factory=list)  # (t_start, lam_start)
    events: list[Event] = field(default_factory=list)

    def value(self, t: float) -> float:
        """Intensity at time t (cadlag: value after any event at t)."""
        idx = 0
        for i, (ts, _) in enumerate(self.segments):
            if ts <= t:
                idx = i
            else:
                break
        ts, lam = self.segments[idx]
        if math.isinf(self.tau):
            return lam
        return self.b + (lam - self.b) * math.exp(-(t - ts) / self.tau)

    def integral(self, t: float) -> float:
        """Exact integral of the intensity over [0, t]."""
        total = 0.0
        for i, (ts, lam) in enumerate(self.segments):
            if ts >= t:
                break
            te = self.segments[i + 1][0] if i + 1 < len(self.segments) else math.inf
            te = min(te, t)
            if math.isinf(self.tau):
                total += lam * (te - ts)
            else:
                d = te - ts
                total += self.b * d + (lam - self.b) * self.tau * (1 - math.exp(-d / self.tau))
        return total

    def count(self, t: float) -> int:
        return sum(1 for e in self.events if e.kind == "spike" and e.time <= t)


@dataclass
class CountingSummary:
    """Grid-sampled spike and arrival counts for one path."""

    grid: np.ndarray                     # grid times, shape (G+1,)
    spike_counts: np.ndarray             # (K, G+1) ints
    arrival_counts: np.ndarray           # (K, K, G+1); [j-1, i-1] = arrivals j -> i


class _PathDraws:
    """Sequential uniform draws for one path, refilled in blocks.

    Both the python engines and the batch kernels consume uniforms from the
    same keyed stream in the same order, so paths replay identically.
    """

    def __init__(self, master_seed: int, path: int, purpose: str, block: int = 4096):
        self._gen = keyed_generator(derive_path_seed(master_seed, path), purpose)
        self._block = block
        self._buf = self._gen.random(block)
        self._pos = 0
        self.consumed = 0

    def next(self) -> float:
        if self._pos == len(self._buf):
            self._buf = self._gen.random(self._block)
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        self.consumed += 1
        return u


def _decayed(lam: float, b: float, tau: float, dt: float) -> float:
    if math.isinf(tau):
        return lam
    return b + (lam - b) * math.exp(-dt / tau)


def simulate_gl(
    params: ValidatedParams,
    init: InitialCondition,
    horizon: float,
    grid_step: float,
    master_seed: int,
    path: int,
    h_max: float = H_MAX_DEFAULT,
) -> tuple[list[Trajectory], CountingSummary]:
    """One exact sample path of the finite network on [0, horizon]."""
    if horizon <= 0:
        raise HorizonNonPositive(f"horizon {horizon} must be positive")
    k = params.k
    init_stream = keyed_generator(derive_path_seed(master_seed, path), "init")
    lam = sample_initial(init, params, init_stream).copy()
    draws = _PathDraws(master_seed, path, "gl")
    mu = params.mu_array()
    b = np.asarray(params.b)
    r = np.asarray(params.r)
    tau = np.asarray(params.tau)
    pure_jump = params.convergence_eligible

    trajs = [
        Trajectory(replica=1, neuron=i + 1, b=b[i], tau=tau[i],
                   segments=[(0.0, float(lam[i]))])
        for i in range(k)
    ]
    n_grid = int(round(horizon / grid_step))
    grid = np.linspace(0.0, horizon, n_grid + 1)
    spike_counts = np.zeros((k, n_grid + 1), dtype=np.int64)
    arrival_counts = np.zeros((k, k, n_grid + 1), dtype=np.int64)
    spikes_cum = np.zeros(k, dtype=np.int64)
    arrivals_cum = np.zeros((k, k), dtype=np.int64)

    t = 0.0
    g_next = 1  # grid[0] rows stay at zero counts

    def record_until(t_new: float):
        nonlocal g_next
        while g_next <= n_grid and grid[g_next] < t_new:
            spike_counts[:, g_next] = spikes_cum
            arrival_counts[:, :, g_next] = arrivals_cum
            g_next += 1

    while True:
        if pure_jump:
            total = float(lam.sum())
            dt = -math.log(draws.next()) / total
            t_new = t + dt
            if t_new > horizon:
                break
            record_until(t_new)
            x = draws.next() * total
            acc = 0.0
            spiker = k - 1
            for i in range(k):
                acc += lam[i]
                if acc >= x:
                    spiker = i
                    break
        else:
            bound = float(np.maximum(lam, b).sum())
            dt = -math.log(draws.next()) / bound
            t_new = t + dt
            if t_new > horizon:
                break
            lam = np.array([_decayed(lam[i], b[i], tau[i], dt) for i in range(k)])
            t = t_new
            total = float(lam.sum())
            if draws.next() * bound > total:
                continue  # rejected proposal; bound recomputed next round
            record_until(t_new)
            x = draws.next() * total
            acc = 0.0
            spiker = k - 1
            for i in range(k):
                acc += lam[i]
                if acc >= x:
                    spiker = i
                    break
        t = t_new
        spikes_cum[spiker] += 1
        jump = r[spiker] - lam[spiker]
        lam[spiker] = r[spiker]
        trajs[spiker].segments.append((t, float(lam[spiker])))
        trajs[spiker].events.append(
            Event(t, "spike", spiker + 1, 1, float(jump), float(lam[spiker]))
        )
        for i in range(k):
            if i == spiker:
                continue
            w = mu[spiker, i]
            if w == 0.0:
                continue
            arrivals_cum[spiker, i] += 1
            lam[i] += w
            if lam[i] > h_max:
                raise IntensityOverflow(
                    f"neuron {i+1} intensity {lam[i]} exceeded h_max={h_max}"
                )
            trajs[i].segments.append((t, float(lam[i])))
            trajs[i].events.append(
                Event(t, "arrival", spiker + 1, 1, float(w), float(lam[i]))
            )

    record_until(horizon + grid_step)  # flush remaining grid rows
    spike_counts[:, n_grid] = spikes_cum
    arrival_counts[:, :, n_grid] = arrivals_cum
    return trajs, CountingSummary(grid, spike_counts, arrival_counts)


def single_neuron_law(lam0: float, r: float, t: float, mass_tol: float = 1e-12):
    """Exact law of the single-neuron spike count on [0, t] and mean intensity.

    With no inputs, the spike train is a delayed renewal process: the first
    gap is Exp(lam0), every later gap Exp(r).  Returns (pmf dict, mean
    intensity at t).  The pmf is computed by quadrature of

        P(N = n) = int_0^t lam0 e^{-lam0 s} P(Pois(r (t-s)) = n-1) ds,  n >= 1

    independent of any simulation code path.
    """
    if not lam0 >= r > 0:
        raise ValueError("requires lam0 >= r > 0")
    mean_lambda = r + (lam0 - r) * math.exp(-lam0 * t)
    if t == 0:
        return {0: 1.0}, lam0
    pmf = {0: math.exp(-lam0 * t)}
    total = pmf[0]
    n = 1
    while total < 1 - mass_tol:
        val, _ = integrate.quad(
            lambda s, n=n: lam0 * math.exp(-lam0 * s) * stats.poisson.pmf(n - 1, r * (t - s)),
            0.0, t, epsabs=1e-14, epsrel=1e-12,
        )
        pmf[n] = val
        total += val
        n += 1
        if n > 10000:
            raise RuntimeError("single_neuron_law failed to accumulate mass")
    return pmf, mean_lambda
