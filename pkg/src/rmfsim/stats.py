"""Quantitative verification: distances, bounds, and law checks.

Everything here is a pure function of sample arrays.  All hypothesis checks
use 3-sigma bands rather than p-values, except the two-sample chi-square
helper used for law-equality tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import stats as sps
from scipy.special import gammaln

from .errors import GridMismatch, InsufficientPaths, LatticeMismatch, NotStationary

CHEN_STEIN_CONST = 0.74


# ---------------------------------------------------------------------------
# empirical pmfs and total variation


@dataclass(frozen=True)
class EmpiricalPmf:
    """Finite-support pmf estimated from n samples on an integer lattice.

    ``scale`` is the lattice spacing as an exact rational; integer-valued
    samples have scale 1.  Two pmfs are comparable iff their scales match.
    """

    counts: dict
    n: int
    scale: Fraction = Fraction(1)

    @staticmethod
    def from_samples(samples, scale: Fraction = Fraction(1)) -> "EmpiricalPmf":
        vals, cnts = np.unique(np.asarray(samples, dtype=np.int64), return_counts=True)
        return EmpiricalPmf(
            {int(v): int(c) for v, c in zip(vals, cnts)}, int(len(samples)), scale
        )

    def prob(self, k: int) -> float:
        return self.counts.get(k, 0) / self.n


def lattice_from_weighted(channel_counts: np.ndarray, weights) -> EmpiricalPmf:
    """Exact lattice pmf of sum_j w_j * count_j for rational weights.

    Weighted sums live on an irregular lattice unless rescaled; this maps
    them to integers via the least common denominator of the weights.
    """
    fracs = [Fraction(w).limit_denominator(10_000) for w in weights]
    den = math.lcm(*[f.denominator for f in fracs]) if fracs else 1
    ints = np.array([int(f * den) for f in fracs], dtype=np.int64)
    vals = channel_counts @ ints
    return EmpiricalPmf.from_samples(vals, scale=Fraction(1, den))


@dataclass(frozen=True)
class TvEstimate:
    value: float
    se: float
    bias_bound: float  # plug-in bias is at most sqrt(|support| / n) / 2


def empirical_tv(a: EmpiricalPmf, b) -> TvEstimate:
    """Total variation (half L1) between an empirical pmf and a reference.

    ``b`` may be another EmpiricalPmf on the same lattice or an exact pmf as
    a dict value -> probability; mass of an exact reference outside the
    enumerated support is accounted for exactly.
    """
    if isinstance(b, EmpiricalPmf):
        if a.scale != b.scale:
            raise LatticeMismatch(f"lattice scales differ: {a.scale} vs {b.scale}")
        support = sorted(set(a.counts) | set(b.counts))
        pa = np.array([a.prob(k) for k in support])
        pb = np.array([b.prob(k) for k in support])
        tv = 0.5 * float(np.abs(pa - pb).sum())
        s = np.sign(pa - pb)
        da = float((s * pa).sum())
        db = float((s * pb).sum())
        se = 0.5 * math.sqrt(
            max(1 - da * da, 0.0) / a.n + max(1 - db * db, 0.0) / b.n
        )
        bias = 0.5 * math.sqrt(len(support) / a.n) + 0.5 * math.sqrt(len(support) / b.n)
        return TvEstimate(tv, se, bias)
    support = sorted(set(a.counts) | set(b))
    pa = np.array([a.prob(k) for k in support])
    pb = np.array([b.get(k, 0.0) for k in support])
    tail = max(0.0, 1.0 - float(pb.sum()))  # reference mass beyond the support
    tv = 0.5 * float(np.abs(pa - pb).sum()) + 0.5 * tail
    s = np.sign(pa - pb)
    delta = float((s * pa).sum())
    se = 0.5 * math.sqrt(max(1 - delta * delta, 0.0) / a.n)
    return TvEstimate(tv, se, 0.5 * math.sqrt(len(support) / a.n))


def pooled_channel_tv(arr: np.ndarray, ref: dict) -> TvEstimate:
    """TV of one arrival channel's law, pooling the exchangeable replicas.

    ``arr`` is (paths, M): the channel count received by each replica on each
    path.  Replicas share a law, so pooling gives paths*M samples and pushes
    the plug-in bias floor far below the single-replica estimate; the
    standard error is clustered by path, which absorbs the within-path
    dependence the routing introduces.
    """
    paths, m = arr.shape
    hi = max(int(arr.max(initial=0)), max(ref) if ref else 0)
    flat = arr.astype(np.int64) + (np.arange(paths) * (hi + 1))[:, None]
    h = np.bincount(flat.ravel(), minlength=paths * (hi + 1))
    h = h.reshape(paths, hi + 1) / m
    p_hat = h.mean(axis=0)
    q = np.array([ref.get(k, 0.0) for k in range(hi + 1)])
    tail = max(0.0, 1.0 - float(q.sum()))
    s = np.sign(p_hat - q)
    tv = 0.5 * float(np.abs(p_hat - q).sum()) + 0.5 * tail
    y = 0.5 * (h * s).sum(axis=1)  # per-path linearization of the TV statistic
    se = float(y.std(ddof=1) / math.sqrt(paths))
    bias = 0.5 * math.sqrt(2 / math.pi) * float(
        (h.std(axis=0, ddof=1) / math.sqrt(paths)).sum()
    )
    return TvEstimate(tv, se, bias)


def poisson_pmf_dict(mean: float, mass_tol: float = 1e-12) -> dict:
    """Exact Poisson pmf truncated once the enumerated mass reaches 1 - tol."""
    if mean <= 0:
        return {0: 1.0}
    out = {}
    total = 0.0
    k = 0
    while total < 1 - mass_tol:
        p = float(sps.poisson.pmf(k, mean))
        out[k] = p
        total += p
        k += 1
        if k > 100_000:
            break
    return out


def scaled_poisson_sum_pmf(means, coeffs, mass_tol: float = 1e-10) -> dict:
    """Exact pmf of sum_j c_j * X_j with independent X_j ~ Poisson(mean_j).

    ``coeffs`` are the integer lattice weights produced by
    ``lattice_from_weighted``; the result lives on the same lattice.
    """
    pmf = {0: 1.0}
    for mean, c in zip(means, coeffs):
        if mean <= 0:
            continue
        base = poisson_pmf_dict(mean, mass_tol)
        nxt: dict = {}
        for v, p in pmf.items():
            for x, q in base.items():
                key = v + int(c) * x
                nxt[key] = nxt.get(key, 0.0) + p * q
        pmf = nxt
    return pmf


# ---------------------------------------------------------------------------
# Stein equation


@dataclass(frozen=True)
class SteinSolution:
    lam: float
    subset: frozenset
    g: np.ndarray          # g[0..k_max], g[0] = 0 by convention
    norm_g: float          # sup_{k>=1} |g(k)|
    norm_dg: float         # sup_{k>=1} |g(k+1) - g(k)|

    def residuals(self) -> np.ndarray:
        """lam*g(k+1) - k*g(k) - (1_B(k) - P(Z in B)) over the computed range."""
        k = np.arange(len(self.g) - 1)
        ind = np.array([1.0 if int(x) in self.subset else 0.0 for x in k])
        p_b = float(sum(sps.poisson.pmf(a, self.lam) for a in self.subset))
        return self.lam * self.g[1:] - k * self.g[:-1] - (ind - p_b)


def _stein_singleton(lam: float, a: int, k_max: int) -> np.ndarray:
    """Solution for B = {a}, evaluated stably (single-signed series).

    Forward recursion is numerically explosive (homogeneous solutions grow
    like k!/lam^k), so each value is computed from the closed form instead.
    """
    g = np.zeros(k_max + 1)
    # partial sums S_k = sum_{j<=k} lam^j / j!
    s = np.cumsum(np.exp(np.arange(k_max + 1) * math.log(lam) - gammaln(np.arange(k_max + 1) + 1)))
    for k in range(k_max):
        if k >= a:
            # g(k+1) = e^-lam (k!/a!) sum_{d>=0} lam^{a+d} k!/(k+1+d)! ... term recursion
            term = math.exp(-lam + a * math.log(lam) - gammaln(a + 1)) / (k + 1)
            total = term
            d = 0
            while term > 1e-22 * total:
                term *= lam / (k + 2 + d)
                total += term
                d += 1
            g[k + 1] = total
        else:
            # g(k+1) = -e^-lam (k!/a!) lam^{a-k-1} S_k
            lg = -lam + gammaln(k + 1) - gammaln(a + 1) + (a - k - 1) * math.log(lam)
            g[k + 1] = -math.exp(lg) * s[k]
    return g


def stein_solve(lam: float, subset, k_max: int) -> SteinSolution:
    """Solve the Stein recursion for a finite subset of the integers.

    Satisfies lam*g(k+1) - k*g(k) = 1_B(k) - P(Z in B) with g(0) = 0, where
    Z is Poisson(lam).  Norms are taken over k >= 1, the range the
    Chen-Stein argument uses (g(0) = 0 is a convention, not a solution value).
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    subset = frozenset(int(x) for x in subset)
    if subset.issuperset(range(k_max + 1)):
        # B covering the whole computed range stands for the full space:
        # the right-hand side vanishes identically, so g does too
        return SteinSolution(lam, subset, np.zeros(k_max + 1), 0.0, 0.0)
    if subset and k_max < max(subset) + 10:
        raise ValueError("k_max must be at least max(B) + 10")
    g = np.zeros(k_max + 1)
    for a in sorted(subset):
        g += _stein_singleton(lam, a, k_max)
    norm_g = float(np.max(np.abs(g[1:]))) if k_max >= 1 else 0.0
    norm_dg = float(np.max(np.abs(np.diff(g[1:])))) if k_max >= 2 else 0.0
    return SteinSolution(lam, subset, g, norm_g, norm_dg)


# ---------------------------------------------------------------------------
# Chen-Stein bound for the replica arrival channels


@dataclass(frozen=True)
class ChenSteinReport:
    m_count: int
    source: int
    target: int
    t: float
    mean_n1j: float          # pooled estimate of E[N_{1,j}([0,t])]
    l1_term: float           # E| sum_{n != m} (E[N] - N_{n,j}) |
    l1_se: float
    term1: float
    term2: float
    bound: float
    bound_se: float
    tv_picard: TvEstimate    # reference mean from the independent solver
    tv_same_run: TvEstimate  # reference mean re-estimated from the same run
    picard_mean: float
    tv_pooled: TvEstimate | None = None  # replica-pooled variant, sharper floor


def chen_stein_bound(
    final_counts: np.ndarray,    # (paths, M, K) spike counts at t
    channel_counts: np.ndarray,  # (paths,) arrivals on the channel j -> (m, i) at t
    source_j: int,
    target_i: int,
    t: float,
    m_count: int,
    focal: int,
    picard_mean: float,
    min_paths: int = 10_000,
    channel_by_replica: np.ndarray | None = None,  # (paths, M) for pooled TV
) -> ChenSteinReport:
    """Evaluate both bound terms from empirical moments and pair with TV."""
    paths = final_counts.shape[0]
    if paths < min_paths:
        raise InsufficientPaths(f"need >= {min_paths} paths, got {paths}")
    counts_j = final_counts[:, :, source_j - 1].astype(float)
    mean_pool = float(counts_j.mean())  # replicas are exchangeable
    others = [n for n in range(m_count) if n + 1 != focal]
    s = (m_count - 1) * mean_pool - counts_j[:, others].sum(axis=1)
    l1 = float(np.abs(s).mean())
    l1_se = float(np.abs(s).std(ddof=1) / math.sqrt(paths))
    coeff1 = min(1.0, CHEN_STEIN_CONST / math.sqrt(mean_pool)) if mean_pool > 0 else 1.0
    term1 = coeff1 * l1 / (m_count - 1)
    term2 = min(1.0, mean_pool) / (m_count - 1)
    mean_se = float(counts_j.std(ddof=1) / math.sqrt(counts_j.size))
    bound_se = math.hypot(coeff1 * l1_se / (m_count - 1), mean_se / (m_count - 1))
    pmf = EmpiricalPmf.from_samples(channel_counts)
    tv_picard = empirical_tv(pmf, poisson_pmf_dict(picard_mean))
    tv_same = empirical_tv(pmf, poisson_pmf_dict(mean_pool))
    tv_pooled = None
    if channel_by_replica is not None:
        tv_pooled = pooled_channel_tv(
            channel_by_replica, poisson_pmf_dict(picard_mean)
        )
    return ChenSteinReport(
        m_count, source_j, target_i, t, mean_pool, l1, l1_se,
        term1, term2, term1 + term2, bound_se, tv_picard, tv_same, picard_mean,
        tv_pooled,
    )


# ---------------------------------------------------------------------------
# triangular law of large numbers


def tlln_error(counts: np.ndarray, m_count: int, focal: int = 1,
               min_paths: int = 1000):
    """Scaled centered replica-sum error and its standard error.

    ``counts``: (paths, M) spike counts of one neuron across replicas.
    """
    paths = counts.shape[0]
    if paths < min_paths:
        raise InsufficientPaths(f"need >= {min_paths} paths, got {paths}")
    if counts.shape[1] != m_count:
        raise GridMismatch("counts second axis must enumerate replicas")
    mean_pool = float(counts.mean())
    others = [n for n in range(m_count) if n + 1 != focal]
    s = (m_count - 1) * mean_pool - counts[:, others].astype(float).sum(axis=1)
    err = float(np.abs(s).mean() / (m_count - 1))
    se = float(np.abs(s).std(ddof=1) / math.sqrt(paths) / (m_count - 1))
    return err, se


def tlln_folded_normal(mean: float, m_count: int) -> float:
    """CLT prediction for i.i.d. Poisson(mean) counts: sqrt(2*mean/(pi*(M-1)))."""
    return math.sqrt(2 * mean / (math.pi * (m_count - 1)))


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)),
                            np.log(np.asarray(ys, float)), 1)[0])


# ---------------------------------------------------------------------------
# mean equality, moment bounds


def mean_equality_check(rmf_mean, rmf_se, limit_mean, limit_se, grid, m_count):
    """z-scores of the replica mean against the limit mean per (t, neuron).

    Arrays are (K, G+1).  Passes iff every |z| <= 3; exact ties (both SEs
    zero, as at t = 0 under a deterministic start) count as z = 0.
    """
    if rmf_mean.shape != limit_mean.shape:
        raise GridMismatch(
            f"shape mismatch {rmf_mean.shape} vs {limit_mean.shape}"
        )
    pooled = np.sqrt(rmf_se ** 2 + limit_se ** 2)
    diff = rmf_mean - limit_mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(pooled > 0, diff / np.where(pooled > 0, pooled, 1.0), 0.0)
        z = np.where((pooled == 0) & (diff != 0), np.inf, z)
    rows = []
    for i in range(rmf_mean.shape[0]):
        for g in range(rmf_mean.shape[1]):
            rows.append({
                "m_count": m_count, "t": float(grid[g]), "neuron": i + 1,
                "rmf_mean": float(rmf_mean[i, g]), "rmf_se": float(rmf_se[i, g]),
                "limit_mean": float(limit_mean[i, g]), "limit_se": float(limit_se[i, g]),
                "z": float(z[i, g]),
            })
    passed = bool(np.all(np.abs(z) <= 3.0))
    return rows, passed


def moment_bound_q(p: int, lam0_mean: float, k: int, r_max: float, horizon: float) -> float:
    """Growth bound Q_p for the dominating exchangeable no-reset dynamics."""
    q1 = lam0_mean * math.exp((k + r_max - 1) * horizon)
    if p == 1:
        return q1
    if p == 2:
        return (lam0_mean ** 2 + (k - 1) * q1 * horizon) * math.exp(2 * (k - 1) * horizon)
    raise ValueError("p must be 1 or 2")


def moment_bound_check(moment_by_grid: np.ndarray, p: int, lam0_mean: float,
                       k: int, r_max: float, horizon: float):
    """Empirical p-th moment under Q_p at every grid time; returns margin."""
    q = moment_bound_q(p, lam0_mean, k, r_max, horizon)
    worst = float(np.max(moment_by_grid))
    return worst <= q, (q - worst) / q, q


# ---------------------------------------------------------------------------
# stationary-regime generator residual


def stationarity_gap(window1: np.ndarray, window2: np.ndarray) -> tuple[float, float]:
    """Relative gap of the mean intensity between two sample windows, and
    the 2-sigma pooled band it must stay inside."""
    m1 = float(window1.mean())
    m2 = float(window2.mean())
    se1 = float(window1.std(ddof=1) / math.sqrt(window1.size))
    se2 = float(window2.std(ddof=1) / math.sqrt(window2.size))
    return abs(m1 - m2), 2 * math.hypot(se1, se2)


def mgf_residual(
    window1: np.ndarray,   # (n1, M*K) earlier-window stationary samples
    window2: np.ndarray,   # (n2, M*K) later-window samples used for the estimate
    u: np.ndarray,         # (M, K) exponent argument, ||u||_inf <= 0.1
    params,
    m_count: int,
):
    """Monte Carlo residual of the stationary generator identity.

    Returns (residual, se, alt_residual) where ``alt_residual`` uses the
    (M-1)^-K routing prefactor instead of the generator's 1/|V| = (M-1)^-(K-1);
    the two disagree by a factor (M-1), which the data discriminates.
    Raises NotStationary when the two windows' mean intensities disagree
    beyond twice the pooled standard error.
    """
    gap, band = stationarity_gap(window1, window2)
    if gap > band:
        raise NotStationary(f"window means differ by {gap} > band {band}")
    k = params.k
    u = np.asarray(u, dtype=float)
    if u.shape != (m_count, k):
        raise ValueError(f"u must have shape ({m_count},{k})")
    if np.max(np.abs(u)) > 0.1 + 1e-12:
        raise ValueError("||u||_inf must be <= 0.1")
    mu = params.mu_array()
    r = np.asarray(params.r)
    lam = window2.reshape(window2.shape[0], m_count, k)
    uf = u.reshape(1, m_count, k)
    inner = (lam * uf).sum(axis=(1, 2))
    e_inner = np.exp(inner)

    # spike factor of stream (m, i): e^{u_mi r_i} * prod_{j != i} sum_{n != m} e^{u_nj mu[i -> j]}
    w = np.empty((m_count, k))
    for m in range(m_count):
        for i in range(k):
            prod = 1.0
            for j in range(k):
                if j == i:
                    continue
                tot = 0.0
                for n in range(m_count):
                    if n == m:
                        continue
                    tot += math.exp(u[n, j] * mu[i, j])
                prod *= tot
            w[m, i] = math.exp(u[m, i] * r[i]) * prod
    norm = (m_count - 1) ** (k - 1)

    neg = (lam * e_inner[:, None, None]).sum(axis=(1, 2))
    # exp(<u,lam> - u_mi lam_mi): drop the own coordinate from the exponent
    own = np.exp(inner[:, None, None] - uf * lam)
    pos = (lam * own * (w / norm)[None, :, :]).sum(axis=(1, 2))
    x = pos - neg
    residual = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    if m_count > 1:
        alt = float((pos / (m_count - 1) - neg).mean())
    else:
        alt = math.nan  # the alternative prefactor is undefined for one replica
    return residual, se, alt


# ---------------------------------------------------------------------------
# law-equality helper


def chi_square_two_sample(x: np.ndarray, y: np.ndarray, min_expected: float = 5.0):
    """Two-sample chi-square on integer counts with tail pooling.

    Returns (statistic, dof, p_value).
    """
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    hi = int(max(x.max(initial=0), y.max(initial=0)))
    ox = np.bincount(x, minlength=hi + 1).astype(float)
    oy = np.bincount(y, minlength=hi + 1).astype(float)
    nx, ny = ox.sum(), oy.sum()
    # pool bins (from the tail down) until every pooled expected count clears the floor
    bins = []
    cx = cy = 0.0
    for v in range(hi + 1):
        cx += ox[v]
        cy += oy[v]
        ex = nx * (cx + cy) / (nx + ny)
        ey = ny * (cx + cy) / (nx + ny)
        if ex >= min_expected and ey >= min_expected:
            bins.append((cx, cy))
            cx = cy = 0.0
    if cx + cy > 0:
        if bins:
            px, py = bins[-1]
            bins[-1] = (px + cx, py + cy)
        else:
            bins.append((cx, cy))
    if len(bins) < 2:
        return 0.0, 0, 1.0
    stat = 0.0
    for cx, cy in bins:
        tot = cx + cy
        ex = nx * tot / (nx + ny)
        ey = ny * tot / (nx + ny)
        stat += (cx - ex) ** 2 / ex + (cy - ey) ** 2 / ey
    dof = len(bins) - 1
    return float(stat), dof, float(sps.chi2.sf(stat, dof))
