"""Batch experiment orchestration with a reproducibility manifest.

Every subcommand writes delimited files with fixed formatting (12 significant
digits, LF line endings) plus ``manifest.json`` recording the canonical
config hash, master seed, tool version and per-file checksums.  Outputs are
a pure function of (config, seed, tool version): reruns and different thread
counts produce byte-identical files.  A ``_INCOMPLETE`` marker exists while
a run is in flight so interrupted runs are never mistaken for finished ones.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .errors import IncompleteRun, OutputDirNotEmpty
from .gl import simulate_gl
from .limit import phi_contraction_curve, picard_solve_means, simulate_limit_path
from .model import ExperimentConfig
from .rmf import simulate_rmf, simulate_rmf_batch
from .stats import (
    EmpiricalPmf,
    chen_stein_bound,
    empirical_tv,
    lattice_from_weighted,
    mean_equality_check,
    mgf_residual,
    moment_bound_check,
    scaled_poisson_sum_pmf,
    stein_solve,
    tlln_error,
)
from .randomness import keyed_generator

SCHEMA_VERSION = 1
INCOMPLETE_MARKER = "_INCOMPLETE"

# pipeline constants; changing them changes outputs, so they are versioned
PICARD_PATH_CAP = 20_000
PICARD_TOL = 5e-3
PICARD_MAX_ITERS = 12
PHI_ITERS = 5
PHI_PATH_CAP = 1_500
L1_DIAG_PATHS = 200
STEIN_CASES = 200
MGF_BURN_IN_FACTOR = 50.0


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float):
        return "%.12g" % x
    return str(x)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.to_json_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def prepare_out_dir(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise OutputDirNotEmpty(f"{out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    (out / INCOMPLETE_MARKER).write_text("running\n")
    return out


def write_manifest(out: Path, cfg: ExperimentConfig, started: float,
                   paths_total: int) -> dict:
    files = {}
    for p in sorted(out.iterdir()):
        if p.name in (INCOMPLETE_MARKER, "manifest.json") or p.is_dir():
            continue
        files[p.name] = sha256_file(p)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash(cfg),
        "master_seed": cfg.seed,
        "tool_version": __version__,
        "files": files,
        "wall_clock_s": round(time.time() - started, 3),
        "paths_total": paths_total,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    (out / INCOMPLETE_MARKER).unlink()
    return manifest


def _write_config(out: Path, cfg: ExperimentConfig) -> None:
    (out / "config.json").write_text(cfg.to_json() + "\n")


def _event_kind(e) -> str:
    if e.kind == "spike":
        return "spike"
    return f"arrival:{e.source_neuron}:{e.source_replica}"


# ---------------------------------------------------------------------------
# subcommands


def run_gl(cfg: ExperimentConfig, out: Path) -> dict:
    rows_events, rows_counts = [], []
    for p in range(cfg.paths):
        trajs, summary = simulate_gl(
            cfg.params, cfg.init, cfg.horizon, cfg.grid_step, cfg.seed, p
        )
        events = sorted(
            (e for tr in trajs for e in tr.events), key=lambda e: e.time
        )
        for e in events:
            rows_events.append(
                (p, e.time, e.source_replica, e.source_neuron,
                 _event_kind(e), e.jump, e.lambda_after)
            )
        for g, t in enumerate(summary.grid):
            for i in range(cfg.params.k):
                rows_counts.append((p, t, i + 1, summary.spike_counts[i, g]))
    write_csv(out / "events.csv",
              ["path", "t", "replica", "neuron", "kind", "jump", "lambda_after"],
              rows_events)
    write_csv(out / "gl_counts.csv", ["path", "t", "neuron", "n_count"], rows_counts)
    return {}


def run_rmf(cfg: ExperimentConfig, out: Path) -> dict:
    rows_snap, rows_tally = [], []
    for m_count in cfg.m_list:
        for p in range(cfg.paths):
            res = simulate_rmf(
                cfg.params, m_count, cfg.init, cfg.horizon, cfg.grid_step,
                cfg.seed, p, engine=cfg.engine,
            )
            for g, t in enumerate(res.grid):
                for m in range(1, m_count + 1):
                    for i in range(1, cfg.params.k + 1):
                        s = (m - 1) * cfg.params.k + (i - 1)
                        rows_snap.append(
                            (p, t, m_count, m, i,
                             res.trajectories[(m, i)].value(float(t)),
                             res.spike_counts[s, g])
                        )
                for i in range(1, cfg.params.k + 1):
                    for j in range(1, cfg.params.k + 1):
                        if j == i:
                            continue
                        rows_tally.append(
                            (p, t, m_count, res.tally.focal_replica, i, j,
                             res.tally.channel_counts[j - 1, i - 1, g])
                        )
    write_csv(out / "snapshots.csv",
              ["path", "t", "M", "replica", "neuron", "lambda", "n_count"],
              rows_snap)
    write_csv(out / "tallies.csv",
              ["path", "t", "M", "focal_replica", "focal_neuron",
               "source_neuron", "channel_count"],
              rows_tally)
    return {}


def _solve_means(cfg: ExperimentConfig):
    return picard_solve_means(
        cfg.params, cfg.init, cfg.horizon, cfg.grid_step,
        min(cfg.paths, PICARD_PATH_CAP), PICARD_MAX_ITERS, PICARD_TOL, cfg.seed,
    )


def _write_means(out: Path, means, gaps) -> None:
    cum = means.cumulative()
    rows = [
        (t, i + 1, means.values[i, g], means.se[i, g], cum[i, g])
        for g, t in enumerate(means.times)
        for i in range(means.k)
    ]
    write_csv(out / "means.csv", ["t", "neuron", "mean", "se", "cumulative"], rows)
    write_csv(out / "picard_gaps.csv", ["iteration", "gap"],
              [(l + 1, g) for l, g in enumerate(gaps)])


def run_limit(cfg: ExperimentConfig, out: Path) -> dict:
    means, gaps = _solve_means(cfg)
    _write_means(out, means, gaps)
    return {}


def run_phi(cfg: ExperimentConfig, out: Path) -> dict:
    d, se = phi_contraction_curve(
        cfg.params, cfg.m_list[0], cfg.horizon, PHI_ITERS,
        min(cfg.paths, PHI_PATH_CAP), cfg.seed, cfg.init,
    )
    write_csv(out / "contraction.csv", ["l", "d_l", "se"],
              [(l + 1, d[l], se[l]) for l in range(len(d))])
    ok = all(
        d[l + 1] <= d[l] + 3 * math.hypot(se[l], se[l + 1])
        for l in range(len(d) - 1)
    )
    return {"contraction_nonincreasing": ok}


def _rational_weights(weights, max_den: int = 64):
    fracs = []
    for w in weights:
        f = Fraction(w).limit_denominator(max_den)
        if abs(float(f) - w) > 1e-12:
            return None
        fracs.append(f)
    return fracs


def run_convergence(cfg: ExperimentConfig, out: Path) -> dict:
    means, gaps = _solve_means(cfg)
    _write_means(out, means, gaps)
    cum = means.cumulative()
    k = cfg.params.k
    mu = cfg.params.mu_array()
    lam0_mean = cfg.init.mean()

    rows_tv, rows_tvw, rows_tlln, rows_me, rows_mom, rows_l1 = [], [], [], [], [], []
    for m_count in cfg.m_list:
        batch = simulate_rmf_batch(
            cfg.params, m_count, cfg.init, cfg.horizon, cfg.grid_step,
            cfg.seed, cfg.paths, want_channel_by_replica=True,
        )
        counts_mk = batch.final_counts.reshape(cfg.paths, m_count, k)
        for i in range(1, k + 1):
            for j in range(1, k + 1):
                if j == i:
                    continue
                rep = chen_stein_bound(
                    counts_mk, batch.focal_arrivals[:, j - 1, i - 1, -1],
                    j, i, cfg.horizon, m_count, batch.focal,
                    picard_mean=float(cum[j - 1, -1]),
                    min_paths=min(cfg.paths, 10_000),
                    channel_by_replica=batch.arrivals_by_replica[:, :, j - 1, i - 1],
                )
                rows_tv.append(
                    (m_count, cfg.horizon, batch.focal, i, j, rep.mean_n1j,
                     rep.picard_mean, rep.tv_picard.value, rep.tv_picard.se,
                     rep.tv_picard.bias_bound, rep.tv_same_run.value,
                     rep.tv_pooled.value, rep.tv_pooled.se,
                     rep.term1, rep.term2, rep.bound, rep.bound_se,
                     rep.l1_term, rep.l1_se)
                )
            # weighted-sum distance, only on exactly-rational weight lattices
            sources = [j for j in range(1, k + 1) if j != i]
            ws = [mu[j - 1, i - 1] for j in sources]
            fracs = _rational_weights(ws)
            if fracs and any(ws):
                den = math.lcm(*[f.denominator for f in fracs])
                coeffs = [int(f * den) for f in fracs]
                ch = np.stack(
                    [batch.focal_arrivals[:, j - 1, i - 1, -1] for j in sources],
                    axis=1,
                )
                pmf = lattice_from_weighted(ch, ws)
                ref = scaled_poisson_sum_pmf(
                    [float(cum[j - 1, -1]) for j in sources], coeffs
                )
                tv = empirical_tv(pmf, ref)
                rows_tvw.append(
                    (m_count, cfg.horizon, i, den, tv.value, tv.se, tv.bias_bound)
                )
        for j in range(1, k + 1):
            err, se = tlln_error(counts_mk[:, :, j - 1], m_count, batch.focal)
            rows_tlln.append((m_count, j, err, se))
        foc = batch.focal
        sel = [batch.stream_index(foc, i) for i in range(1, k + 1)]
        me_rows, _ = mean_equality_check(
            batch.lam_mean()[sel], batch.lam_se()[sel],
            means.values, means.se, batch.grid, m_count,
        )
        rows_me.extend(
            (r["m_count"], r["t"], r["neuron"], r["rmf_mean"], r["rmf_se"],
             r["limit_mean"], r["limit_se"], r["z"])
            for r in me_rows
        )
        for p_ord in (1, 2):
            if p_ord == 1:
                emp = batch.lam_mean()
            else:
                emp = batch.lam_sumsq / batch.paths
            ok, margin, q = moment_bound_check(
                emp, p_ord, float(np.max(lam0_mean)), k, max(cfg.params.r),
                cfg.horizon,
            )
            rows_mom.append((m_count, p_ord, float(np.max(emp)), q, margin, ok))
        # coupled L1 gap diagnostic (believed not to vanish as M grows)
        n_diag = min(L1_DIAG_PATHS, cfg.paths)
        gap = np.zeros((n_diag, k))
        for p in range(n_diag):
            rmf_path = simulate_rmf(
                cfg.params, m_count, cfg.init, cfg.horizon, cfg.grid_step,
                cfg.seed, p, engine="embedded",
            )
            lim_path = simulate_limit_path(
                cfg.params, means, cfg.horizon, cfg.seed, p, cfg.init
            )
            for i in range(1, k + 1):
                a = rmf_path.trajectories[(1, i)].value(cfg.horizon)
                b = lim_path.lam_grid[i - 1, -1]
                gap[p, i - 1] = abs(a - b)
        for i in range(1, k + 1):
            rows_l1.append(
                (m_count, i, float(gap[:, i - 1].mean()),
                 float(gap[:, i - 1].std(ddof=1) / math.sqrt(n_diag)))
            )

    write_csv(out / "tv.csv",
              ["M", "t", "focal_replica", "target_neuron", "source_neuron",
               "mean_n1j", "picard_mean", "tv", "tv_se", "tv_bias",
               "tv_same_run", "tv_pooled", "tv_pooled_se",
               "term1", "term2", "bound", "bound_se",
               "l1_term", "l1_se"],
              rows_tv)
    write_csv(out / "tv_weighted.csv",
              ["M", "t", "target_neuron", "scale_denominator", "tv", "tv_se",
               "tv_bias"],
              rows_tvw)
    write_csv(out / "tlln.csv", ["M", "neuron", "error", "se"], rows_tlln)
    write_csv(out / "mean_equality.csv",
              ["M", "t", "neuron", "rmf_mean", "rmf_se", "limit_mean",
               "limit_se", "z"],
              rows_me)
    write_csv(out / "moments.csv",
              ["M", "p", "empirical_max", "bound", "margin", "ok"], rows_mom)
    write_csv(out / "l1_gap.csv", ["M", "neuron", "gap", "se"], rows_l1)
    summary = emit_summary(out, cfg)
    return summary["criteria"]


def run_stein(cfg: ExperimentConfig, out: Path) -> dict:
    rng = keyed_generator(cfg.seed, "stein-sweep")
    rows = []
    all_resid_ok = True
    all_dg_ok = True
    sqrt_holds = 0
    lin_holds = 0
    for case in range(STEIN_CASES):
        lam = 0.25 + float(rng.random()) * 7.75
        size = int(rng.integers(1, 11))
        subset = frozenset(int(x) for x in rng.choice(31, size=size, replace=False))
        sol = stein_solve(lam, subset, max(subset) + 12)
        resid = float(np.max(np.abs(sol.residuals())))
        dg_bound = min(1.0, 1.0 / lam)
        g_sqrt = min(1.0, 0.74 / math.sqrt(lam))
        g_lin = min(1.0, 0.74 / lam)
        dg_ok = sol.norm_dg <= dg_bound + 1e-12
        sqrt_ok = sol.norm_g <= g_sqrt + 1e-12
        lin_ok = sol.norm_g <= g_lin + 1e-12
        all_resid_ok &= resid < 1e-12
        all_dg_ok &= dg_ok
        sqrt_holds += sqrt_ok
        lin_holds += lin_ok
        rows.append((case, lam, len(subset), resid, sol.norm_g, sol.norm_dg,
                     dg_bound, dg_ok, sqrt_ok, lin_ok))
    write_csv(out / "stein.csv",
              ["case", "lam", "set_size", "residual_max", "norm_g", "norm_dg",
               "dg_bound", "dg_ok", "g_sqrt_bound_ok", "g_linear_bound_ok"],
              rows)
    checks = {
        "stein_residual_pointwise": all_resid_ok,
        "stein_dg_bound": all_dg_ok,
        "g_sqrt_bound_holds_count": sqrt_holds,
        "g_linear_bound_holds_count": lin_holds,
    }
    (out / "stein_summary.json").write_text(json.dumps(checks, indent=2) + "\n")
    return {"stein_residual_pointwise": all_resid_ok, "stein_dg_bound": all_dg_ok}


def run_mgf(cfg: ExperimentConfig, out: Path) -> dict:
    k = cfg.params.k
    burn = MGF_BURN_IN_FACTOR / min(cfg.params.r)
    horizon = round(1.4 * burn, 2)
    step = horizon / 4  # windows at 0.75 * horizon and horizon, both past burn-in
    paths = min(cfg.paths, 50_000)
    rows = []
    checks = {"mgf_u0_exact": True, "mgf_small_u": True}
    for m_count in cfg.m_list:
        batch = simulate_rmf_batch(
            cfg.params, m_count, cfg.init, horizon, step, cfg.seed, paths,
            keep_lam_paths=True,
        )
        w1 = batch.lam_paths[:, :, -2]
        w2 = batch.lam_paths[:, :, -1]
        for label, eps in (("zero", 0.0), ("small", 0.05)):
            u = np.zeros((m_count, k))
            u[0, :] = eps
            res, se, alt = mgf_residual(w1, w2, u, cfg.params, m_count)
            z = res / se if se > 0 else 0.0
            rows.append((m_count, label, eps, res, se, z, alt))
            if label == "zero":
                checks["mgf_u0_exact"] &= res == 0.0
            else:
                checks["mgf_small_u"] &= abs(res) <= 3 * se
    write_csv(out / "mgf.csv",
              ["M", "u_label", "u_value", "residual", "se", "z",
               "alt_prefactor_residual"],
              rows)
    return checks


# ---------------------------------------------------------------------------
# summary


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise IncompleteRun(f"missing {path.name}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_summary(out: Path, cfg: ExperimentConfig | None = None) -> dict:
    """Aggregate the convergence reports into machine-checkable booleans."""
    out = Path(out)
    tv = _read_csv(out / "tv.csv")
    tlln = _read_csv(out / "tlln.csv")
    me = _read_csv(out / "mean_equality.csv")
    mom = _read_csv(out / "moments.csv")

    by_channel: dict = {}
    for r in tv:
        by_channel.setdefault((r["target_neuron"], r["source_neuron"]), []).append(r)
    tv_monotone = True
    bound_dominates = True
    for rows in by_channel.values():
        rows.sort(key=lambda r: int(r["M"]))
        # monotonicity uses the replica-pooled estimate, whose bias floor is
        # far below the per-replica plug-in's
        for a, b in zip(rows, rows[1:]):
            gap = float(a["tv_pooled"]) - float(b["tv_pooled"])
            band = 3 * math.hypot(float(a["tv_pooled_se"]), float(b["tv_pooled_se"]))
            tv_monotone &= gap > band
        for r in rows:
            bound_dominates &= (
                float(r["bound"]) >= float(r["tv"]) + 3 * float(r["tv_se"])
            )
            bound_dominates &= (
                float(r["bound"]) >= float(r["tv_pooled"]) + 3 * float(r["tv_pooled_se"])
            )

    by_neuron: dict = {}
    for r in tlln:
        by_neuron.setdefault(r["neuron"], []).append(r)
    tlln_decreasing = True
    for rows in by_neuron.values():
        rows.sort(key=lambda r: int(r["M"]))
        for a, b in zip(rows, rows[1:]):
            gap = float(a["error"]) - float(b["error"])
            band = 3 * math.hypot(float(a["se"]), float(b["se"]))
            tlln_decreasing &= gap > band

    mean_equality = all(abs(float(r["z"])) <= 3.0 for r in me)
    moment_bounds = all(
        r["ok"] == "true" and float(r["margin"]) > 0 for r in mom
    )

    if cfg is None:
        cfg = ExperimentConfig.from_json((out / "config.json").read_text())
    summary = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash(cfg),
        "criteria": {
            "tv_monotone": tv_monotone,
            "bound_dominates": bound_dominates,
            "mean_equality": mean_equality,
            "tlln_decreasing": tlln_decreasing,
            "moment_bounds": moment_bounds,
        },
    }
    summary["pass"] = all(summary["criteria"].values())
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


RUNNERS = {
    "gl": run_gl,
    "rmf": run_rmf,
    "limit": run_limit,
    "phi": run_phi,
    "convergence": run_convergence,
    "stein": run_stein,
    "mgf": run_mgf,
}


def run_experiment(
    config_path: str | Path,
    subcommand: str,
    out: str | Path | None = None,
    seed: int | None = None,
    threads: int | None = None,
    force: bool = False,
):
    """Execute one subcommand; returns (out_dir, checks, manifest)."""
    cfg = ExperimentConfig.from_json(Path(config_path).read_text())
    if seed is not None:
        cfg = ExperimentConfig.from_json_dict(
            {**cfg.to_json_dict(), "seed": int(seed)}
        )
    if threads is not None:
        import numba

        numba.set_num_threads(
            min(max(1, int(threads)), numba.config.NUMBA_NUM_THREADS)
        )
    out_dir = prepare_out_dir(Path(out) if out is not None else Path(cfg.output_dir),
                              force)
    started = time.time()
    _write_config(out_dir, cfg)
    runner = RUNNERS[subcommand]
    checks = runner(cfg, out_dir)
    paths_total = cfg.paths * max(1, len(cfg.m_list) if subcommand in
                                  ("rmf", "convergence", "mgf") else 1)
    manifest = write_manifest(out_dir, cfg, started, paths_total)
    return out_dir, checks, manifest
