"""Render convergence figures from the simulator's delimited outputs.

These scripts never recompute statistics: they draw exactly what the CSV
files contain (the one sanctioned exception is the least-squares slope
annotation on the log-log error figure, which is part of the figure itself).
Rendering is deterministic — fixed style, fixed DPI, no timestamps and no
writer metadata — so identical inputs give byte-identical images.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

KINDS = ("tv_vs_M", "tlln_loglog", "means_overlay", "contraction")

STYLE = {
    "figure.figsize": (6.4, 4.2),
    "figure.dpi": 150,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
}


class PlotError(Exception):
    pass


class MissingColumn(PlotError):
    pass


class EmptyInput(PlotError):
    pass


@dataclass(frozen=True)
class FigureSpec:
    kind: str
    inputs: tuple[Path, ...]
    output: Path

    @staticmethod
    def make(kind: str, inputs, output) -> "FigureSpec":
        if kind not in KINDS:
            raise PlotError(f"unknown figure kind {kind!r}; choose from {KINDS}")
        return FigureSpec(kind, tuple(Path(p) for p in inputs), Path(output))


def _load(path: Path, required: tuple[str, ...]) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise EmptyInput(f"{path} holds no data rows")
    missing = [c for c in required if c not in rows[0]]
    if missing:
        raise MissingColumn(f"{path} lacks columns {missing}")
    return rows


def _config_hash(inputs: tuple[Path, ...]) -> str:
    """Config hash from the manifest beside the inputs; hash of the inputs
    themselves when no manifest is present (standalone CSVs)."""
    manifest = inputs[0].parent / "manifest.json"
    if manifest.exists():
        return json.loads(manifest.read_text())["config_hash"]
    h = hashlib.sha256()
    for p in inputs:
        h.update(p.read_bytes())
    return "inputs-" + h.hexdigest()


def _save(fig, spec: FigureSpec, caption: str) -> tuple[Path, Path]:
    spec.output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(spec.output, format="png", metadata={"Software": None})
    plt.close(fig)
    caption_path = spec.output.with_suffix(".txt")
    caption_path.write_text(caption + "\n")
    return spec.output, caption_path


def _tv_vs_m(spec: FigureSpec):
    rows = _load(spec.inputs[0], ("M", "target_neuron", "source_neuron",
                                  "tv", "bound"))
    use_pooled = "tv_pooled" in rows[0]
    channels: dict = {}
    for r in rows:
        key = (r["source_neuron"], r["target_neuron"])
        channels.setdefault(key, []).append(r)
    fig, ax = plt.subplots()
    for (src, tgt), ch in sorted(channels.items()):
        ch.sort(key=lambda r: int(r["M"]))
        ms = [int(r["M"]) for r in ch]
        tv = [float(r["tv_pooled" if use_pooled else "tv"]) for r in ch]
        bound = [float(r["bound"]) for r in ch]
        line, = ax.plot(ms, tv, marker="o", label=f"TV {src}→{tgt}")
        ax.plot(ms, bound, linestyle="--", color=line.get_color(),
                label=f"bound {src}→{tgt}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("replica count M")
    ax.set_ylabel("total variation distance")
    ax.set_title("Per-channel Poisson approximation vs replica count")
    ax.legend(fontsize=8)
    caption = (
        f"tv_vs_M: per-channel TV ({'pooled' if use_pooled else 'plug-in'}) "
        f"with the Chen-Stein bound overlaid (dashed); "
        f"config {_config_hash(spec.inputs)}"
    )
    return fig, caption


def _tlln_loglog(spec: FigureSpec):
    rows = _load(spec.inputs[0], ("M", "error"))
    groups: dict = {}
    for r in rows:
        groups.setdefault(r.get("neuron", "1"), []).append(r)
    fig, ax = plt.subplots()
    slopes = []
    for neuron, ch in sorted(groups.items()):
        ch.sort(key=lambda r: int(r["M"]))
        ms = np.array([int(r["M"]) for r in ch], dtype=float)
        errs = np.array([float(r["error"]) for r in ch])
        if len(ms) < 2:
            raise EmptyInput("need at least two replica counts for a slope")
        slope = float(np.polyfit(np.log(ms), np.log(errs), 1)[0])
        slopes.append(slope)
        ax.loglog(ms, errs, marker="o", label=f"neuron {neuron}")
        if "se" in ch[0]:
            se = np.array([float(r["se"]) for r in ch])
            ax.fill_between(ms, errs - 3 * se, errs + 3 * se, alpha=0.2)
    slope = float(np.mean(slopes))
    ax.set_xlabel("replica count M")
    ax.set_ylabel("scaled centered replica-sum error")
    ax.set_title("Replica law of large numbers")
    ax.annotate(f"fitted slope = {slope:.3f}", xy=(0.05, 0.08),
                xycoords="axes fraction")
    ax.legend(fontsize=8)
    caption = (
        f"tlln_loglog: L1 error of the scaled centered replica sum vs M; "
        f"fitted slope = {slope:.3f}; config {_config_hash(spec.inputs)}"
    )
    return fig, caption


def _means_overlay(spec: FigureSpec):
    rows = _load(spec.inputs[0], ("t", "neuron", "mean", "se"))
    fig, ax = plt.subplots()
    neurons: dict = {}
    for r in rows:
        neurons.setdefault(r["neuron"], []).append(r)
    for neuron, ch in sorted(neurons.items()):
        ch.sort(key=lambda r: float(r["t"]))
        t = np.array([float(r["t"]) for r in ch])
        mean = np.array([float(r["mean"]) for r in ch])
        se = np.array([float(r["se"]) for r in ch])
        line, = ax.plot(t, mean, label=f"limit mean, neuron {neuron}")
        ax.fill_between(t, mean - 3 * se, mean + 3 * se, alpha=0.25,
                        color=line.get_color())
    if len(spec.inputs) > 1:
        overlay = _load(spec.inputs[1], ("M", "t", "neuron", "rmf_mean"))
        markers = {"2": "s", "5": "^", "20": "v", "80": "x"}
        by_m: dict = {}
        for r in overlay:
            by_m.setdefault((r["M"], r["neuron"]), []).append(r)
        for (m, neuron), ch in sorted(by_m.items(), key=lambda kv: int(kv[0][0])):
            ch.sort(key=lambda r: float(r["t"]))
            t = [float(r["t"]) for r in ch]
            mean = [float(r["rmf_mean"]) for r in ch]
            ax.plot(t, mean, linestyle="none", markersize=3.5,
                    marker=markers.get(m, "."), label=f"M={m}, neuron {neuron}")
    ax.set_xlabel("t")
    ax.set_ylabel("mean intensity")
    ax.set_title("Solved limit means (3-sigma bands) and replica-system means")
    ax.legend(fontsize=7, ncol=2)
    caption = (
        f"means_overlay: solved mean-intensity curves with 3-sigma bands"
        f"{' and replica-system means overlaid' if len(spec.inputs) > 1 else ''}; "
        f"config {_config_hash(spec.inputs)}"
    )
    return fig, caption


def _contraction(spec: FigureSpec):
    rows = _load(spec.inputs[0], ("l", "d_l", "se"))
    rows.sort(key=lambda r: int(r["l"]))
    ls = np.array([int(r["l"]) for r in rows])
    d = np.array([float(r["d_l"]) for r in rows])
    se = np.array([float(r["se"]) for r in rows])
    fig, ax = plt.subplots()
    positive = d > 0
    ax.errorbar(ls[positive], d[positive], yerr=3 * se[positive], marker="o")
    ax.set_yscale("log")
    ax.set_xticks(ls)
    ax.set_xlabel("iterate l")
    ax.set_ylabel("mean sup-distance between successive iterates")
    ax.set_title("Contraction of the input-driven mapping")
    caption = (
        f"contraction: pathwise sup-distance between successive coupled "
        f"iterates (3-sigma bars, log scale); config {_config_hash(spec.inputs)}"
    )
    return fig, caption


_RENDERERS = {
    "tv_vs_M": _tv_vs_m,
    "tlln_loglog": _tlln_loglog,
    "means_overlay": _means_overlay,
    "contraction": _contraction,
}


def render(spec: FigureSpec) -> tuple[Path, Path]:
    """Render one figure; returns (image path, caption path)."""
    if not spec.inputs:
        raise EmptyInput("no input files given")
    for p in spec.inputs:
        if not Path(p).exists():
            raise EmptyInput(f"input {p} does not exist")
    with plt.rc_context(STYLE):
        fig, caption = _RENDERERS[spec.kind](spec)
        return _save(fig, spec, caption)
