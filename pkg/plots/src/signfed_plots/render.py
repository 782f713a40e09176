"""Figure assembly from a sweep output directory.

Everything here works off the two files the simulator writes: the
manifest (manifest.yaml) and the trajectory CSVs it points at.  Nothing
is recomputed; the rate-constant overlay in the ratio panel comes
straight from the manifest entries.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # batch tool, must render without a display

import matplotlib.pyplot as plt
import numpy as np
import yaml

EXPECTED_HEADER = "n,err_x,err_y_mc,gamma,ratio,l1_obj"
PANEL_NAMES = ("error", "ratio")


class PlotError(Exception):
    """Input problem (manifest or CSV); the message names the file."""


@dataclass(frozen=True)
class PlotSpec:
    """What to render: which manifest, where to, which panels."""

    manifest: str
    output: str
    panels: tuple = PANEL_NAMES
    log_x: bool = True
    log_y: bool = True

    def __post_init__(self):
        panels = tuple(self.panels)
        if not panels:
            raise ValueError("at least one panel required")
        bad = [p for p in panels if p not in PANEL_NAMES]
        if bad:
            raise ValueError(
                f"unknown panel(s) {', '.join(bad)}; choose from {', '.join(PANEL_NAMES)}")
        if len(set(panels)) != len(panels):
            raise ValueError("duplicate panel selection")
        object.__setattr__(self, "panels", panels)


@dataclass(frozen=True)
class RunCurve:
    """One trajectory: the plotted columns plus its manifest metadata."""

    label: str
    seed: int
    m: int
    rate_constant: float | None
    ns: np.ndarray
    err_x: np.ndarray
    ratio: np.ndarray  # NaN where the CSV left the cell empty


@dataclass(frozen=True)
class SweepData:
    kind: str
    curves: list = field(default_factory=list)


def _read_trajectory(path: Path, header: str):
    """Columns (n, err_x, ratio) of one CSV, validated field by field."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError:
        raise PlotError(f"missing CSV: {path}")
    if not rows or ",".join(rows[0]) != header:
        raise PlotError(f"unexpected CSV header in {path}")
    ns, errs, ratios = [], [], []
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != len(header.split(",")):
            raise PlotError(f"malformed CSV row {k} in {path}")
        try:
            ns.append(int(row[0]))
            errs.append(float(row[1]))
            float(row[2]), float(row[3]), float(row[5])
            ratios.append(float(row[4]) if row[4] != "" else math.nan)
        except ValueError:
            raise PlotError(f"malformed CSV row {k} in {path}")
    if not ns:
        raise PlotError(f"no data rows in {path}")
    return np.asarray(ns), np.asarray(errs), np.asarray(ratios)


def load_sweep(manifest_path) -> SweepData:
    """Parse the manifest and every CSV it references.

    CSV paths in the manifest are relative to the manifest's directory.
    Raises PlotError naming the offending file on any problem.
    """
    path = Path(manifest_path)
    try:
        text = path.read_text()
    except OSError:
        raise PlotError(f"missing manifest: {path}")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise PlotError(f"unreadable manifest {path}: {exc}")
    if not isinstance(doc, dict) or not isinstance(doc.get("runs"), list):
        raise PlotError(f"malformed manifest: {path}")
    if not doc["runs"]:
        raise PlotError(f"manifest lists no runs: {path}")
    header = doc.get("csv_header", EXPECTED_HEADER)

    curves = []
    for entry in doc["runs"]:
        if not isinstance(entry, dict) or not isinstance(entry.get("path"), str):
            raise PlotError(f"malformed run entry in manifest: {path}")
        try:
            seed = int(entry["seed"])
            m = int(entry["m"])
            rate = entry.get("rate_constant")
            rate = None if rate is None else float(rate)
            label = str(entry.get("label", entry["path"]))
        except (KeyError, TypeError, ValueError):
            raise PlotError(f"malformed run entry in manifest: {path}")
        ns, errs, ratios = _read_trajectory(path.parent / entry["path"], header)
        curves.append(RunCurve(label=label, seed=seed, m=m,
                               rate_constant=rate, ns=ns, err_x=errs,
                               ratio=ratios))
    return SweepData(kind=str(doc.get("kind", "run")), curves=curves)


def _group_colors(curves):
    return {m: f"C{k}" for k, m in enumerate(sorted({c.m for c in curves}))}


def _panel_error(ax, data, colors, spec):
    labeled = set()
    for c in data.curves:
        mask = c.ns > 0 if spec.log_x else np.ones(c.ns.shape, dtype=bool)
        label = f"|M| = {c.m}" if c.m not in labeled else "_nolegend_"
        labeled.add(c.m)
        ax.plot(c.ns[mask], c.err_x[mask], color=colors[c.m],
                alpha=0.75, lw=1.1, label=label)
    if spec.log_x:
        ax.set_xscale("log")
    if spec.log_y:
        ax.set_yscale("log")
    ax.set_xlabel("iteration n")
    ax.set_ylabel("estimate error")
    ax.set_title("error per seed")
    ax.legend(title="adversaries")


def _panel_ratio(ax, data, colors, spec):
    labeled = set()
    for c in data.curves:
        mask = np.isfinite(c.ratio)
        if spec.log_x:
            mask &= c.ns > 0
        label = f"|M| = {c.m}" if c.m not in labeled else "_nolegend_"
        labeled.add(c.m)
        ax.plot(c.ns[mask], c.ratio[mask], color=colors[c.m],
                alpha=0.6, lw=1.0, label=label)
    # overlay the envelope constant recorded for each group; the sweep
    # writes it as the sup of error/gamma over the measured tail
    for m in sorted({c.m for c in data.curves}):
        rates = [c.rate_constant for c in data.curves
                 if c.m == m and c.rate_constant is not None]
        if rates:
            ax.axhline(max(rates), color=colors[m], ls="--", lw=1.4,
                       label=f"rate constant, |M| = {m}")
    if spec.log_x:
        ax.set_xscale("log")
    if spec.log_y:
        ax.set_yscale("log")
    ax.set_xlabel("iteration n")
    ax.set_ylabel("error / gamma")
    ax.set_title("rate diagnostic")
    ax.legend()


_PANELS = {"error": _panel_error, "ratio": _panel_ratio}


def compose(data: SweepData, spec: PlotSpec):
    """Build the matplotlib Figure (the caller owns closing it)."""
    k = len(spec.panels)
    fig, axes = plt.subplots(1, k, figsize=(5.8 * k, 4.4))
    axes = [axes] if k == 1 else list(axes)
    colors = _group_colors(data.curves)
    for name, ax in zip(spec.panels, axes):
        _PANELS[name](ax, data, colors, spec)
    fig.tight_layout()
    return fig


def render(spec: PlotSpec) -> Path:
    """Load, compose, and write the image; returns the output path."""
    data = load_sweep(spec.manifest)
    fig = compose(data, spec)
    out = Path(spec.output)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.savefig(out, dpi=130)
    finally:
        plt.close(fig)
    return out
