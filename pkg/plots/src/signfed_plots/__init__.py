"""Batch figure rendering for simulator sweep output (CSV + manifest)."""

from .render import (PlotError, PlotSpec, RunCurve, SweepData, compose,
                     load_sweep, render)

__all__ = ["PlotError", "PlotSpec", "RunCurve", "SweepData", "compose",
           "load_sweep", "render"]
