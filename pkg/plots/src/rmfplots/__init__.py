"""Offline figure rendering for rmfsim convergence reports."""

__version__ = "0.1.0"

from .figures import FigureSpec, render, EmptyInput, MissingColumn, PlotError

__all__ = ["FigureSpec", "render", "EmptyInput", "MissingColumn", "PlotError",
           "__version__"]
