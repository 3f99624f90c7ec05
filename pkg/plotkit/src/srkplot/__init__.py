"""Convergence-history figures for solver CSV output."""

from .figures import FigureSpec, load_histories, render, svg_structure

__version__ = "0.1.0"
