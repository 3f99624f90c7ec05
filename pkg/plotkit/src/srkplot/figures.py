"""Render solver convergence histories into publication-style figures.

Input is the fixed history schema ``method,rhs_index,mv_count,
true_resnorm,marker``: one curve per (method, rhs_index) series, residuals
normalized by the series' first record, log scale on the vertical axis,
stars where the history carries capture or block markers.  Rendering is
deterministic for a fixed toolkit version (hashed ids are salted, no
timestamps), so artifacts can be diffed structurally.
"""

from __future__ import annotations

import csv
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

__all__ = ["FigureSpec", "load_histories", "render", "svg_structure"]

CSV_HEADER = ["method", "rhs_index", "mv_count", "true_resnorm", "marker"]

# first solves blue, recycled solves red, references green
_SOURCE_PREFIXES = ("idr(", "bicg(", "z-lanczos")
_REFERENCE_PREFIXES = ("cg", "minres", "rgcr")
_MARKER_STYLES = {"capture": "*", "block_boundary": "*", "breakdown": "x"}


@dataclass
class FigureSpec:
    """What to draw: inputs, labels and the output artifact."""

    csv_paths: list
    out: str
    title: str = ""
    styles: dict = field(default_factory=dict)  # method prefix -> color override
    xlabel: str = "operator products"
    ylabel: str = "relative true residual"


def series_color(method: str, styles: dict | None = None) -> str:
    if styles:
        for prefix, color in styles.items():
            if method.startswith(prefix):
                return color
    if method.startswith(_SOURCE_PREFIXES):
        return "tab:blue"
    if method.startswith(_REFERENCE_PREFIXES):
        return "tab:green"
    return "tab:red"


def load_histories(csv_paths) -> dict:
    """Read one or more history files into ordered per-series records."""
    series: dict[tuple[str, int], list[tuple[int, float, str]]] = {}
    for path in csv_paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != CSV_HEADER:
                raise ValueError(
                    f"{path}: expected header {CSV_HEADER}, got {reader.fieldnames}"
                )
            for row in reader:
                key = (row["method"], int(row["rhs_index"]))
                series.setdefault(key, []).append(
                    (
                        int(row["mv_count"]),
                        float(row["true_resnorm"]),
                        row["marker"],
                    )
                )
    for rows in series.values():
        rows.sort(key=lambda r: r[0])
    if not series:
        raise ValueError("no series found in the input")
    return series


def render(spec: FigureSpec) -> str:
    """Draw the figure and write it to ``spec.out`` (SVG or PNG).

    Every series is normalized by its first recorded residual; rows whose
    residual is not finite (breakdown records) only contribute markers.
    Returns the output path.
    """
    series = load_histories(spec.csv_paths)
    with plt.rc_context({"svg.hashsalt": "srkplot", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7.0, 4.5))
        marker_count = 0
        for (method, rhs_index), rows in sorted(series.items()):
            finite = [(mv, res) for mv, res, _ in rows if res == res and res > 0]
            if not finite:
                continue
            base = finite[0][1]
            xs = [mv for mv, _ in finite]
            ys = [res / base for _, res in finite]
            color = series_color(method, spec.styles)
            (line,) = ax.plot(
                xs, ys, color=color, linewidth=1.2,
                label=f"{method} #{rhs_index}",
            )
            line.set_gid(f"series::{method}::{rhs_index}")
            for style_key, style_marker in _MARKER_STYLES.items():
                marked = [
                    (mv, res / base)
                    for mv, res, marker in rows
                    if marker == style_key and res == res and res > 0
                ]
                if not marked:
                    continue
                pts = ax.plot(
                    [m for m, _ in marked],
                    [r for _, r in marked],
                    linestyle="none",
                    marker=style_marker,
                    markersize=11,
                    color=color,
                    markeredgecolor="black",
                )[0]
                pts.set_gid(f"markers::{style_key}::{method}::{rhs_index}")
                marker_count += len(marked)
        ax.set_yscale("log")
        ax.set_xlabel(spec.xlabel)
        ax.set_ylabel(spec.ylabel)
        if spec.title:
            ax.set_title(spec.title)
        ax.grid(True, which="both", alpha=0.25)
        ax.legend(loc="best", fontsize=8)
        out = Path(spec.out)
        if out.parent and not out.parent.exists():
            out.parent.mkdir(parents=True, exist_ok=True)
        metadata = {"Date": None} if out.suffix.lower() == ".svg" else None
        fig.savefig(out, metadata=metadata)
        plt.close(fig)
    return str(out)


def svg_structure(path) -> dict:
    """Structural summary of a rendered SVG for golden comparisons.

    Counts the labeled series and marker groups and records the axis
    scale indirectly through the tick labels, which is stable across
    toolkit patch versions while pixel output is not.
    """
    root = ET.parse(path).getroot()
    ns = {"svg": "http://www.w3.org/2000/svg"}
    series = []
    markers = {}
    for g in root.iter("{http://www.w3.org/2000/svg}g"):
        gid = g.get("id", "")
        if gid.startswith("series::"):
            _, method, rhs = gid.split("::")
            series.append(f"{method}#{rhs}")
        elif gid.startswith("markers::"):
            kind = gid.split("::")[1]
            markers[kind] = markers.get(kind, 0) + 1
    import re

    texts = [
        re.sub(r"\s+", "", "".join(t.itertext()))
        for t in root.iter("{http://www.w3.org/2000/svg}text")
    ]
    # log tick labels are powers of ten with negative exponents; linear
    # ticks never produce the "10-k" shape
    log_axis = any(re.fullmatch(r"10[−-]\d+", t) for t in texts)
    return {
        "series": sorted(series),
        "marker_groups": markers,
        "log_axis": bool(log_axis),
        "n_series": len(series),
    }


def write_structure(svg_path, json_path) -> dict:
    structure = svg_structure(svg_path)
    Path(json_path).write_text(json.dumps(structure, indent=2, sort_keys=True))
    return structure
