"""Persistence of experiment results: CSV tables, JSON manifest, SVG charts.

``results.csv`` is fully determined by (config, master seed): floats are
serialized with ``repr`` (shortest round-trip form) and wall-clock times go
to the manifest only, so two runs with the same seed produce byte-identical
result files.
"""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .experiment import ResultRecord

RESULTS_COLUMNS = [
    "problem", "method", "n_train_structures", "hidden", "shots",
    "nmse_mean", "nmse_std", "n_structures", "n_failed",
]

# Chart geometry shared by the writer and the parsing oracle in the tests.
CHART = dict(width=760, height=420, margin_left=70, margin_right=20,
             margin_top=46, margin_bottom=50)

SERIES_COLORS = ["#4878cf", "#ee854a", "#6acc65", "#d65f5f",
                 "#956cb4", "#8c613c", "#dc7ec0", "#797979"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _record_sort_key(rec: ResultRecord):
    return (rec.problem, rec.n_train_structures, rec.method, rec.shots)


def write_results_csv(records, path):
    records = sorted(records, key=_record_sort_key)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_COLUMNS)
        for r in records:
            writer.writerow([
                r.problem, r.method, r.n_train_structures, _fmt(r.hidden), r.shots,
                _fmt(r.nmse_mean), _fmt(r.nmse_std),
                len(r.per_structure_nmse), r.n_failed,
            ])
    return path


def read_results_csv(path):
    """Rebuild summary records (per-structure values live in their own file)."""
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(ResultRecord(
                problem=row["problem"],
                method=row["method"],
                n_train_structures=int(row["n_train_structures"]),
                hidden=int(row["hidden"]) if row["hidden"] else None,
                shots=int(row["shots"]),
                nmse_mean=float(row["nmse_mean"]),
                nmse_std=float(row["nmse_std"]),
                per_structure_nmse=[],
                wall_time=0.0,
                n_failed=int(row["n_failed"]),
            ))
    return records


def write_per_structure_csv(records, path, structure_ids=None):
    records = sorted(records, key=_record_sort_key)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["problem", "method", "n_train_structures", "hidden",
                         "shots", "structure_index", "structure_id", "nmse"])
        for r in records:
            for i, v in enumerate(r.per_structure_nmse):
                sid = structure_ids[i] if structure_ids else ""
                writer.writerow([r.problem, r.method, r.n_train_structures,
                                 _fmt(r.hidden), r.shots, i, sid, _fmt(v)])
    return path


def _nice_ceiling(x: float) -> float:
    """Smallest 1/2/5 * 10^k value >= x."""
    if not np.isfinite(x) or x <= 0:
        return 1.0
    exp = np.floor(np.log10(x))
    for mult in (1.0, 2.0, 5.0, 10.0):
        cand = mult * 10.0**exp
        if cand >= x * (1 - 1e-12):
            return float(cand)
    return float(10.0 ** (exp + 1))


@dataclass
class ChartSeries:
    label: str
    means: list
    stds: list


def grouped_bar_svg(title, group_labels, series, ylabel="NMSE [%]",
                    xlabel="available shots") -> str:
    """Grouped bar chart with one bar group per x label and +-1 std whiskers.

    Bars carry ``data-value``/``data-std`` attributes and the plot area
    carries ``data-ymax``, so the geometry (height = value / ymax *
    plot_height) can be verified by parsing the file.
    """
    g = CHART
    pw = g["width"] - g["margin_left"] - g["margin_right"]
    ph = g["height"] - g["margin_top"] - g["margin_bottom"]
    finite = [m + s for sr in series for m, s in zip(sr.means, sr.stds)
              if np.isfinite(m) and np.isfinite(s)]
    ymax = _nice_ceiling(max(finite) if finite else 1.0)

    def sx(v):
        return g["margin_left"] + v

    def sy(v):
        return g["margin_top"] + ph - v

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{g["width"]}" '
        f'height="{g["height"]}" viewBox="0 0 {g["width"]} {g["height"]}" '
        f'font-family="Helvetica,Arial,sans-serif" font-size="11">',
        f'<text x="{g["width"] / 2}" y="18" text-anchor="middle" '
        f'font-size="14">{title}</text>',
        f'<rect class="plot-area" x="{sx(0)}" y="{g["margin_top"]}" width="{pw}" '
        f'height="{ph}" fill="none" stroke="#444" data-ymax="{ymax!r}"/>',
    ]
    # y grid and tick labels
    for frac in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0):
        yv = ymax * frac
        ypix = sy(frac * ph)
        if frac > 0:
            parts.append(f'<line x1="{sx(0)}" y1="{ypix}" x2="{sx(pw)}" y2="{ypix}" '
                         f'stroke="#ddd" stroke-width="1"/>')
        parts.append(f'<text x="{sx(0) - 6}" y="{ypix + 4}" text-anchor="end">'
                     f'{yv:g}</text>')
    parts.append(
        f'<text x="14" y="{g["margin_top"] + ph / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {g["margin_top"] + ph / 2})">{ylabel}</text>'
    )
    parts.append(
        f'<text x="{sx(pw / 2)}" y="{g["height"] - 12}" text-anchor="middle">'
        f'{xlabel}</text>'
    )

    n_groups = len(group_labels)
    n_series = max(1, len(series))
    group_w = pw / max(1, n_groups)
    bar_w = 0.8 * group_w / n_series
    for gi, glabel in enumerate(group_labels):
        x0 = sx(gi * group_w + 0.1 * group_w)
        parts.append(f'<text x="{sx(gi * group_w + group_w / 2)}" '
                     f'y="{g["margin_top"] + ph + 16}" text-anchor="middle">'
                     f'{glabel}</text>')
        for si, sr in enumerate(series):
            mean, std = sr.means[gi], sr.stds[gi]
            color = SERIES_COLORS[si % len(SERIES_COLORS)]
            x = x0 + si * bar_w
            if not np.isfinite(mean):
                parts.append(f'<rect class="bar" x="{x}" y="{sy(0)}" width="{bar_w}" '
                             f'height="0" fill="{color}" data-series="{sr.label}" '
                             f'data-shots="{glabel}" data-value="nan" data-std="nan"/>')
                continue
            hpix = mean / ymax * ph
            parts.append(
                f'<rect class="bar" x="{x}" y="{sy(hpix)}" width="{bar_w}" '
                f'height="{hpix!r}" fill="{color}" data-series="{sr.label}" '
                f'data-shots="{glabel}" data-value="{mean!r}" data-std="{std!r}"/>'
            )
            if np.isfinite(std) and std > 0:
                lo = max(0.0, (mean - std)) / ymax * ph
                hi = min(ymax, mean + std) / ymax * ph
                xc = x + bar_w / 2
                parts.append(f'<line class="whisker" x1="{xc}" y1="{sy(lo)}" '
                             f'x2="{xc}" y2="{sy(hi)}" stroke="#222"/>')
    # legend
    for si, sr in enumerate(series):
        lx = sx(8 + si * 110)
        color = SERIES_COLORS[si % len(SERIES_COLORS)]
        parts.append(f'<rect x="{lx}" y="{g["margin_top"] - 16}" width="10" '
                     f'height="10" fill="{color}"/>')
        parts.append(f'<text x="{lx + 14}" y="{g["margin_top"] - 7}">{sr.label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def charts_for_records(records):
    """One grouped-bar chart per (problem, method): NMSE vs shots, one bar
    series per training-population size."""
    charts = {}
    keys = sorted({(r.problem, r.method) for r in records})
    for problem, method in keys:
        sub = [r for r in records if r.problem == problem and r.method == method]
        shots = sorted({r.shots for r in sub})
        sizes = sorted({r.n_train_structures for r in sub})
        series = []
        for n in sizes:
            by_shots = {r.shots: r for r in sub if r.n_train_structures == n}
            series.append(ChartSeries(
                label=f"{n} training structures",
                means=[by_shots[s].nmse_mean if s in by_shots else float("nan")
                       for s in shots],
                stds=[by_shots[s].nmse_std if s in by_shots else float("nan")
                      for s in shots],
            ))
        title = f"{problem} - {method.upper()} few-shot NMSE"
        charts[f"{problem}_{method}.svg"] = grouped_bar_svg(title, shots, series)
    return charts


def emit_outputs(records, destination, *, manifest_extra=None, checkpoints=None,
                 structure_ids=None):
    """Write results.csv, per_structure.csv, manifest.json, figures/, checkpoints/."""
    if not records:
        raise ValueError("no records to emit")
    os.makedirs(destination, exist_ok=True)
    fig_dir = os.path.join(destination, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    written = []

    written.append(write_results_csv(records, os.path.join(destination, "results.csv")))
    written.append(write_per_structure_csv(
        records, os.path.join(destination, "per_structure.csv"), structure_ids))

    for name, svg in charts_for_records(records).items():
        path = os.path.join(fig_dir, name)
        with open(path, "w") as fh:
            fh.write(svg)
        written.append(path)

    if checkpoints:
        ck_dir = os.path.join(destination, "checkpoints")
        os.makedirs(ck_dir, exist_ok=True)
        for name, payload in checkpoints.items():
            path = os.path.join(ck_dir, name)
            with open(path, "w") as fh:
                json.dump(payload, fh)
            written.append(path)

    manifest = {
        "files": [os.path.relpath(p, destination) for p in written],
        "error_bars": "mean +- one standard deviation across testing structures",
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    manifest_path = os.path.join(destination, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
    written.append(manifest_path)
    return written
