"""Report emission: figure-shaped CSVs plus static vector plots.

Three views are derived from a MetricsReport:

* variance reduction vs clustering granularity, per model, at the final
  checkpoint step;
* variance reduction vs checkpoint step, per model, at the reference
  granularity (the one closest to average size 50, ties toward smaller);
* purity per model, at the same reference granularity.

Plots are rendered from the CSV contents only, with a fixed SVG hash salt
and no embedded dates, so re-rendering the same data is byte-identical.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import MetricsReport

_REFERENCE_SIZE = 50.0
_SVG_SALT = "embcurate"


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def _reference_granularity(rows) -> float:
    grans = sorted({r.avg_size_or_eps for r in rows})
    return min(grans, key=lambda g: (abs(g - _REFERENCE_SIZE), g))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _models(rows) -> list[str]:
    return sorted({r.model for r in rows})


def vr_vs_granularity_rows(report: MetricsReport):
    """One row per (model, granularity) at the final checkpoint step."""
    last_step = max(r.step for r in report.rows)
    out = []
    for model in _models(report.rows):
        rows = [r for r in report.rows if r.model == model and r.step == last_step]
        for r in sorted(rows, key=lambda r: r.avg_size_or_eps):
            out.append([model, _fmt(r.avg_size_or_eps),
                        _fmt(r.variance_reduction), r.flag or ""])
    return out


def vr_vs_step_rows(report: MetricsReport):
    ref = _reference_granularity(report.rows)
    out = []
    for model in _models(report.rows):
        rows = [r for r in report.rows
                if r.model == model and r.avg_size_or_eps == ref]
        for r in sorted(rows, key=lambda r: r.step):
            out.append([model, r.step, _fmt(r.variance_reduction), r.flag or ""])
    return out


def purity_rows(report: MetricsReport):
    ref = _reference_granularity(report.rows)
    out = []
    for model in _models(report.rows):
        rows = [r for r in report.rows
                if r.model == model and r.avg_size_or_eps == ref
                and r.purity is not None]
        if rows:
            out.append([model, _fmt(rows[0].purity)])
    return out


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _plot_lines(rows, xlabel, ylabel, path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    by_model: dict[str, tuple[list, list]] = {}
    for model, xval, yval, flag in rows:
        if yval == "" or flag:
            continue  # degenerate cells are never plotted as values
        xs, ys = by_model.setdefault(str(model), ([], []))
        xs.append(float(xval))
        ys.append(float(yval))
    for model in sorted(by_model):
        xs, ys = by_model[model]
        ax.plot(xs, ys, marker="o", label=model)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if by_model:
        ax.legend()
    fig.tight_layout()
    _save(fig, path)


def _plot_purity(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    models = [str(r[0]) for r in rows]
    values = [float(r[1]) for r in rows]
    ax.bar(range(len(models)), values)
    ax.set_xticks(range(len(models)))
    ax.set_xticklabels(models, rotation=20, ha="right")
    ax.set_ylabel("cluster purity")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    _save(fig, path)


def emit_report(report: MetricsReport, out_dir) -> list[Path]:
    """Write the figure CSVs and their SVG renderings into out_dir."""
    if not report.rows:
        raise ValueError("empty metrics report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = _SVG_SALT

    written = []

    def emit(name, header, rows, plot):
        csv_path = out_dir / f"{name}.csv"
        _write_csv(csv_path, header, rows)
        written.append(csv_path)
        svg_path = out_dir / f"{name}.svg"
        plot(rows, svg_path)
        written.append(svg_path)

    emit(
        "vr_vs_size",
        ["model", "avg_size_or_eps", "variance_reduction", "flag"],
        vr_vs_granularity_rows(report),
        lambda rows, path: _plot_lines(rows, "average cluster size or epsilon",
                                       "variance reduction", path),
    )
    emit(
        "vr_vs_step",
        ["model", "step", "variance_reduction", "flag"],
        vr_vs_step_rows(report),
        lambda rows, path: _plot_lines(rows, "checkpoint step",
                                       "variance reduction", path),
    )
    purity = purity_rows(report)
    if purity:
        emit(
            "purity",
            ["model", "purity"],
            purity,
            lambda rows, path: _plot_purity(rows, path),
        )
    return written
