"""Tidy CSV exports of run results, each with a companion PNG figure."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import UnknownKind
from .io import read_json, write_csv

KINDS = ("spectrum", "sweep", "convergence", "refinement")

plt.rcParams.update({
    "figure.figsize": (4.5, 3.2),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
})

# PNG text chunks default to the matplotlib version; drop them so files hash stably
_PNG_META = {"Software": None}


def _table(kind, report):
    if kind == "spectrum":
        sig = report.get("singular_values") or report["spectrum"]
        return ["index", "sigma"], [(i, float(s)) for i, s in enumerate(sig)]
    if kind == "sweep":
        return (["amplitude", "data_norm", "sol_norm"],
                [(r["amplitude"], r["data_norm"], r["sol_norm"]) for r in report["rows"]])
    if kind == "convergence":
        return (["iteration", "misfit", "update", "step"],
                [(h["iteration"], h["misfit"], h["update"], h["step"]) for h in report["history"]])
    if kind == "refinement":
        return (["nodes_per_axis", "h", "error"],
                [(r["nodes_per_axis"], r["h"], r["error"]) for r in report["refinement"]])
    raise UnknownKind(f"unknown export kind {kind!r}; expected one of {', '.join(KINDS)}")


def _figure(kind, header, rows, path):
    cols = list(zip(*rows)) if rows else [[] for _ in header]
    fig, ax = plt.subplots()
    if kind == "spectrum":
        ax.semilogy(cols[0], [abs(s) for s in cols[1]], "o-", ms=3)
        ax.set_xlabel("index")
        ax.set_ylabel(r"$|\sigma|$")
    elif kind == "sweep":
        ax.loglog(cols[1], cols[2], "o-")
        ax.set_xlabel("data norm")
        ax.set_ylabel(r"$\|\alpha - 1\|_{L^2(M)}$")
    elif kind == "convergence":
        ax.semilogy(cols[0], cols[1], "o-", label="misfit")
        ax.semilogy(cols[0], [max(u, 1e-300) for u in cols[2]], "s--", label="update")
        ax.set_xlabel("iteration")
        ax.legend(frameon=False)
    else:
        ax.loglog(cols[1], cols[2], "o-")
        ax.set_xlabel("h")
        ax.set_ylabel("sup error")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def export_plot_data(result_path, kind, out_dir=None):
    """Write ``<kind>.csv`` and ``<kind>.png`` from a JSON result; returns both paths."""
    if kind not in KINDS:
        raise UnknownKind(f"unknown export kind {kind!r}; expected one of {', '.join(KINDS)}")
    report = read_json(result_path)
    header, rows = _table(kind, report)
    out_dir = out_dir or os.path.dirname(os.path.abspath(result_path))
    csv_path = os.path.join(out_dir, f"{kind}.csv")
    png_path = os.path.join(out_dir, f"{kind}.png")
    write_csv(csv_path, header, rows)
    _figure(kind, header, rows, png_path)
    return csv_path, png_path
