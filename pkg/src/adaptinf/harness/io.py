"""CSV writers and readers for experiment outputs.

Floats are written with ``repr`` so a re-read reproduces them exactly and
re-runs produce byte-identical files. Row order follows the configuration
(method, then checkpoint, then contrast); replication rows follow index order.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

from ..errors import IngestionError
from .experiment import ContrastRow, CoverageRow, CoverageTable, ReplicationRow, WidthRow

COVERAGE_COLUMNS = ("method", "policy", "scenario", "checkpoint_T", "alpha", "coverage", "mc_se", "n_reps",
                    "flagged")
WIDTH_COLUMNS = ("method", "policy", "scenario", "checkpoint_T", "contrast_index", "mean_width", "sd_width")
PLOT_COLUMNS = ("method", "policy", "scenario", "checkpoint_T", "metric", "contrast_index", "value", "mc_se",
                "n_reps")
REPLICATION_COLUMNS = ("rep", "method", "checkpoint_T", "covered", "singular", "residual", "n_identity_blocks",
                       "theta_hat", "widths", "contrast_covered", "error")

FILES = {"coverage": "coverage.csv", "widths": "widths.csv", "plotdata": "plotdata.csv",
         "replications": "replications.csv"}


def fmt_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _fmt_flag(b) -> str:
    return "" if b is None else ("1" if b else "0")


def _parse_flag(s: str):
    return None if s == "" else s == "1"


def _join(vals, f) -> str:
    return ";".join(f(v) for v in vals)


def _split(s: str, f) -> tuple:
    return tuple(f(v) for v in s.split(";")) if s else ()


def _write(path: Path, columns, rows):
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None


def _read(path: Path, columns):
    if not path.is_file():
        raise IngestionError(f"missing results file {path}")
    with path.open(newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r, ()))
        if header != tuple(columns):
            raise IngestionError(f"{path}: unexpected header {header}")
        return [dict(zip(columns, rec)) for rec in r]


def coverage_records(table: CoverageTable):
    for c in table.coverage:
        yield (c.method, c.policy, c.scenario, c.checkpoint, fmt_float(c.alpha), fmt_float(c.coverage),
               fmt_float(c.mc_se), c.n_reps, c.flagged)


def width_records(table: CoverageTable):
    for w in table.widths:
        yield (w.method, w.policy, w.scenario, w.checkpoint, w.contrast_index, fmt_float(w.mean_width),
               fmt_float(w.sd_width))


def plot_records(table: CoverageTable):
    """Long format: region coverage, then per-contrast coverage and mean width."""
    for c in table.coverage:
        yield (c.method, c.policy, c.scenario, c.checkpoint, "coverage", "", fmt_float(c.coverage),
               fmt_float(c.mc_se), c.n_reps)
    for c in table.contrasts:
        yield (c.method, c.policy, c.scenario, c.checkpoint, "contrast_coverage", c.contrast_index,
               fmt_float(c.coverage), fmt_float(c.mc_se), c.n_reps)
    for w in table.widths:
        yield (w.method, w.policy, w.scenario, w.checkpoint, "mean_width", w.contrast_index,
               fmt_float(w.mean_width), "", "")


def replication_records(rows):
    for r in rows:
        yield (r.rep, r.method, r.checkpoint, _fmt_flag(r.covered), _fmt_flag(r.singular), fmt_float(r.residual),
               r.n_identity_blocks, _join(r.theta_hat, fmt_float), _join(r.widths, fmt_float),
               _join(r.contrast_covered, _fmt_flag), r.error)


def write_table(table: CoverageTable, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in FILES.items() if k != "replications"}
    _write(paths["coverage"], COVERAGE_COLUMNS, coverage_records(table))
    _write(paths["widths"], WIDTH_COLUMNS, width_records(table))
    _write(paths["plotdata"], PLOT_COLUMNS, plot_records(table))
    return paths


def write_results(table: CoverageTable, rows, out_dir) -> dict[str, Path]:
    """Write all four CSV files into ``out_dir`` and return their paths."""
    paths = write_table(table, out_dir)
    paths["replications"] = Path(out_dir) / FILES["replications"]
    _write(paths["replications"], REPLICATION_COLUMNS, replication_records(rows))
    return paths


def read_replications(out_dir) -> list[ReplicationRow]:
    recs = _read(Path(out_dir) / FILES["replications"], REPLICATION_COLUMNS)
    return [ReplicationRow(
        int(r["rep"]), r["method"], int(r["checkpoint_T"]), _parse_flag(r["covered"]),
        _split(r["theta_hat"], float), _split(r["widths"], float), _split(r["contrast_covered"], _parse_flag),
        float(r["residual"]), bool(_parse_flag(r["singular"])), int(r["n_identity_blocks"]), r["error"],
    ) for r in recs]


def read_table(out_dir) -> CoverageTable:
    """Inverse of :func:`write_table`."""
    out = Path(out_dir)
    table = CoverageTable()
    for r in _read(out / FILES["coverage"], COVERAGE_COLUMNS):
        table.coverage.append(CoverageRow(r["method"], r["policy"], r["scenario"], int(r["checkpoint_T"]),
                                          float(r["alpha"]), float(r["coverage"]), float(r["mc_se"]),
                                          int(r["n_reps"]), int(r["flagged"])))
    for r in _read(out / FILES["widths"], WIDTH_COLUMNS):
        table.widths.append(WidthRow(r["method"], r["policy"], r["scenario"], int(r["checkpoint_T"]),
                                     int(r["contrast_index"]), float(r["mean_width"]), float(r["sd_width"])))
    for r in _read(out / FILES["plotdata"], PLOT_COLUMNS):
        if r["metric"] == "contrast_coverage":
            table.contrasts.append(ContrastRow(r["method"], r["policy"], r["scenario"], int(r["checkpoint_T"]),
                                               int(r["contrast_index"]), float(r["value"]), float(r["mc_se"]),
                                               int(r["n_reps"])))
    return table
