"""
Reporting for the critical loop-soup laboratory

This module turns result records into CSV tables, JSON-lines files with the
exponent fits of every estimate family, and log-log SVG plots. Identical
records always give byte-identical files.
"""

import io
import os
import csv
import json
import logging
from collections import OrderedDict
from typing import List, Dict, Any, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from config import FIT_AXIS, RUN_CONFIG, SCALING_CONFIG
from errors import InsufficientScalesError, NonPositiveValuesError, PreconditionError, StorageError, UnknownFormatError
from experiment_runner import ResultRecord, json_ready
from record_store import RecordStore, read_jsonl, record_line, write_jsonl
from scaling_analysis import ExponentFit, fit_exponent, subadditivity_audit

logger = logging.getLogger(__name__)

REPORT_FORMATS = ("csv", "jsonl", "svg")

CSV_COLUMNS = ("kind", "scale", "estimate", "stderr", "ci_lo", "ci_hi", "replicas", "config_hash", "label")

# Kinds with more families than this are plotted without a legend
_LEGEND_LIMIT = 10

_SVG_RC = {
    "svg.hashsalt": "looplab",
    "svg.fonttype": "none",
    "font.size": 9,
}

Record = Union[ResultRecord, Dict[str, Any]]


def _as_dict(record: Record) -> Dict[str, Any]:
    return record.as_dict() if isinstance(record, ResultRecord) else dict(record)


def load_records(directory: str) -> List[Dict[str, Any]]:
    """
    Load the records of a run directory.

    The JSON-lines export is read when present, the SQLite store otherwise.

    Raises:
        StorageError: if the directory holds neither
    """
    jsonl_path = os.path.join(directory, RUN_CONFIG["records_name"])
    if os.path.exists(jsonl_path):
        return read_jsonl(jsonl_path)
    if os.path.exists(os.path.join(directory, RUN_CONFIG["db_name"])):
        return RecordStore(directory).get_records()
    raise StorageError(f"no records found in {directory}")


def families(records: Iterable[Dict[str, Any]]) -> "OrderedDict[Tuple[str, str, str], List[Dict[str, Any]]]":
    """Group records by (config hash, kind, label) in order of first appearance."""
    groups: "OrderedDict[Tuple[str, str, str], List[Dict[str, Any]]]" = OrderedDict()
    for record in records:
        groups.setdefault((record["config_hash"], record["kind"], record["label"]), []).append(record)
    return groups


def fit_family(kind: str, rows: Sequence[Dict[str, Any]]) -> Optional[ExponentFit]:
    """
    Log-log fit of one family, or None when it cannot be fitted.

    Box counts are fitted against 1/delta; every other kind against its scale.
    """
    usable = [r for r in rows if r["estimate"] is not None and r["estimate"] > 0]
    if len(usable) < SCALING_CONFIG["min_fit_scales"]:
        return None
    usable = sorted(usable, key=lambda r: r["scale"])
    scales = np.array([r["scale"] for r in usable], dtype=float)
    if FIT_AXIS.get(kind) == "inverse":
        scales = 1.0 / scales
    errors = [r["stderr"] or 0.0 for r in usable]
    try:
        return fit_exponent(scales, [r["estimate"] for r in usable], errors=errors, label=f"{kind} {usable[0]['label']}")
    except (InsufficientScalesError, NonPositiveValuesError) as e:
        logger.debug("no fit for %s: %s", kind, e)
        return None


def audit_family(rows: Sequence[Dict[str, Any]]) -> Optional[Dict[str, Any]]:
    """Subadditivity audit of one-arm estimates at base^-k, k = 1..K."""
    by_k = {int(r["annex"]["k"]): r for r in rows if r["annex"].get("k") is not None}
    K = len(by_k)
    if sorted(by_k) != list(range(1, K + 1)):
        logger.warning("subadditivity audit skipped: scales k = %s are not 1..K", sorted(by_k))
        return None
    ordered = [by_k[k] for k in range(1, K + 1)]
    try:
        audit = subadditivity_audit([r["estimate"] for r in ordered], base=float(ordered[0]["annex"]["base"]),
                                    stderr=[r["stderr"] for r in ordered])
    except (InsufficientScalesError, NonPositiveValuesError) as e:
        logger.warning("subadditivity audit skipped: %s", e)
        return None
    return audit.as_dict()


def fit_lines(records: Sequence[Dict[str, Any]]) -> List[str]:
    """JSON lines with the fit, and the audit where it applies, of every family."""
    lines = []
    for (hash_, kind, label), rows in families(records).items():
        fit = fit_family(kind, rows)
        if fit is None:
            continue
        entry: Dict[str, Any] = {"config_hash": hash_, "kind": kind, "label": label,
                                 "axis": FIT_AXIS.get(kind, "scale"), "fit": fit.as_dict()}
        if kind == "subadditivity":
            entry["audit"] = audit_family(rows)
        lines.append(record_line_fit(entry))
    return lines


def record_line_fit(entry: Dict[str, Any]) -> str:
    return json.dumps(json_ready(entry), sort_keys=True, separators=(",", ":"), allow_nan=False)


def _csv_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(records: Sequence[Dict[str, Any]], path: str, include_timing: bool = False) -> None:
    columns = CSV_COLUMNS + (("wall_time",) if include_timing else ())
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for record in records:
        writer.writerow([_csv_cell(record.get(c)) for c in columns])
    write_jsonl(path, buffer.getvalue().splitlines())


def write_svg(kind: str, records: Sequence[Dict[str, Any]], path: str) -> None:
    """
    Log-log scatter of one experiment kind with fitted lines and CI bands.

    Each fitted family gets its slope in the legend, printed to 4 decimals.
    """
    groups = families(records)
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(6.0, 4.5))
        for (_, _, label), rows in groups.items():
            points = [r for r in rows if r["estimate"] is not None and r["estimate"] > 0]
            if not points:
                continue
            x = np.array([r["scale"] for r in points], dtype=float)
            if FIT_AXIS.get(kind) == "inverse":
                x = 1.0 / x
            y = np.array([r["estimate"] for r in points], dtype=float)
            err = np.array([r["stderr"] or 0.0 for r in points], dtype=float)
            fit = fit_family(kind, rows)
            name = label if fit is None else f"{label}: slope {fit.slope:.4f}"
            handle = ax.errorbar(x, y, yerr=np.minimum(err, 0.999 * y), fmt="o", ms=4, capsize=2, label=name)
            if fit is not None:
                grid = np.geomspace(x.min(), x.max(), 50)
                color = handle[0].get_color()
                ax.plot(grid, fit.predict(grid), "-", color=color, lw=1)
                # band between the CI slopes, pivoting at the log-centre of the scales
                centre = np.exp(np.mean(np.log(x)))
                anchor = fit.predict([centre])[0]
                lo = anchor * (grid / centre) ** fit.ci_lo
                hi = anchor * (grid / centre) ** fit.ci_hi
                ax.fill_between(grid, np.minimum(lo, hi), np.maximum(lo, hi), color=color, alpha=0.15, lw=0)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("1/delta" if FIT_AXIS.get(kind) == "inverse" else "scale")
        ax.set_ylabel("estimate")
        ax.set_title(kind)
        if 0 < len(groups) <= _LEGEND_LIMIT:
            ax.legend(loc="best")
        fig.tight_layout()
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as e:
            raise StorageError(f"cannot write {path}: {e}") from e
        finally:
            plt.close(fig)


def emit_report(records: Sequence[Record], fmt: str, out_dir: str, include_timing: bool = False) -> List[str]:
    """
    Write a report of result records.

    Args:
        records: ResultRecords or their dictionaries
        fmt: "csv", "jsonl" or "svg"
        out_dir: Directory for the report files
        include_timing: Add wall times to CSV and JSON-lines output

    Returns:
        Paths of the written files

    Raises:
        PreconditionError: if there are no records
        UnknownFormatError: for any other format
    """
    if fmt not in REPORT_FORMATS:
        raise UnknownFormatError(f"unknown report format {fmt!r}; expected one of {', '.join(REPORT_FORMATS)}")
    rows = [_as_dict(r) for r in records]
    if not rows:
        raise PreconditionError("a report needs at least one record")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create report directory {out_dir}: {e}") from e

    paths = []
    if fmt == "csv":
        path = os.path.join(out_dir, "records.csv")
        write_csv(rows, path, include_timing)
        paths.append(path)
    elif fmt == "jsonl":
        path = os.path.join(out_dir, "records.jsonl")
        write_jsonl(path, (record_line(r, include_timing) for r in rows))
        fits_path = os.path.join(out_dir, "fits.jsonl")
        write_jsonl(fits_path, fit_lines(rows))
        paths.extend([path, fits_path])
    else:
        kinds = list(OrderedDict.fromkeys(r["kind"] for r in rows))
        for kind in kinds:
            path = os.path.join(out_dir, f"{kind}.svg")
            write_svg(kind, [r for r in rows if r["kind"] == kind], path)
            paths.append(path)
    logger.info("wrote %s report: %s", fmt, ", ".join(paths))
    return paths
