from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from core.models import Marginal, SummaryTable

CSV_ENCODING = "utf-8"
CSV_DELIMITER = ","
CSV_NEWLINE = "\r\n"
SUMMARY_COLUMNS = ("name", "mean", "sd", "0.025quant", "0.5quant", "0.975quant")
_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def write_json(file_path: str | Path, payload: Any) -> str:
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, allow_nan=False) + "\n", encoding=CSV_ENCODING)
    return str(path)


def write_summary(table: SummaryTable, output_dir: str | Path, extra: dict[str, Any] | None = None) -> str:
    payload = {**(extra or {}), **table.to_dict()}
    return write_json(Path(output_dir) / "summary.json", payload)


def safe_file_name(symbol: str) -> str:
    return _UNSAFE.sub("_", symbol).strip("_") or "unnamed"


def write_marginals(marginals: dict[str, Marginal], output_dir: str | Path) -> dict[str, str]:
    """One (x, density) CSV per symbol plus an index.csv naming the file of every symbol."""
    folder = Path(output_dir) / "marginals"
    folder.mkdir(parents=True, exist_ok=True)
    written: dict[str, str] = {}
    used: set[str] = set()
    index_rows = []
    for name, marginal in marginals.items():
        stem = safe_file_name(name)
        candidate, counter = stem, 1
        while candidate in used:
            counter += 1
            candidate = f"{stem}_{counter}"
        used.add(candidate)
        file_name = f"{candidate}.csv"
        rows = [{"x": x, "density": d} for x, d in zip(marginal.support, marginal.density)]
        _write_csv(folder / file_name, rows, ["x", "density"])
        index_rows.append({"file": file_name, "name": name, "approximate": int(marginal.approximate)})
        written[name] = str(folder / file_name)
    _write_csv(folder / "index.csv", index_rows, ["file", "name", "approximate"])
    return written


def write_prior_posterior(report: list[dict[str, Any]], output_dir: str | Path) -> str:
    folder = Path(output_dir) / "prior_posterior"
    folder.mkdir(parents=True, exist_ok=True)
    index_rows = []
    for position, entry in enumerate(report):
        file_name = f"{position:03d}_{safe_file_name(entry['name'])}.csv"
        rows = [
            {"x": x, "prior": p, "posterior": q}
            for x, p, q in zip(entry["support"], entry["prior"], entry["posterior"])
        ]
        _write_csv(folder / file_name, rows, ["x", "prior", "posterior"])
        index_rows.append({"file": file_name, "name": entry["name"]})
    _write_csv(folder / "index.csv", index_rows, ["file", "name"])
    return str(folder)


def write_curve(table: pd.DataFrame, name: str, output_dir: str | Path) -> str:
    folder = Path(output_dir) / "curves"
    folder.mkdir(parents=True, exist_ok=True)
    file_path = folder / f"{safe_file_name(name)}.csv"
    _write_csv(file_path, table.to_dict(orient="records"), list(table.columns))
    return str(file_path)


def write_samples(table: pd.DataFrame, name: str, output_dir: str | Path) -> str:
    folder = Path(output_dir) / "samples"
    folder.mkdir(parents=True, exist_ok=True)
    file_path = folder / f"{safe_file_name(name)}.csv"
    _write_csv(file_path, table.to_dict(orient="records"), list(table.columns))
    return str(file_path)


def _write_csv(file_path: Path, rows: list[dict[str, Any]], columns: list[str]) -> None:
    with file_path.open("w", encoding=CSV_ENCODING, newline="") as csv_file:
        writer = csv.DictWriter(
            csv_file,
            fieldnames=columns,
            delimiter=CSV_DELIMITER,
            lineterminator=CSV_NEWLINE,
            extrasaction="ignore",
        )
        writer.writeheader()

        for row in rows:
            if not isinstance(row, dict):
                raise ValueError(f"Row is not a dict: {row!r}")

            normalized_row = {column: _to_csv_value(row.get(column)) for column in columns}
            writer.writerow(normalized_row)


def _to_csv_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return repr(value) if math.isfinite(value) else ""
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(item) for item in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


@dataclass(slots=True)
class InspectReport:
    run_dir: str
    files_checked: list[str] = field(default_factory=list)
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def _read_json(path: Path, report: InspectReport) -> Any:
    report.files_checked.append(str(path))
    try:
        return json.loads(path.read_text(encoding=CSV_ENCODING))
    except (OSError, json.JSONDecodeError) as exc:
        report.problems.append(f"{path}: unreadable JSON ({exc})")
        return None


def _read_numeric_csv(path: Path, columns: list[str] | None, report: InspectReport) -> pd.DataFrame | None:
    report.files_checked.append(str(path))
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding=CSV_ENCODING)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        report.problems.append(f"{path}: unreadable CSV ({exc})")
        return None
    if columns is not None and list(frame.columns) != columns:
        report.problems.append(f"{path}: expected columns {columns}, found {list(frame.columns)}")
        return None
    numeric = frame.apply(lambda column: pd.to_numeric(column.replace("", np.nan), errors="coerce"))
    bad = [c for c in frame.columns if numeric[c].isna().sum() > (frame[c] == "").sum()]
    if bad:
        report.problems.append(f"{path}: non-numeric values in columns {bad}")
    return numeric


def inspect_run(run_dir: str | Path) -> InspectReport:
    """Re-read every artifact of a run directory and check its schema."""
    root = Path(run_dir)
    report = InspectReport(run_dir=str(root))
    if not root.is_dir():
        report.problems.append(f"{root}: run directory does not exist")
        return report

    summary = _read_json(root / "summary.json", report)
    if isinstance(summary, dict):
        groups = summary.get("groups")
        if not isinstance(groups, dict):
            report.problems.append(f"{root / 'summary.json'}: 'groups' must be an object")
        else:
            for group, rows in groups.items():
                for row in rows:
                    if list(row) != list(SUMMARY_COLUMNS):
                        report.problems.append(f"summary.json: group '{group}' row has keys {list(row)}")
                        continue
                    quantiles = [row["0.025quant"], row["0.5quant"], row["0.975quant"]]
                    if None not in quantiles and not quantiles[0] <= quantiles[1] <= quantiles[2]:
                        report.problems.append(f"summary.json: quantiles of '{row['name']}' are not ordered")
        if not isinstance(summary.get("criteria"), dict):
            report.problems.append(f"{root / 'summary.json'}: 'criteria' must be an object")

    diagnostics = _read_json(root / "diagnostics.json", report)
    if isinstance(diagnostics, dict) and not isinstance(diagnostics.get("warnings"), list):
        report.problems.append(f"{root / 'diagnostics.json'}: 'warnings' must be a list")
    priors = _read_json(root / "priors.json", report)
    if priors is not None and not isinstance(priors, list):
        report.problems.append(f"{root / 'priors.json'}: top-level value must be a list")

    index_path = root / "marginals" / "index.csv"
    if index_path.is_file():
        report.files_checked.append(str(index_path))
        index = pd.read_csv(index_path, dtype=str, keep_default_na=False, encoding=CSV_ENCODING)
        for file_name in index.get("file", []):
            table = _read_numeric_csv(root / "marginals" / file_name, ["x", "density"], report)
            if table is not None and (table["density"] < 0).any():
                report.problems.append(f"marginals/{file_name}: negative density values")
    else:
        report.problems.append(f"{index_path}: missing marginal index")

    curves = root / "curves"
    if curves.is_dir():
        for path in sorted(curves.glob("*.csv")):
            table = _read_numeric_csv(path, None, report)
            if table is not None and (len(table.columns) == 0 or table.columns[0] != "time"):
                report.problems.append(f"{path}: first column must be 'time'")
    return report
