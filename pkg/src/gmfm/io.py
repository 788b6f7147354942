"""Data bundles (``meta.json`` + ``data.csv``) and fit/truth JSON files."""

from __future__ import annotations

import csv
import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .families import FamilyDomainError
from .model import FactorParams, FamilyMap, MatrixSeries
from .report import FitReport

__all__ = [
    "BundleError",
    "read_bundle",
    "write_bundle",
    "write_fit",
    "read_fit",
    "write_truth",
    "read_truth",
    "fit_schema",
]

DATA_HEADER = ["t", "i", "j", "x"]


class BundleError(ValueError):
    """Malformed or unreadable input; the message names the file or field."""


def _need_int(meta: dict, key: str, lo: int) -> int:
    if key not in meta:
        raise BundleError(f"meta.json: missing field '{key}'")
    v = meta[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise BundleError(f"meta.json: field '{key}' must be an integer >= {lo}, got {v!r}")
    return v


def _family_map(meta: dict) -> FamilyMap:
    try:
        return FamilyMap.from_dict(
            {"default": meta.get("default_family", "gaussian"), "blocks": meta.get("family_blocks", [])}
        )
    except (KeyError, TypeError, ValueError) as exc:
        field = "default_family" if "family" in str(exc) and "block" not in str(exc) else "family_blocks"
        raise BundleError(f"meta.json: invalid field '{field}': {exc}") from exc


def read_bundle(path) -> tuple[MatrixSeries, FamilyMap, dict]:
    """Load a bundle directory.  Absent ``(t, i, j)`` rows become missing cells."""
    root = Path(path)
    meta_path, data_path = root / "meta.json", root / "data.csv"
    if not root.is_dir():
        raise BundleError(f"bundle directory not found: {root}")
    if not meta_path.is_file():
        raise BundleError(f"missing file: {meta_path}")
    if not data_path.is_file():
        raise BundleError(f"missing file: {data_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"meta.json: not valid JSON ({exc})") from exc
    if not isinstance(meta, dict):
        raise BundleError("meta.json: top level must be an object")
    p1, p2, T = _need_int(meta, "p1", 2), _need_int(meta, "p2", 2), _need_int(meta, "T", 1)
    for key in ("k1", "k2"):
        if key in meta and meta[key] is not None:
            _need_int(meta, key, 1)
    fmap = _family_map(meta)
    try:
        codes = fmap.resolve(p1, p2, T)
    except ValueError as exc:
        raise BundleError(f"meta.json: invalid field 'family_blocks': {exc}") from exc

    with data_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != DATA_HEADER:
            raise BundleError(f"{data_path}: header must be {','.join(DATA_HEADER)}, got {header!r}")
        rows = [r for r in reader if r]
    values = np.zeros((T, p1, p2))
    seen = np.zeros((T, p1, p2), dtype=bool)
    if rows:
        try:
            arr = np.array(rows, dtype=float)
        except ValueError as exc:
            raise BundleError(f"{data_path}: non-numeric entry ({exc})") from exc
        if arr.shape[1] != 4:
            raise BundleError(f"{data_path}: expected 4 columns per row")
        idx = arr[:, :3]
        if not np.all(idx == np.round(idx)):
            raise BundleError(f"{data_path}: indices must be integers")
        t, i, j = (idx.astype(np.int64) - 1).T
        bad = (t < 0) | (t >= T) | (i < 0) | (i >= p1) | (j < 0) | (j >= p2)
        if bad.any():
            r = int(np.flatnonzero(bad)[0])
            raise BundleError(f"{data_path}: row {r + 2} index {tuple(int(v) for v in idx[r])} outside (T, p1, p2)")
        flat = np.ravel_multi_index((t, i, j), (T, p1, p2))
        if np.unique(flat).size != flat.size:
            raise BundleError(f"{data_path}: duplicate (t, i, j) rows")
        if not np.isfinite(arr[:, 3]).all():
            raise BundleError(f"{data_path}: non-finite x value")
        values[t, i, j] = arr[:, 3]
        seen[t, i, j] = True
    if not seen.any():
        raise BundleError(f"{data_path}: no observations")
    X = MatrixSeries(values, seen)
    from .families import validate_support

    try:
        validate_support(codes, X.values, X.observed)
    except FamilyDomainError as exc:
        raise BundleError(f"{data_path}: {exc}") from exc
    return X, fmap, meta


def write_bundle(path, X: MatrixSeries, fmap: FamilyMap, extra: dict | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    fm = fmap.to_dict()
    meta = {"p1": X.p1, "p2": X.p2, "T": X.T, "default_family": fm["default"], "family_blocks": fm["blocks"]}
    meta.update(extra or {})
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    t, i, j = np.nonzero(X.observed)
    x = X.values[t, i, j]
    with (root / "data.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DATA_HEADER)
        w.writerows(zip((t + 1).tolist(), (i + 1).tolist(), (j + 1).tolist(), map(repr, x.tolist())))
    return root


def _theta_dict(theta: FactorParams) -> dict:
    return {"R": theta.R.tolist(), "C": theta.C.tolist(), "F": theta.F.tolist()}


def _theta_from(d: dict) -> FactorParams:
    return FactorParams(np.array(d["R"], float), np.array(d["C"], float), np.array(d["F"], float))


def _clean(obj):
    """Replace non-finite floats (not valid JSON) with None."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_fit(path, theta: FactorParams, report: FitReport, variances: dict | None = None, extra: dict | None = None) -> None:
    p1, p2, T = theta.dims
    doc = {
        "format": "gmfm-fit/1",
        "dims": {"p1": p1, "p2": p2, "T": T, "k1": theta.k1, "k2": theta.k2},
        **_theta_dict(theta),
        "report": report.to_dict(),
    }
    if variances:
        doc["variances"] = {k: v.to_dict() for k, v in variances.items()}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(_clean(doc)) + "\n")


def read_fit(path) -> tuple[FactorParams, FitReport, dict]:
    doc = json.loads(Path(path).read_text())
    return _theta_from(doc), FitReport.from_dict(doc["report"]), doc


def write_truth(path, theta0: FactorParams, info: dict | None = None) -> None:
    doc = {"format": "gmfm-truth/1", **_theta_dict(theta0), **(info or {})}
    Path(path).write_text(json.dumps(doc) + "\n")


def read_truth(path) -> tuple[FactorParams, dict]:
    doc = json.loads(Path(path).read_text())
    return _theta_from(doc), doc


def fit_schema() -> dict:
    return json.loads(resources.files("gmfm").joinpath("schemas/fit.schema.json").read_text())
