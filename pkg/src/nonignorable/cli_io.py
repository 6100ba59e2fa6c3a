"""Run configuration, CSV ingestion and report output."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataError
from .kernels import KernelSpec
from .model import GFunction, Sample
from .simlab import DESIGNS, MetricsRow

log = logging.getLogger(__name__)

PROVIDERS = ("oracle", "parametric", "nonparametric")
MISSING_TOKENS = ("", "NA")


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    mode: str
    design: Optional[str] = None
    input: Optional[str] = None
    ycol: Optional[str] = None
    rcol: Optional[str] = None
    ucols: tuple = ()
    zcols: tuple = ()
    provider: str = "oracle"
    gstar: str = "default"
    kernel: str = "gaussian:1.5:1/3"
    kernel_theta: Optional[str] = None
    n: Optional[int] = None
    replicates: Optional[int] = None
    seed: int = 0
    bootstrap: int = 200
    out: Optional[str] = None
    format: Optional[str] = None
    generation: str = "consistent"
    workers: int = 1
    tol: float = 1e-8
    max_iter: int = 100
    init: float = 0.0

    def __post_init__(self):
        _validate(self)

    @property
    def kernel_spec(self) -> KernelSpec:
        return KernelSpec.parse(self.kernel)

    @property
    def kernel_theta_spec(self) -> Optional[KernelSpec]:
        return None if self.kernel_theta is None else KernelSpec.parse(self.kernel_theta)

    @property
    def report_format(self) -> str:
        if self.format:
            return self.format
        return "csv" if self.out and self.out.lower().endswith(".csv") else "text"


_INT_KEYS = {"n", "replicates", "seed", "bootstrap", "workers", "max_iter"}
_FLOAT_KEYS = {"tol", "init"}
_LIST_KEYS = {"ucols", "zcols"}
_KEYS = {f.name for f in fields(RunConfig)}


def _validate(c: RunConfig):
    if c.mode not in ("simulate", "estimate"):
        raise ConfigurationError(f"mode: expected simulate or estimate, got {c.mode!r}")
    if c.provider not in PROVIDERS:
        raise ConfigurationError(f"provider: expected one of {PROVIDERS}, got {c.provider!r}")
    if c.format not in (None, "text", "csv"):
        raise ConfigurationError(f"format: expected text or csv, got {c.format!r}")
    if c.generation not in ("consistent", "literal"):
        raise ConfigurationError(f"generation: expected consistent or literal, got {c.generation!r}")
    for key in ("kernel", "kernel_theta"):
        val = getattr(c, key)
        if val is not None:
            try:
                KernelSpec.parse(val)
            except ConfigurationError as exc:
                raise ConfigurationError(f"{key}: {exc}") from None
    if c.bootstrap < 0:
        raise ConfigurationError("bootstrap: must be non-negative")
    if c.bootstrap == 1:
        raise ConfigurationError("bootstrap: needs at least 2 resamples (or 0 to skip)")
    if c.workers < 1:
        raise ConfigurationError("workers: must be at least 1")
    if not c.tol > 0:
        raise ConfigurationError("tol: must be positive")
    if c.max_iter < 1:
        raise ConfigurationError("max_iter: must be at least 1")
    if c.mode == "simulate":
        if c.input is not None or c.ycol is not None:
            raise ConfigurationError("input: data columns conflict with simulate mode")
        if c.design is None or c.design.upper() not in DESIGNS:
            raise ConfigurationError(f"design: expected one of {sorted(DESIGNS)}, got {c.design!r}")
        if c.n is None or c.n < 2:
            raise ConfigurationError("n: simulate needs a sample size of at least 2")
        if c.replicates is None or c.replicates < 2:
            raise ConfigurationError("replicates: simulate needs at least 2 replicates")
    else:
        if c.design is not None:
            raise ConfigurationError("design: conflicts with estimate mode")
        if c.input is None:
            raise ConfigurationError("input: estimate needs a CSV file")
        if c.ycol is None or not c.ucols or not c.zcols:
            raise ConfigurationError("ycol/ucols/zcols: estimate needs the column mapping")
        if c.provider == "oracle":
            raise ConfigurationError("provider: the oracle provider needs a simulated design")
        named = [c.ycol, *c.ucols, *c.zcols] + ([c.rcol] if c.rcol else [])
        if len(set(named)) != len(named):
            raise ConfigurationError("ucols/zcols: column roles must be disjoint")


def _coerce(key: str, raw):
    if key not in _KEYS:
        raise ConfigurationError(f"{key}: unknown configuration key")
    if raw is None:
        return None
    if key in _LIST_KEYS:
        if isinstance(raw, (list, tuple)):
            return tuple(raw)
        return tuple(p.strip() for p in str(raw).split(",") if p.strip())
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key}: malformed number {raw!r}") from None
    return str(raw).strip()


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"config: cannot read {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in out:
            raise ConfigurationError(f"{key}: given twice in {path}")
        out[key] = val
    return out


def parse_config(path=None, overrides: Optional[dict] = None, mode: Optional[str] = None) -> RunConfig:
    """Merge a config file with flag overrides (flags win) into a validated RunConfig."""
    raw = read_config_file(path) if path is not None else {}
    if mode is not None:
        if "mode" in raw and raw["mode"] != mode:
            raise ConfigurationError(f"mode: config file says {raw['mode']!r} but {mode!r} was requested")
        raw["mode"] = mode
    for key, val in (overrides or {}).items():
        if val is not None:
            raw[key.replace("-", "_")] = val
    if "mode" not in raw:
        raise ConfigurationError("mode: not specified")
    values = {k: _coerce(k, v) for k, v in raw.items()}
    return RunConfig(**values)


def parse_gstar(text: str, q: int, design=None) -> GFunction:
    """Working model from text.

    ``default`` (the design's misspecified model, or zero for real data),
    ``true``, ``zero``, ``mis:K`` (K-th registered alternative),
    ``affine:C:L1,L2`` or ``quad:C:L1,L2:Q1,Q2``.
    """
    text = text.strip()
    head, *rest = text.split(":")
    try:
        if head == "default":
            return design.gstar if design is not None else GFunction.zero(q)
        if head == "zero":
            return GFunction.zero(q)
        if head in ("true", "mis"):
            if design is None:
                raise ConfigurationError(f"gstar: {head!r} needs a simulation design")
            if head == "true":
                return design.g
            return design.gstar_misspecified[int(rest[0])]
        if head == "affine" and len(rest) == 2:
            g = GFunction.affine(float(rest[0]), [float(v) for v in rest[1].split(",")])
        elif head == "quad" and len(rest) == 3:
            g = GFunction.quadratic(float(rest[0]), [float(v) for v in rest[1].split(",")],
                                    [float(v) for v in rest[2].split(",")])
        else:
            raise ConfigurationError(f"gstar: cannot parse {text!r}")
    except (ValueError, IndexError):
        raise ConfigurationError(f"gstar: cannot parse {text!r}") from None
    if g.q != q:
        raise ConfigurationError(f"gstar: {text!r} has {g.q} coefficients but u has dimension {q}")
    return g


# --------------------------------------------------------------------------
# CSV data


@dataclass(frozen=True)
class ColumnMapping:
    ycol: str
    ucols: tuple
    zcols: tuple
    rcol: Optional[str] = None


@dataclass(frozen=True)
class LoadSummary:
    rows: int
    observed: int
    missing: int
    rejected: int = 0


def _number(cell: str, lineno: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"line {lineno}, column {col!r}: not a number: {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"line {lineno}, column {col!r}: non-finite value {cell!r}")
    return v


def read_csv_sample(path, mapping: ColumnMapping):
    """Load a Sample plus row counts. Empty or ``NA`` outcomes mean r = 0."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty; a header row is required") from None
        need = [mapping.ycol, *mapping.ucols, *mapping.zcols] + ([mapping.rcol] if mapping.rcol else [])
        absent = [c for c in need if c not in header]
        if absent:
            raise ConfigurationError(f"columns not found in {path}: {', '.join(absent)}")
        pos = {name: header.index(name) for name in need}
        xcols = [*mapping.ucols, *mapping.zcols]
        X, y, r = [], [], []
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, found {len(row)}")
            xs = []
            for col in xcols:
                cell = row[pos[col]].strip()
                if cell in MISSING_TOKENS:
                    raise DataError(f"line {lineno}, column {col!r}: covariates must be fully observed")
                xs.append(_number(cell, lineno, col))
            ycell = row[pos[mapping.ycol]].strip()
            if mapping.rcol:
                rv = _number(row[pos[mapping.rcol]].strip(), lineno, mapping.rcol)
                if rv not in (0.0, 1.0):
                    raise DataError(f"line {lineno}, column {mapping.rcol!r}: response flag must be 0 or 1")
                ri = int(rv)
                if ri == 1 and ycell in MISSING_TOKENS:
                    raise DataError(f"line {lineno}: r = 1 but the outcome is missing")
            else:
                ri = 0 if ycell in MISSING_TOKENS else 1
            y.append(_number(ycell, lineno, mapping.ycol) if ri == 1 else np.nan)
            X.append(xs)
            r.append(ri)
    if not X:
        raise DataError(f"{path} has no data rows")
    q = len(mapping.ucols)
    sample = Sample(np.array(X), np.array(r), np.array(y), tuple(range(q)),
                    tuple(range(q, q + len(mapping.zcols))))
    summary = LoadSummary(len(X), int(sum(r)), len(X) - int(sum(r)))
    log.info("loaded %d rows from %s: %d observed, %d missing", summary.rows, path, summary.observed, summary.missing)
    return sample, summary


def load_csv(path, mapping: ColumnMapping) -> Sample:
    return read_csv_sample(path, mapping)[0]


def write_csv(sample: Sample, path, mapping: Optional[ColumnMapping] = None):
    """Write a sample in the layout ``load_csv`` reads; missing outcomes are empty cells."""
    if mapping is None:
        mapping = ColumnMapping(
            "y", tuple(f"u{k + 1}" for k in range(sample.q)),
            tuple(f"z{k + 1}" for k in range(len(sample.z_idx))),
        )
    header = [*mapping.ucols, *mapping.zcols, mapping.ycol] + ([mapping.rcol] if mapping.rcol else [])
    cols = list(sample.u_idx) + list(sample.z_idx)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for x, ri, yi in zip(sample.X, sample.r, sample.y):
                row = [repr(float(x[c])) for c in cols] + [repr(float(yi)) if ri == 1 else ""]
                if mapping.rcol:
                    row.append(str(int(ri)))
                w.writerow(row)
    except OSError as exc:
        raise ConfigurationError(f"out: cannot write {path}: {exc}") from None
    return mapping


# --------------------------------------------------------------------------
# reports

_CSV_FIELDS = ("label", "target", "truth", "bias", "sd", "rmse", "se", "cvp", "n_replicates", "n_failures")
_X100 = ("bias_x100", "sd_x100", "rmse_x100", "se_x100")


def _fmt_full(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def _fmt2(v):
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.2f}"


def format_table(rows: Sequence[MetricsRow]) -> str:
    """Fixed-width table; Bias, SD, RMSE and SE are multiplied by 100."""
    lw = max([20] + [len(r.label) for r in rows])
    head = f"{'Estimator':<{lw}} {'Target':<6} {'Bias':>8} {'SD':>8} {'RMSE':>8} {'SE':>8} {'CVP':>7} {'Fail':>5}"
    lines = [head, "-" * len(head)]
    for r in rows:
        flag = "*" if r.flagged else ""
        lines.append(
            f"{r.label:<{lw}} {r.target:<6} {_fmt2(r.bias_x100):>8} {_fmt2(r.sd_x100):>8} "
            f"{_fmt2(r.rmse_x100):>8} {_fmt2(r.se_x100):>8} {_fmt2(r.cvp):>7} {r.n_failures:>4}{flag}"
        )
    return "\n".join(lines) + "\n"


def write_report(rows: Sequence[MetricsRow], fmt: str, path):
    if not rows:
        raise ConfigurationError("report: no rows to write")
    if fmt not in ("text", "csv"):
        raise ConfigurationError(f"format: expected text or csv, got {fmt!r}")
    try:
        with open(path, "w", newline="") as fh:
            if fmt == "text":
                fh.write(format_table(rows))
                return
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(_CSV_FIELDS + _X100)
            for r in rows:
                w.writerow([_fmt_full(getattr(r, f)) for f in _CSV_FIELDS + _X100])
    except OSError as exc:
        raise ConfigurationError(f"out: cannot write report to {path}: {exc}") from None


def read_report(path) -> list:
    """Inverse of ``write_report(..., "csv", path)``."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            num = lambda k: None if rec[k] == "" else float(rec[k])
            rows.append(MetricsRow(
                rec["label"], rec["target"], num("truth"), num("bias"), num("sd"), num("rmse"),
                num("se"), num("cvp"), int(rec["n_replicates"]), int(rec["n_failures"]),
            ))
    return rows


def write_estimates(records: Sequence[dict], fmt: str, path=None) -> str:
    """Real-data results: one record per parameter with estimate and SEs."""
    keys = ("parameter", "estimate", "se", "se_bootstrap")
    if fmt == "csv":
        lines = [",".join(keys)] + [",".join(_fmt_full(r.get(k)) for k in keys) for r in records]
    else:
        lines = [f"{'Parameter':<10} {'Estimate':>12} {'SE':>12} {'SE(boot)':>12}"]
        for r in records:
            se_b = r.get("se_bootstrap")
            lines.append(
                f"{r['parameter']:<10} {r['estimate']:>12.6f} {r['se']:>12.6f} "
                f"{'-' if se_b is None else format(se_b, '.6f'):>12}"
            )
    text = "\n".join(lines) + "\n"
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as exc:
            raise ConfigurationError(f"out: cannot write {path}: {exc}") from None
    return text
