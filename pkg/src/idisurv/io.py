"""Cohort CSV files, run configuration and flat SVG plots."""

import csv
import io
import json
import math
from html import escape

import jsonschema
import numpy as np

from .data import Cohort
from .errors import CohortFormatError, ConfigError

BASE_COLUMNS = ("id", "group", "time", "event", "index_time")

_NUMBER_ARRAY = {"type": "array", "items": {"type": "number"}}
SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n1": {"type": "integer", "minimum": 1},
        "n0": {"type": "integer", "minimum": 1},
        "beta": {**_NUMBER_ARRAY, "minItems": 3, "maxItems": 3},
        "r_case": {"enum": ["uniform", "exponential", "zero"]},
        "r_upper": {"type": "number", "exclusiveMinimum": 0},
        "r_rate": {"type": "number", "exclusiveMinimum": 0},
        "r_coef": {**_NUMBER_ARRAY, "minItems": 2, "maxItems": 2},
        "lambda0": {"type": "number", "exclusiveMinimum": 0},
        "gamma": {**_NUMBER_ARRAY, "minItems": 2, "maxItems": 2},
        "alpha": {"type": "number"},
        "censor_rate": {"type": "number", "exclusiveMinimum": 0},
        "sigma_omega": {"type": "number", "minimum": 0},
        "omega_coef_g": {"type": "number"},
        "omega_coef_t": {"type": "number"},
    },
}
RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "covariates": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
        "adjustment": {"enum": ["weighting", "matching", "none"]},
        "B": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "caliper": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "zeta_cap": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "output_dir": {"type": "string"},
        "threads": {"type": "integer", "minimum": 1},
        "scenario": SCENARIO_SCHEMA,
        "reps": {"type": "integer", "minimum": 2},
        "methods": {"type": "array", "minItems": 1, "uniqueItems": True,
                    "items": {"enum": ["naive", "matching", "weighting"]}},
        "alpha_grid": {**_NUMBER_ARRAY, "minItems": 1},
        "oracle_n": {"type": "integer", "minimum": 1000},
    },
}
CONFIG_DEFAULTS = {"covariates": [], "adjustment": "weighting", "B": 100, "seed": 0,
                   "caliper": None, "zeta_cap": None, "output_dir": "idisurv-out",
                   "reps": 100, "methods": ["naive", "matching", "weighting"],
                   "oracle_n": 1_000_000}


def _location(error):
    path = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path)
    return "$" + path


def validate_config(raw):
    """Validate a parsed config and fill defaults; errors name the offending path."""
    validator = jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        msg = "; ".join(f"{_location(e)}: {e.message}" for e in errors)
        raise ConfigError(f"invalid config: {msg}")
    return {**CONFIG_DEFAULTS, **raw}


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON (line {exc.lineno}, column {exc.colno})") from exc
    return validate_config(raw)


# ----------------------------------------------------------------------
# cohort CSV
# ----------------------------------------------------------------------
def _parse_float(text, row, rid, column):
    try:
        value = float(text)
    except ValueError:
        raise CohortFormatError(f"row {row} (id={rid}): {column} {text!r} is not a number") from None
    if not math.isfinite(value):
        raise CohortFormatError(f"row {row} (id={rid}): {column} must be finite")
    return value


def parse_cohort(text, covariates=None):
    """Parse cohort CSV text.

    Rows are numbered from 1 after the header. ``covariates`` restricts and
    orders the covariate columns; by default every column after the base
    five is used.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise CohortFormatError("empty cohort file") from None
    if tuple(header[:5]) != BASE_COLUMNS:
        raise CohortFormatError(f"header must start with {','.join(BASE_COLUMNS)}; "
                                f"got {','.join(header[:5])}")
    extra = header[5:]
    if covariates:
        missing = [c for c in covariates if c not in extra]
        if missing:
            raise CohortFormatError(f"covariate columns not in file: {missing}")
        names = list(covariates)
    else:
        names = extra
    cols = [5 + extra.index(c) for c in names]
    ids, group, time, event, index_time, x = [], [], [], [], [], []
    for row, fields in enumerate(reader, start=1):
        if not fields:
            continue
        rid = fields[0].strip() if fields else ""
        if len(fields) != len(header):
            raise CohortFormatError(f"row {row} (id={rid}): expected {len(header)} fields, "
                                    f"got {len(fields)}")
        g, d = fields[1].strip(), fields[3].strip()
        if g not in ("0", "1"):
            raise CohortFormatError(f"row {row} (id={rid}): group must be 0 or 1, got {g!r}")
        if d not in ("0", "1"):
            raise CohortFormatError(f"row {row} (id={rid}): event must be 0 or 1, got {d!r}")
        y = _parse_float(fields[2], row, rid, "time")
        if y < 0:
            raise CohortFormatError(f"row {row} (id={rid}): negative time {y!r}")
        r_text = fields[4].strip()
        if g == "1":
            if not r_text:
                raise CohortFormatError(f"row {row} (id={rid}): group 1 record lacks index_time")
            r = _parse_float(r_text, row, rid, "index_time")
            if r < 0 or r > y:
                raise CohortFormatError(f"row {row} (id={rid}): index_time must lie in [0, time]")
        else:
            if r_text:
                raise CohortFormatError(f"row {row} (id={rid}): group 0 record has an index_time")
            r = math.nan
        covs = []
        for c, name in zip(cols, names):
            if not fields[c].strip():
                raise CohortFormatError(f"row {row} (id={rid}): missing value for {name}")
            covs.append(_parse_float(fields[c], row, rid, name))
        ids.append(rid)
        group.append(int(g))
        time.append(y)
        event.append(int(d))
        index_time.append(r)
        x.append(covs)
    if not ids:
        raise CohortFormatError("cohort file has no data rows")
    if len(set(ids)) != len(ids):
        raise CohortFormatError("ids must be unique")
    return Cohort(ids=np.array(ids, dtype=object), group=np.array(group), time=np.array(time),
                  event=np.array(event), index_time=np.array(index_time),
                  covariates=np.array(x, dtype=float).reshape(len(ids), len(names)),
                  covariate_names=tuple(names))


def read_cohort(path, covariates=None):
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_cohort(fh.read(), covariates)


def format_cohort(cohort):
    """Serialise a cohort; floats use ``repr`` so parsing restores them exactly."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BASE_COLUMNS + tuple(cohort.covariate_names))
    for i in range(cohort.n):
        r = cohort.index_time[i]
        writer.writerow([cohort.ids[i], int(cohort.group[i]), repr(float(cohort.time[i])),
                         int(cohort.event[i]), "" if np.isnan(r) else repr(float(r)),
                         *(repr(float(v)) for v in cohort.covariates[i])])
    return buf.getvalue()


def write_cohort(cohort, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_cohort(cohort))


def qq_csv(qq):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("q", "model_quantile", "empirical_quantile"))
    for q, m, e in qq:
        writer.writerow((repr(float(q)), repr(float(m)), repr(float(e))))
    return buf.getvalue()


# ----------------------------------------------------------------------
# SVG
# ----------------------------------------------------------------------
_W, _H, _PAD = 480, 360, 50


def _svg(body, title):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="{_W}" height="{_H}" fill="white"/>\n'
            f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>\n'
            + "\n".join(body) + "\n</svg>\n")


def love_plot_svg(report, threshold=0.1):
    """Absolute SMD per covariate before (open) and after (filled) adjustment."""
    names = report.names
    vals = [abs(v) for v in report.smd_before + report.smd_after if math.isfinite(v)]
    xmax = max([threshold * 1.5] + vals) * 1.1
    left = _PAD + 60
    top = 40
    step = (_H - top - _PAD) / max(len(names), 1)

    def sx(v):
        return left + (min(abs(v), xmax) / xmax) * (_W - left - 20)

    body = [f'<line x1="{left}" y1="{top}" x2="{left}" y2="{_H - _PAD}" stroke="black"/>',
            f'<line x1="{left}" y1="{_H - _PAD}" x2="{_W - 20}" y2="{_H - _PAD}" stroke="black"/>',
            f'<line x1="{sx(threshold):.2f}" y1="{top}" x2="{sx(threshold):.2f}" '
            f'y2="{_H - _PAD}" stroke="grey" stroke-dasharray="4,3"/>',
            f'<text x="{(left + _W - 20) / 2}" y="{_H - 15}" text-anchor="middle">|SMD|</text>']
    for k in range(5):
        v = xmax * k / 4
        body.append(f'<text x="{sx(v):.2f}" y="{_H - _PAD + 14}" text-anchor="middle">{v:.2f}</text>')
    for i, name in enumerate(names):
        y = top + step * (i + 0.5)
        body.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{escape(name)}</text>')
        b, a = report.smd_before[i], report.smd_after[i]
        body.append(f'<circle cx="{sx(b):.2f}" cy="{y:.2f}" r="4" fill="none" stroke="black"/>')
        body.append(f'<circle cx="{sx(a):.2f}" cy="{y:.2f}" r="4" fill="black"/>')
    return _svg(body, "Covariate balance (open: before, filled: after)")


def qq_plot_svg(qq):
    """Model versus empirical quantiles of the observed index time."""
    model, emp = qq[:, 1], qq[:, 2]
    hi = float(max(model.max(), emp.max(), 1e-12)) * 1.05

    def sx(v):
        return _PAD + v / hi * (_W - 2 * _PAD)

    def sy(v):
        return _H - _PAD - v / hi * (_H - 2 * _PAD)

    body = [f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
            f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
            f'<line x1="{sx(0):.2f}" y1="{sy(0):.2f}" x2="{sx(hi):.2f}" y2="{sy(hi):.2f}" '
            f'stroke="grey" stroke-dasharray="4,3"/>',
            f'<text x="{_W / 2}" y="{_H - 15}" text-anchor="middle">model quantile</text>',
            f'<text x="15" y="{_H / 2}" text-anchor="middle" '
            f'transform="rotate(-90 15 {_H / 2})">empirical quantile</text>']
    for k in range(5):
        v = hi * k / 4
        body.append(f'<text x="{sx(v):.2f}" y="{_H - _PAD + 14}" text-anchor="middle">{v:.2f}</text>')
        body.append(f'<text x="{_PAD - 6}" y="{sy(v) + 4:.2f}" text-anchor="end">{v:.2f}</text>')
    body.extend(f'<circle cx="{sx(m):.2f}" cy="{sy(e):.2f}" r="2" fill="black"/>'
                for m, e in zip(model, emp))
    return _svg(body, "Q-Q plot of the index time given survival past it")
