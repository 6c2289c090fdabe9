"""Delimited-text readers and writers for every pipeline artifact.

All tables are comma separated with a header row. Floats are written with
17 significant digits so that a write/read round trip is exact.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .linking import EffectSummaries, FabFit, FeatureSource
from .sim import PIPELINES, SimReport
from .tensor import LIKELIHOODS, TensorDataset

FACTOR_SCHEMA = "# fab-factors v1"
TENSOR_COLUMNS = ("row", "col", "modality", "value")
SUMMARY_COLUMNS = ("id", "row", "col", "ybar", "s", "n")
RESULT_COLUMNS = ("id", "t", "dof", "b_fab", "m_tilde", "v_tilde",
                  "p_classical", "p_fab", "q_classical", "q_fab", "fold")


def fmt(x) -> str:
    return format(float(x), ".17g")


def _write_rows(path, header, rows, comment=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(comment + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path, required):
    """Yield ``(line_number, row_dict)`` after checking the header."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such file")
    with open(path, newline="") as fh:
        lines = [(i + 1, line) for i, line in enumerate(fh) if not line.startswith("#")]
    if not lines:
        raise ValidationError(f"{path}: empty file, header row required")
    reader = csv.reader([line for _, line in lines])
    header = [h.strip() for h in next(reader)]
    missing = [c for c in required if c not in header]
    if missing:
        raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
    out = []
    for (lineno, _), row in zip(lines[1:], reader):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        out.append((lineno, {h: c.strip() for h, c in zip(header, row)}))
    return out


def _number(path, lineno, field, text, kind=float):
    try:
        value = kind(text)
    except ValueError:
        raise ValidationError(f"{path}:{lineno}: non-numeric {field} {text!r}") from None
    if kind is float and not np.isfinite(value):
        raise ValidationError(f"{path}:{lineno}: non-finite {field} {text!r}")
    return value


# ---------------------------------------------------------------------------
# config


def read_config(path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def modality_likelihoods(config: dict) -> dict:
    """Extract ``modality.<name> = <likelihood>`` declarations."""
    out = {}
    for key, value in config.items():
        if key.startswith("modality."):
            out[key[len("modality."):]] = value
    return out


# ---------------------------------------------------------------------------
# tensor


def load_tensor(path, likelihoods: dict) -> TensorDataset:
    """Long-form ``row,col,modality,value`` file; empty value marks a missing cell.

    ``likelihoods`` maps each modality name to one of ``normal``, ``probit``
    or ``tobit``. Entity and modality order follow first appearance.
    """
    rows, cols, mods = {}, {}, {}
    cells = {}
    for lineno, r in _read_rows(path, TENSOR_COLUMNS):
        key = (r["row"], r["col"], r["modality"])
        if key in cells:
            raise ValidationError(f"{path}:{lineno}: duplicate cell {key} (first at line {cells[key][0]})")
        mod = r["modality"]
        if mod not in likelihoods:
            raise ValidationError(f"{path}:{lineno}: modality {mod!r} has no declared likelihood")
        lik = likelihoods[mod]
        if lik not in LIKELIHOODS:
            raise ValidationError(f"unknown likelihood {lik!r} for modality {mod!r}")
        value = None
        if r["value"] != "":
            value = _number(path, lineno, "value", r["value"])
            if lik == "probit" and value not in (0.0, 1.0):
                raise ValidationError(f"{path}:{lineno}: probit value {r['value']!r} not in {{0, 1}}")
            if lik == "tobit" and value < 0:
                raise ValidationError(f"{path}:{lineno}: tobit value {r['value']!r} is negative")
        for table, k in ((rows, r["row"]), (cols, r["col"]), (mods, mod)):
            table.setdefault(k, len(table))
        cells[key] = (lineno, value)
    if not cells:
        raise ValidationError(f"{path}: no data rows")
    entries = [(rows[a], cols[b], mods[c], v) for (a, b, c), (_, v) in cells.items()]
    return TensorDataset.from_entries(
        entries, (len(rows), len(cols), len(mods)), [likelihoods[m] for m in mods],
        row_keys=list(rows), col_keys=list(cols), modalities=list(mods))


def save_tensor(data: TensorDataset, path, include_missing=True):
    L, G, K = data.shape
    out = []
    for l in range(L):
        for g in range(G):
            for k in range(K):
                if data.observed[l, g, k]:
                    value = fmt(data.values[l, g, k])
                elif include_missing:
                    value = ""
                else:
                    continue
                out.append((data.row_keys[l], data.col_keys[g], data.modalities[k], value))
    _write_rows(path, TENSOR_COLUMNS, out)


def write_likelihood_config(data: TensorDataset, path, extra=None):
    lines = [f"modality.{m} = {lik}" for m, lik in zip(data.modalities, data.likelihoods)]
    lines += [f"{k} = {v}" for k, v in (extra or {}).items()]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# effect summaries


def load_summaries(path) -> EffectSummaries:
    ids, rows, cols, ybar, s, n = [], [], [], [], [], []
    seen = {}
    for lineno, r in _read_rows(path, SUMMARY_COLUMNS):
        if r["id"] in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate id {r['id']!r} (first at line {seen[r['id']]})")
        seen[r["id"]] = lineno
        ids.append(r["id"])
        rows.append(r["row"])
        cols.append(r["col"])
        ybar.append(_number(path, lineno, "ybar", r["ybar"]))
        s.append(_number(path, lineno, "s", r["s"]))
        count = _number(path, lineno, "n", r["n"])
        if count != int(count):
            raise ValidationError(f"{path}:{lineno}: n must be an integer, got {r['n']!r}")
        n.append(int(count))
    n = np.array(n, dtype=int)
    bad = [i for i, c in zip(ids, n) if c < 2]
    if bad:
        raise ValidationError(f"{path}: hypotheses with n < 2: {', '.join(bad)}")
    return EffectSummaries(np.array(ids, dtype=str), np.array(rows, dtype=str),
                           np.array(cols, dtype=str), ybar, s, n)


def save_summaries(summaries: EffectSummaries, path):
    _write_rows(path, SUMMARY_COLUMNS, [
        (i, r, c, fmt(y), fmt(sd), str(int(k))) for i, r, c, y, sd, k in zip(
            summaries.ids, summaries.row_keys, summaries.col_keys,
            summaries.ybar, summaries.s, summaries.n)
    ])


# ---------------------------------------------------------------------------
# factors


def _write_matrix(path, keys, A, prefix):
    header = ["key"] + [f"{prefix}{i + 1}" for i in range(A.shape[1])]
    _write_rows(path, header, [[k] + [fmt(x) for x in row] for k, row in zip(keys, A)],
                comment=FACTOR_SCHEMA)


def _read_matrix(path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such file")
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
    if first != FACTOR_SCHEMA:
        raise ValidationError(f"{path}: expected schema line {FACTOR_SCHEMA!r}, got {first!r}")
    records = _read_rows(path, ("key",))
    keys, data = [], []
    for lineno, r in records:
        keys.append(r.pop("key"))
        data.append([_number(path, lineno, f, v) for f, v in r.items()])
    if len(set(keys)) != len(keys):
        raise ValidationError(f"{path}: duplicate keys")
    return keys, np.array(data, dtype=float).reshape(len(keys), -1)


def export_factors(estimates, path):
    """Write ``row_factors.csv`` and ``col_factors.csv`` into directory ``path``.

    ``estimates`` needs ``U``, ``V``, ``row_keys`` and ``col_keys``
    attributes (e.g. aligned point estimates).
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_matrix(path / "row_factors.csv", estimates.row_keys, np.asarray(estimates.U), "u")
    _write_matrix(path / "col_factors.csv", estimates.col_keys, np.asarray(estimates.V), "v")


def load_factors(path, intercept=False) -> FeatureSource:
    """Kronecker feature source from a directory written by ``export_factors``."""
    path = Path(path)
    row_keys, U = _read_matrix(path / "row_factors.csv")
    col_keys, V = _read_matrix(path / "col_factors.csv")
    return FeatureSource.kronecker(U, V, row_keys, col_keys, intercept=intercept)


def save_tensor_estimates(estimates, path):
    """Per-modality intercept, residual variance and loading matrices."""
    K = len(estimates.modalities)
    B = np.asarray(estimates.B).reshape(K, -1)
    d_u, d_v = np.asarray(estimates.B).shape[1:]
    header = ["modality", "mu", "tau2"] + [f"b{i + 1}_{j + 1}" for i in range(d_u) for j in range(d_v)]
    _write_rows(path, header, [
        [m, fmt(estimates.mu[k]), fmt(estimates.tau2[k])] + [fmt(x) for x in B[k]]
        for k, m in enumerate(estimates.modalities)
    ], comment=FACTOR_SCHEMA)


# ---------------------------------------------------------------------------
# results


def save_results(fit: FabFit, path):
    _write_rows(path, RESULT_COLUMNS, [
        (fit.ids[j], fmt(fit.t[j]), fmt(fit.dof[j]), fmt(fit.b_fab[j]), fmt(fit.m_tilde[j]),
         fmt(fit.v_tilde[j]), fmt(fit.p_classical[j]), fmt(fit.p_fab[j]),
         fmt(fit.q_classical[j]), fmt(fit.q_fab[j]), str(int(fit.fold[j])))
        for j in range(len(fit))
    ])


def load_results(path) -> dict:
    """Column name -> array (``id`` as str, ``fold`` as int, the rest float)."""
    records = _read_rows(path, RESULT_COLUMNS)
    out = {"id": np.array([r["id"] for _, r in records], dtype=str)}
    for c in RESULT_COLUMNS[1:]:
        kind = int if c == "fold" else float
        out[c] = np.array([_number(path, ln, c, r[c], kind) for ln, r in records])
    return out


def save_exclusions(ids, path):
    _write_rows(path, ("id",), [(i,) for i in ids])


def load_exclusions(path):
    return [r["id"] for _, r in _read_rows(path, ("id",))]


# ---------------------------------------------------------------------------
# simulation reports


def save_report(report: SimReport, directory):
    """Write a report as CSV tables into ``directory``; returns the file list."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    if report.kind == "null":
        _write_rows(d / "null_summary.csv",
                    ("pipeline", "n_datasets", "target_fdr", "fdr", "fdr_se", "ks_stat", "ks_p"),
                    [(name, report.n_datasets, fmt(report.target_fdr), fmt(est), fmt(se),
                      fmt(report.ks[name][0]), fmt(report.ks[name][1]))
                     for name, (est, se) in report.fdr.items()])
        names = list(report.hist_counts)
        e = report.hist_edges
        _write_rows(d / "null_histogram.csv", ["lo", "hi"] + names,
                    [[fmt(e[i]), fmt(e[i + 1])] + [str(int(report.hist_counts[n][i])) for n in names]
                     for i in range(e.size - 1)])
        written += [d / "null_summary.csv", d / "null_histogram.csv"]
    elif report.kind == "power":
        rows = []
        for ti, tau2 in enumerate(report.tau2_grid):
            for ai, thr in enumerate(report.thresholds):
                rows.append([fmt(tau2), fmt(thr)] + [str(int(x)) for x in report.curves[ti, ai]])
        _write_rows(d / "power_curves.csv", ["tau2", "fdr"] + list(PIPELINES), rows)
        rows = []
        for ti, tau2 in enumerate(report.tau2_grid):
            for i in range(report.counts.shape[1]):
                rows.append([fmt(tau2), str(i)] + [str(int(x)) for x in report.counts[ti, i]])
        _write_rows(d / "power_counts.csv", ["tau2", "dataset"] + list(PIPELINES), rows,
                    comment=f"# target_fdr {fmt(report.target_fdr)}")
        written += [d / "power_curves.csv", d / "power_counts.csv"]
    else:
        raise ValidationError(f"unknown report kind {report.kind!r}")
    return written


def load_report(directory) -> SimReport:
    """Inverse of ``save_report``; the report kind is inferred from the files present."""
    d = Path(directory)
    if (d / "null_summary.csv").exists():
        summary = _read_rows(d / "null_summary.csv", ("pipeline", "n_datasets", "target_fdr",
                                                       "fdr", "fdr_se", "ks_stat", "ks_p"))
        hist = _read_rows(d / "null_histogram.csv", ("lo", "hi"))
        first = summary[0][1]
        rep = SimReport("null", int(first["n_datasets"]), float(first["target_fdr"]))
        for _, r in summary:
            rep.fdr[r["pipeline"]] = (float(r["fdr"]), float(r["fdr_se"]))
            rep.ks[r["pipeline"]] = (float(r["ks_stat"]), float(r["ks_p"]))
        rep.hist_edges = np.array([float(r["lo"]) for _, r in hist] + [float(hist[-1][1]["hi"])])
        for name in rep.fdr:
            rep.hist_counts[name] = np.array([int(r[name]) for _, r in hist])
        return rep
    if (d / "power_curves.csv").exists():
        curves = _read_rows(d / "power_curves.csv", ("tau2", "fdr") + PIPELINES)
        counts = _read_rows(d / "power_counts.csv", ("tau2", "dataset") + PIPELINES)
        with open(d / "power_counts.csv") as fh:
            target = float(fh.readline().split()[-1])
        tau2_grid = tuple(dict.fromkeys(float(r["tau2"]) for _, r in curves))
        thresholds = np.array(list(dict.fromkeys(float(r["fdr"]) for _, r in curves)))
        T, A = len(tau2_grid), thresholds.size
        cv = np.array([[int(r[p]) for p in PIPELINES] for _, r in curves]).reshape(T, A, -1)
        ct = np.array([[int(r[p]) for p in PIPELINES] for _, r in counts]).reshape(T, -1, len(PIPELINES))
        return SimReport("power", ct.shape[1], target, thresholds=thresholds,
                         tau2_grid=tau2_grid, curves=cv, counts=ct)
    raise ValidationError(f"{d}: no simulation report tables found")
