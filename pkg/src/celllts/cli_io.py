"""File formats and the command-line surface.

Commands: fit, predict, cellmap, simulate, mstar. Every command validates its
inputs first and exits nonzero with a single-line diagnostic on error. All
stochastic commands take --seed; identical flags and seed give byte-identical
output files.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from .cellmcd import CellMcdModel, CellPenalty
from .cellmap import render_cellmap, render_curves_svg
from .lts_ridge import LtsFit
from .numeric_core import MaskedMatrix
from .pipeline import (
    CellLtsModel,
    CellLtsOptions,
    StandardizationRecord,
    breakdown_limit_ratio,
    breakdown_mstar,
    cell_residuals,
    fit_celllts,
    predict,
)
from . import simharness

MODEL_SCHEMA = "celllts-model/1"
_MISSING_TOKENS = {"", "NA", "NaN"}


class CliError(ValueError):
    pass


# ---------------------------------------------------------------------------
# CSV

def parse_csv(path, response_column: str | None = None):
    """Read a numeric CSV with a header row into a MaskedMatrix.

    Empty fields, "NA" and "NaN" parse as missing. If ``response_column`` is
    given, that column is split off and returned as a float vector with NaN
    for its missing entries.

    Returns (X, y, response_name); y and response_name are None when no
    response column was requested.
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise CliError(f"{path}: empty file") from None
            header = [name.strip() for name in header]
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise CliError(
                        f"{path}:{lineno}: expected {len(header)} fields, "
                        f"got {len(row)}"
                    )
                rows.append(row)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    if response_column is not None and response_column not in header:
        raise CliError(f"{path}: no column named {response_column!r}")

    values = np.empty((len(rows), len(header)))
    mask = np.ones((len(rows), len(header)), dtype=bool)
    for i, row in enumerate(rows):
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell in _MISSING_TOKENS:
                values[i, j] = np.nan
                mask[i, j] = False
                continue
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise CliError(
                    f"{path}: non-numeric value {cell!r} in column "
                    f"{header[j]!r} (line {i + 2})"
                ) from None

    if response_column is None:
        return MaskedMatrix(values=values, mask=mask,
                            column_names=header), None, None
    rj = header.index(response_column)
    keep = [j for j in range(len(header)) if j != rj]
    y = np.where(mask[:, rj], values[:, rj], np.nan)
    X = MaskedMatrix(values=values[:, keep], mask=mask[:, keep],
                     column_names=[header[j] for j in keep])
    return X, y, response_column


def write_csv(path, X: MaskedMatrix, y=None, response_name: str = "y") -> None:
    """Inverse of parse_csv: missing cells become empty fields, numbers are
    written with full round-trip precision."""
    names = list(X.column_names) if X.column_names else [
        f"x{j + 1}" for j in range(X.n_cols)]
    if y is not None:
        names.append(response_name)
    lines = [",".join(names)]
    for i in range(X.n_rows):
        cells = [repr(X.values[i, j]) if X.mask[i, j] else ""
                 for j in range(X.n_cols)]
        if y is not None:
            cells.append(repr(float(y[i])) if math.isfinite(y[i]) else "")
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# model JSON

def _array(a) -> list:
    return np.asarray(a).tolist()


def serialize_model(model: CellLtsModel) -> str:
    """JSON document for a fitted model; floats round-trip bit-for-bit."""
    cov = model.cov_model
    pen = cov.penalty
    doc = {
        "schema": MODEL_SCHEMA,
        "intercept": model.intercept,
        "slopes": _array(model.slopes),
        "resid_scale": model.resid_scale,
        "case_weights": _array(model.case_weights),
        "fitted": _array(model.fitted),
        "imputed": _array(model.imputed),
        "options": model.options,
        "column_names": list(model.column_names) if model.column_names else None,
        "response_name": model.response_name,
        "standardization": {
            "column_scales": _array(model.standardization.column_scales),
            "response_scale": model.standardization.response_scale,
            "column_centers": _array(model.standardization.column_centers),
        },
        "covariance": {
            "location": _array(cov.location),
            "scatter": _array(cov.scatter),
            "cell_weights": _array(cov.cell_weights),
            "penalties": _array(cov.penalties),
            "h": cov.h,
            "eig_floor": cov.eig_floor,
            "objective_trace": list(map(float, cov.objective_trace)),
            "fixed_center": cov.fixed_center,
            "n_iterations": cov.n_iterations,
            "converged": cov.converged,
            "penalty_threshold": None if pen is None else pen.threshold,
            "penalty_ref_variances": (
                None if pen is None or pen.ref_variances is None
                else _array(pen.ref_variances)),
        },
        "lts": None if model.lts is None else {
            "slope_std": _array(model.lts.slope_std),
            "active_set": _array(model.lts.active_set),
            "objective": model.lts.objective,
            "n_csteps": model.lts.n_csteps,
            "scale_resid": model.lts.scale_resid,
            "case_weights": (None if model.lts.case_weights is None
                             else _array(model.lts.case_weights)),
        },
    }
    return json.dumps(doc, indent=1)


def deserialize_model(text: str) -> CellLtsModel:
    """Parse and validate a model document; raises CliError on a schema
    mismatch or an invalid scatter matrix."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"model file is not valid JSON: {exc}") from exc
    if doc.get("schema") != MODEL_SCHEMA:
        raise CliError(
            f"unsupported model schema {doc.get('schema')!r}, "
            f"expected {MODEL_SCHEMA!r}"
        )
    c = doc["covariance"]
    scatter = np.asarray(c["scatter"], dtype=float)
    if scatter.ndim != 2 or scatter.shape[0] != scatter.shape[1]:
        raise CliError("scatter matrix is not square")
    if not np.allclose(scatter, scatter.T, rtol=0.0, atol=0.0):
        raise CliError("scatter matrix is not symmetric")
    if np.linalg.eigvalsh(scatter)[0] <= 0.0:
        raise CliError("scatter matrix is not positive definite")
    penalty = None
    if c.get("penalty_threshold") is not None:
        penalty = CellPenalty(
            threshold=float(c["penalty_threshold"]),
            ref_variances=np.asarray(c["penalty_ref_variances"], dtype=float),
        )
    else:
        penalty = CellPenalty.from_values(np.asarray(c["penalties"], float))
    cov = CellMcdModel(
        location=np.asarray(c["location"], dtype=float),
        scatter=scatter,
        cell_weights=np.asarray(c["cell_weights"], dtype=np.int8),
        penalties=np.asarray(c["penalties"], dtype=float),
        h=int(c["h"]),
        eig_floor=float(c["eig_floor"]),
        objective_trace=list(c["objective_trace"]),
        fixed_center=bool(c["fixed_center"]),
        penalty=penalty,
        n_iterations=int(c["n_iterations"]),
        converged=bool(c["converged"]),
    )
    s = doc["standardization"]
    lts = None
    if doc.get("lts") is not None:
        ld = doc["lts"]
        lts = LtsFit(
            slope_std=np.asarray(ld["slope_std"], dtype=float),
            active_set=np.asarray(ld["active_set"], dtype=int),
            objective=float(ld["objective"]),
            n_csteps=int(ld["n_csteps"]),
            scale_resid=float(ld["scale_resid"]),
            case_weights=(None if ld["case_weights"] is None
                          else np.asarray(ld["case_weights"], dtype=np.int8)),
        )
    return CellLtsModel(
        intercept=float(doc["intercept"]),
        slopes=np.asarray(doc["slopes"], dtype=float),
        cov_model=cov,
        standardization=StandardizationRecord(
            column_scales=np.asarray(s["column_scales"], dtype=float),
            response_scale=float(s["response_scale"]),
            column_centers=np.asarray(s["column_centers"], dtype=float),
        ),
        resid_scale=float(doc["resid_scale"]),
        case_weights=np.asarray(doc["case_weights"], dtype=np.int8),
        fitted=np.asarray(doc["fitted"], dtype=float),
        imputed=np.asarray(doc["imputed"], dtype=float),
        options=doc["options"],
        lts=lts,
        column_names=(tuple(doc["column_names"])
                      if doc.get("column_names") else None),
        response_name=doc.get("response_name"),
    )


def load_model(path) -> CellLtsModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return deserialize_model(fh.read())
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# result curves

def summarize_results(rows) -> list[dict]:
    """Per (estimator, gamma) means of MD and MSE with log10 columns."""
    groups: dict[tuple[str, float], list] = {}
    for r in rows:
        groups.setdefault((r.estimator, r.gamma), []).append(r)
    out = []
    for (est, gamma) in sorted(groups):
        block = groups[(est, gamma)]
        md = np.array([r.md for r in block])
        mse = np.array([r.mse for r in block])
        mean_md = float(np.nanmean(md)) if np.isfinite(md).any() else float("nan")
        mean_mse = float(np.nanmean(mse)) if np.isfinite(mse).any() else float("nan")
        out.append({
            "estimator": est, "gamma": gamma,
            "mean_md": mean_md,
            "log10_mean_md": float(np.log10(mean_md)) if mean_md > 0 else float("nan"),
            "mean_mse": mean_mse,
            "log10_mean_mse": float(np.log10(mean_mse)) if mean_mse > 0 else float("nan"),
            "n_reps": len(block),
        })
    return out


CURVES_HEADER = ("estimator,gamma,mean_md,log10_mean_md,mean_mse,"
                 "log10_mean_mse,n_reps")


def write_curves_csv(summary, path) -> None:
    lines = [CURVES_HEADER]
    for row in summary:
        lines.append(
            f"{row['estimator']},{row['gamma']!r},{row['mean_md']!r},"
            f"{row['log10_mean_md']!r},{row['mean_mse']!r},"
            f"{row['log10_mean_mse']!r},{row['n_reps']}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def emit_curves(results_csv_path, out_csv_path, plot_svg_path=None,
                metric: str = "md") -> list[dict]:
    rows = simharness.read_results_csv(results_csv_path)
    summary = summarize_results(rows)
    write_curves_csv(summary, out_csv_path)
    if plot_svg_path is not None:
        with open(plot_svg_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(render_curves_svg(summary, metric=metric))
    return summary


# ---------------------------------------------------------------------------
# commands

def _cmd_fit(args) -> int:
    X, y, response_name = parse_csv(args.data, args.response_column)
    opts = CellLtsOptions(
        h_fraction=args.h_fraction, ridge_lambda=args.ridge_lambda,
        pair_scheme=args.pairs, k=args.k, seed=args.seed,
        flag_quantile=args.flag_quantile, n_starts=args.n_starts,
    )
    model = fit_celllts(X, y, opts)
    model.response_name = response_name
    with open(args.out_model, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_model(model) + "\n")
    print(f"fitted {X.n_rows} rows x {X.n_cols} predictors -> {args.out_model}")
    return 0


def _select_model_columns(model: CellLtsModel, X: MaskedMatrix) -> MaskedMatrix:
    """Reorder the CSV columns to the model's training layout."""
    if model.column_names is None:
        if X.n_cols != model.n_cols:
            raise CliError(
                f"expected {model.n_cols} predictor columns, got {X.n_cols}")
        return X
    names = list(X.column_names or [])
    missing = [c for c in model.column_names if c not in names]
    if missing:
        raise CliError(f"data is missing model columns: {missing}")
    idx = [names.index(c) for c in model.column_names]
    return MaskedMatrix(values=X.values[:, idx], mask=X.mask[:, idx],
                        column_names=model.column_names)


def _cmd_predict(args) -> int:
    model = load_model(args.model)
    resp = model.response_name
    X_all, y, _ = parse_csv(args.data,
                            resp if resp and _csv_has_column(args.data, resp)
                            else None)
    X = _select_model_columns(model, X_all)
    names = list(model.column_names or
                 [f"x{j + 1}" for j in range(model.n_cols)])
    header = ["yhat"] + [f"imputed_{c}" for c in names] + \
             [f"flag_{c}" for c in names]
    lines = [",".join(header)]
    for i in range(X.n_rows):
        p = predict(model, X.values[i], x_mask=X.mask[i])
        cells = [repr(p.yhat)]
        cells += [repr(float(v)) for v in p.imputed]
        cells += [str(int(w)) for w in p.cell_weights]
        lines.append(",".join(cells))
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"predicted {X.n_rows} rows -> {args.out}")
    return 0


def _csv_has_column(path, name) -> bool:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            header = next(csv.reader(fh), [])
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    return name in [c.strip() for c in header]


def _cmd_cellmap(args) -> int:
    model = load_model(args.model)
    resp = model.response_name
    label_col = args.label_column
    X_all, y, _ = parse_csv(args.data,
                            resp if resp and _csv_has_column(args.data, resp)
                            else None)
    row_labels = None
    if label_col:
        if not X_all.column_names or label_col not in X_all.column_names:
            raise CliError(f"no column named {label_col!r} for labels")
        j = X_all.column_names.index(label_col)
        row_labels = [
            repr(X_all.values[i, j]) if X_all.mask[i, j] else ""
            for i in range(X_all.n_rows)
        ]
    X = _select_model_columns(model, X_all)
    res = cell_residuals(model, X, y)
    svg = render_cellmap(res, row_labels=row_labels, top_n=args.top_n,
                         sort_by=args.sort_by)
    with open(args.out_svg, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
    print(f"cellmap -> {args.out_svg}")
    return 0


def _cmd_simulate(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = simharness.parse_config_text(fh.read())
    except OSError as exc:
        raise CliError(f"cannot read {args.config}: {exc}") from exc
    except ValueError as exc:
        raise CliError(f"{args.config}: {exc}") from exc
    if args.seed is not None:
        cfg = simharness.ExperimentConfig(
            **{**_config_dict(cfg), "seed": args.seed})
    rows = simharness.run_experiment(cfg, workers=args.workers)
    simharness.write_results_csv(rows, args.out_csv)
    print(f"{len(rows)} result rows -> {args.out_csv}")
    if args.curves_out:
        emit_curves(args.out_csv, args.curves_out, args.plot_out)
        print(f"curves -> {args.curves_out}")
    return 0


def _config_dict(cfg) -> dict:
    from dataclasses import asdict
    return asdict(cfg)


def _cmd_mstar(args) -> int:
    if args.n < 2:
        raise CliError("n must be at least 2")
    m = breakdown_mstar(args.n)
    print(f"n={args.n} mstar={m} ratio={m / args.n:.6f} "
          f"limit={breakdown_limit_ratio():.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="celllts",
        description="Robust regression with cellwise outliers, casewise "
                    "outliers, and missing values.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model from a CSV file")
    p.add_argument("--data", required=True)
    p.add_argument("--response-column", required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--h-fraction", type=float, default=0.75)
    p.add_argument("--lambda", dest="ridge_lambda", type=float, default=1e-4)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--pairs", choices=("kperm", "full"), default="kperm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-starts", type=int, default=500)
    p.add_argument("--flag-quantile", type=float, default=0.99)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("predict", help="robust predictions for new rows")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("cellmap", help="render an SVG map of cell residuals")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-svg", required=True)
    p.add_argument("--top-n", type=int, default=None)
    p.add_argument("--sort-by", choices=("abs-residual-sum", "flag-count"),
                   default="abs-residual-sum")
    p.add_argument("--label-column", default=None)
    p.set_defaults(func=_cmd_cellmap)

    p = sub.add_parser("simulate", help="run a contamination experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--curves-out", default=None)
    p.add_argument("--plot-out", default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("mstar", help="cellwise breakdown count for a sample size")
    p.add_argument("--n", type=int, required=True)
    p.set_defaults(func=_cmd_mstar)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
