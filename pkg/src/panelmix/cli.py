"""Command-line front end: CSV ingestion and the four workflows
(fit, select, ranktest, simulate) with machine-readable outputs.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Every flag can be supplied through an environment variable with prefix
PANELMIX_ (e.g. PANELMIX_SELECT_B=499).  Without --seed a seed is drawn
and printed to stderr so the run stays reproducible after the fact.
"""

from __future__ import annotations

import csv
import io
import json
import os
import secrets
import sys
import warnings

import click
import numpy as np
import pandas as pd

from ._version import __version__
from .errors import (
    DataError,
    DegenerateComponentError,
    DegeneratePartitionError,
    DimensionError,
    IllConditionedError,
    InfeasibleConstraintError,
    NonConvergenceError,
    OptimizationFailureError,
)
from .em import EmConfig, fit_mle, free_param_labels, sandwich_se
from .model import (
    ConstraintSet,
    ModelSpec,
    PanelDataset,
    free_param_count,
    params_from_dict,
    params_to_dict,
)
from .ranktest import bayesian_bootstrap_pvalue, rank_sequential_lower_bound
from .selection import information_criteria, sequential_pvalues
from .simulate import (
    DgpSpec,
    run_selection_frequency_experiment,
    run_size_power_experiment,
)

_DATA_ERRORS = (DataError, DegeneratePartitionError, DimensionError)
_NUMERIC_ERRORS = (
    NonConvergenceError,
    IllConditionedError,
    OptimizationFailureError,
    InfeasibleConstraintError,
    DegenerateComponentError,
)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def ingest_csv(path, schema=None) -> PanelDataset:
    """Long-format CSV (header id,time,y[,x1,...]) to a balanced panel.

    ``schema`` maps {id_col, time_col, y_col, x_cols}; missing keys default
    to the canonical names, with x_cols = every remaining column.  Units not
    observed in every distinct period are dropped with a count warning.
    Non-numeric covariates are one-hot encoded (first level dropped).
    """
    schema = dict(schema or {})
    df = pd.read_csv(path)
    id_col = schema.get("id_col", "id")
    time_col = schema.get("time_col", "time")
    y_col = schema.get("y_col", "y")
    for col in (id_col, time_col, y_col):
        if col not in df.columns:
            raise DataError(f"missing column {col!r} in {path}")
    x_cols = schema.get("x_cols")
    if x_cols is None:
        x_cols = [c for c in df.columns if c not in (id_col, time_col, y_col)]
    else:
        x_cols = list(x_cols)
        missing = [c for c in x_cols if c not in df.columns]
        if missing:
            raise DataError(f"missing covariate columns {missing}")

    if df.duplicated([id_col, time_col]).any():
        raise DataError("duplicate (id, time) rows")
    y_num = pd.to_numeric(df[y_col], errors="coerce")
    if y_num.isna().any():
        raise DataError("non-numeric or missing y values")
    df = df.assign(**{y_col: y_num})

    # one-hot encode non-numeric covariates, first level dropped
    enc_cols = []
    for c in x_cols:
        if pd.api.types.is_numeric_dtype(df[c]):
            enc_cols.append(c)
        else:
            dummies = pd.get_dummies(df[c], prefix=c, drop_first=True,
                                     dtype=float)
            df = pd.concat([df, dummies], axis=1)
            enc_cols.extend(dummies.columns)
    x_cols = enc_cols

    times = sorted(df[time_col].unique())
    T = len(times)
    counts = df.groupby(id_col)[time_col].nunique()
    keep_ids = counts.index[counts == T]
    n_dropped = int(counts.size - keep_ids.size)
    if n_dropped:
        warnings.warn(f"dropped {n_dropped} unit(s) with incomplete periods")
    if keep_ids.size == 0:
        raise DataError("no unit observed in every period")
    df = df[df[id_col].isin(keep_ids)].sort_values([id_col, time_col])

    n = keep_ids.size
    y = df[y_col].to_numpy(dtype=float).reshape(n, T)
    x = None
    if x_cols:
        x = df[x_cols].to_numpy(dtype=float).reshape(n, T, len(x_cols))
    unit_ids = tuple(df[id_col].iloc[::T])
    return PanelDataset(y=y, x=x, unit_ids=unit_ids,
                        x_names=tuple(x_cols) if x_cols else None)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _resolve_seed(seed):
    if seed is None:
        seed = secrets.randbits(31)
        click.echo(f"seed: {seed}", err=True)
    return int(seed)


def _parse_family(name: str):
    key = name.strip().lower()
    if key == "normal":
        return "normal", 1
    if key.startswith("mixture"):
        digits = key[len("mixture"):]
        K = int(digits) if digits else 2
        if K < 2:
            raise click.UsageError("mixture family needs K >= 2")
        return "mixture", K
    raise click.UsageError(f"unknown error family {name!r}")


def _schema_from_flags(id_col, time_col, y_col, x_cols):
    schema = {"id_col": id_col, "time_col": time_col, "y_col": y_col}
    if x_cols is not None:
        schema["x_cols"] = [c for c in x_cols.split(",") if c] \
            if x_cols else []
    return schema


def _em_config(restarts, max_iter, tol, seed, c1, tau_floor,
               sigma_floor_mult):
    constraints = ConstraintSet(c1=c1, tau_floor=tau_floor,
                                sigma_floor_mult=sigma_floor_mult)
    return EmConfig(max_iter=max_iter, tol=tol, n_restarts=restarts,
                    seed=seed, constraints=constraints)


def _emit(payload: dict, out: str | None):
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
        click.echo(f"wrote {out}", err=True)
    else:
        click.echo(text, nl=False)


def _guard(fn, json_errors=False):
    """Run a command body, mapping library errors to exit codes."""
    try:
        fn()
        return 0
    except _DATA_ERRORS as e:
        code = 3
        err = e
    except _NUMERIC_ERRORS as e:
        code = 4
        err = e
    if json_errors:
        click.echo(json.dumps({
            "error": type(err).__name__, "message": str(err),
            "exit_code": code,
        }, sort_keys=True))
    click.echo(f"error: {err}", err=True)
    sys.exit(code)


_CTX = {"auto_envvar_prefix": "PANELMIX",
        "help_option_names": ["-h", "--help"]}


def _common_data_flags(f):
    f = click.option("--x-cols", default=None,
                     help="Comma-separated covariate columns "
                          "(default: all remaining).")(f)
    f = click.option("--y-col", default="y", show_default=True)(f)
    f = click.option("--time-col", default="time", show_default=True)(f)
    f = click.option("--id-col", default="id", show_default=True)(f)
    f = click.option("--data", "data_path", required=True,
                     type=click.Path(exists=True, dir_okay=False),
                     help="Long-format CSV id,time,y[,x...].")(f)
    return f


def _common_em_flags(f):
    f = click.option("--sigma-floor-mult", default=0.05, show_default=True)(f)
    f = click.option("--tau-floor", default=0.05, show_default=True)(f)
    f = click.option("--c1", default=0.05, show_default=True,
                     help="Mixing-weight floor.")(f)
    f = click.option("--tol", default=1e-8, show_default=True)(f)
    f = click.option("--max-iter", default=2000, show_default=True)(f)
    f = click.option("--restarts", default=10, show_default=True)(f)
    return f


@click.group(context_settings=_CTX)
@click.version_option(__version__)
def main():
    """Finite mixture panel regression: estimation and component-count
    selection."""


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


@main.command("fit")
@_common_data_flags
@click.option("--m", "--M", "M", type=int, required=True,
              help="Number of components.")
@click.option("--error-family", default="normal", show_default=True,
              help="normal or mixtureK (e.g. mixture2).")
@click.option("--dynamics", default="ci", show_default=True,
              type=click.Choice(["ci", "ar1"]))
@_common_em_flags
@click.option("--se", is_flag=True, help="Add sandwich standard errors.")
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None,
              help="Worker processes (default: all cores).")
@click.option("--json-errors", is_flag=True)
@click.option("--out", default=None, help="Output JSON path (default stdout).")
def cmd_fit(data_path, id_col, time_col, y_col, x_cols, M, error_family,
            dynamics, restarts, max_iter, tol, c1, tau_floor,
            sigma_floor_mult, se, seed, threads, json_errors, out):
    """Constrained MLE of an M-component model."""

    def body():
        seed_ = _resolve_seed(seed)
        data = ingest_csv(data_path, _schema_from_flags(
            id_col, time_col, y_col, x_cols))
        family, K = _parse_family(error_family)
        spec = ModelSpec(family, dynamics, K=K, q_x=data.q_x)
        config = _em_config(restarts, max_iter, tol, seed_, c1, tau_floor,
                            sigma_floor_mult)
        fit = fit_mle(data, M, spec, config)
        result = {
            "M": M,
            "loglik": fit.loglik,
            "converged": fit.converged,
            "n_iter": fit.n_iter,
            "restart_logliks": list(fit.restart_logliks),
            "k_M": free_param_count(M, spec),
            "params": params_to_dict(fit.params),
            "sigma0_hat": fit.sigma0_hat,
        }
        if se:
            values = sandwich_se(data, fit, spec)
            labels = free_param_labels(M, spec)
            result["se"] = {lab: float(v) for lab, v in zip(labels, values)}
        _emit({
            "command": "fit", "version": __version__, "seed": seed_,
            "config": {
                "data": os.path.basename(data_path), "M": M,
                "error_family": error_family, "dynamics": dynamics,
                "restarts": restarts, "max_iter": max_iter, "tol": tol,
                "c1": c1, "tau_floor": tau_floor,
                "sigma_floor_mult": sigma_floor_mult,
            },
            "result": result,
        }, out)

    _guard(body, json_errors)


# ---------------------------------------------------------------------------
# select
# ---------------------------------------------------------------------------


@main.command("select")
@_common_data_flags
@click.option("--m-max", "--M-max", "M_max", type=int, default=6,
              show_default=True)
@click.option("--q", type=float, default=0.05, show_default=True,
              help="Sequential test level q_n.")
@click.option("--b", "--B", "B", type=int, default=199, show_default=True)
@click.option("--error-family", default="normal", show_default=True)
@click.option("--dynamics", default="ci", show_default=True,
              type=click.Choice(["ci", "ar1"]))
@click.option("--crit", default="bootstrap", show_default=True,
              type=click.Choice(["bootstrap", "asymptotic"]))
@_common_em_flags
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None)
@click.option("--json-errors", is_flag=True)
@click.option("--out", default="select", show_default=True,
              help="Output prefix (<out>.json, <out>_per_M.csv).")
def cmd_select(data_path, id_col, time_col, y_col, x_cols, M_max, q, B,
               error_family, dynamics, crit, restarts, max_iter, tol, c1,
               tau_floor, sigma_floor_mult, seed, threads, json_errors, out):
    """Sequential LRT plus AIC/BIC choice of the component count."""

    def body():
        seed_ = _resolve_seed(seed)
        n_jobs = threads or (os.cpu_count() or 1)
        data = ingest_csv(data_path, _schema_from_flags(
            id_col, time_col, y_col, x_cols))
        family, K = _parse_family(error_family)
        spec = ModelSpec(family, dynamics, K=K, q_x=data.q_x)
        config = _em_config(restarts, max_iter, tol, seed_, c1, tau_floor,
                            sigma_floor_mult)
        fits, test_rows = sequential_pvalues(
            data, M_max, spec, B, config, seed_, crit_source=crit,
            q_stop=q, n_jobs=n_jobs,
        )
        chosen_lrt = M_max
        for row in test_rows:
            if row["p_value"] > q:
                chosen_lrt = row["m"]
                break
        ic = information_criteria(fits, data.n, spec)
        tests = {r["m"]: r for r in test_rows}
        per_M = []
        for row in ic.per_M:
            row = dict(row)
            t = tests.get(row["M"])
            if t:
                row.update(lrt_stat=t["lrt_stat"], p_value=t["p_value"],
                           critical_value=t["critical_value"])
            per_M.append(row)
        chosen = {"lrt": chosen_lrt, **ic.chosen}

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["M", "loglik", "k_M", "aic", "bic", "lrt_stat", "p_value",
                "critical_value"]
        w.writerow(cols)
        for row in per_M:
            w.writerow([row.get(c, "") for c in cols])
        with open(f"{out}_per_M.csv", "w", encoding="utf-8") as fh:
            fh.write(buf.getvalue())
        _emit({
            "command": "select", "version": __version__, "seed": seed_,
            "config": {
                "data": os.path.basename(data_path), "M_max": M_max,
                "q": q, "B": B, "error_family": error_family,
                "dynamics": dynamics, "crit": crit, "restarts": restarts,
                "max_iter": max_iter, "tol": tol, "c1": c1,
                "tau_floor": tau_floor,
                "sigma_floor_mult": sigma_floor_mult,
            },
            "result": {"chosen": chosen, "q_n": q, "B": B, "per_M": per_M},
        }, f"{out}.json")

    _guard(body, json_errors)


# ---------------------------------------------------------------------------
# ranktest
# ---------------------------------------------------------------------------


@main.command("ranktest")
@_common_data_flags
@click.option("--r", type=int, default=None,
              help="Test H0: rank <= r at this single r.")
@click.option("--r-max", type=int, default=None,
              help="Sequential lower bound up to this r.")
@click.option("--level", type=float, default=0.05, show_default=True)
@click.option("--b", "--B", "B", type=int, default=199, show_default=True)
@click.option("--statistic", default="max", show_default=True,
              type=click.Choice(["max", "ave"]))
@click.option("--construction", default="square", show_default=True,
              type=click.Choice(["square", "khatri_rao"]))
@click.option("--seed", type=int, default=None)
@click.option("--json-errors", is_flag=True)
@click.option("--out", default=None, help="Output JSON path (default stdout).")
def cmd_ranktest(data_path, id_col, time_col, y_col, x_cols, r, r_max, level,
                 B, statistic, construction, seed, json_errors, out):
    """Nonparametric rank lower bound on the component count."""
    if (r is None) == (r_max is None):
        raise click.UsageError("pass exactly one of --r or --r-max")

    def body():
        seed_ = _resolve_seed(seed)
        data = ingest_csv(data_path, _schema_from_flags(
            id_col, time_col, y_col, x_cols))

        def res_dict(res):
            return {
                "r": res.r, "per_k": list(res.per_k), "ave": res.ave,
                "max": res.max, "df": res.df, "p_value": res.p_value,
                "p_value_ave": res.p_value_ave, "B": res.B,
                "n_degenerate": res.n_degenerate,
                "construction": res.construction,
            }

        if r is not None:
            res = bayesian_bootstrap_pvalue(data, r, B, seed_,
                                            construction=construction)
            result = res_dict(res)
        else:
            r_hat, details = rank_sequential_lower_bound(
                data, r_max, level=level, B=B, seed=seed_,
                statistic=statistic, construction=construction, full=True,
            )
            result = {
                "lower_bound": int(r_hat), "statistic": statistic,
                "level": level, "per_r": [res_dict(d) for d in details],
            }
        _emit({
            "command": "ranktest", "version": __version__, "seed": seed_,
            "config": {
                "data": os.path.basename(data_path), "r": r, "r_max": r_max,
                "level": level, "B": B, "statistic": statistic,
                "construction": construction,
            },
            "result": result,
        }, out)

    _guard(body, json_errors)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


_SIZE_POWER_DESIGNS = ("table1", "table2")


def _load_custom_dgp(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    spec = ModelSpec(**d["spec"])
    return DgpSpec(params=params_from_dict(d["params"]), spec=spec,
                   n=int(d["n"]), T=int(d["T"]),
                   covariate_law=d.get("covariate_law"))


def _write_plot_data(report, out):
    """Bar data (method, family, x, y) and, when available, the LR
    p-value histogram, as small plot-ready CSVs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "family", "x", "y"])
    for row in report.rows:
        for label, val in zip(report.columns, row["values"]):
            w.writerow([row["method"], row.get("family") or "", label,
                        repr(float(val))])
    with open(f"{out}_bars.csv", "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    pvals = report.detail.get("lr_pvalues")
    if pvals:
        counts, edges = np.histogram(np.asarray(pvals), bins=20,
                                     range=(0.0, 1.0))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for i, c in enumerate(counts):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])),
                        int(c)])
        with open(f"{out}_lr_pvalue_hist.csv", "w", encoding="utf-8") as fh:
            fh.write(buf.getvalue())


@main.command("simulate")
@click.option("--design", required=True,
              help="table1, table2, tableA1_normal, tableA2_mixture, "
                   "tableA3_ar1, or custom.")
@click.option("--reps", type=int, required=True)
@click.option("--b", "--B", "B", type=int, default=99, show_default=True)
@click.option("--q", type=float, default=0.05, show_default=True,
              help="Test level for size/power designs.")
@click.option("--q-levels", default="0.01,0.05,0.10", show_default=True,
              help="Sequential-LRT levels for selection designs.")
@click.option("--n", type=int, default=None, help="Override design n.")
@click.option("--t", "--T", "T", type=int, default=None,
              help="Override design T.")
@click.option("--m-max", "--M-max", "M_max", type=int, default=6,
              show_default=True)
@click.option("--methods", default="aic,bic,lr,averk,maxrk",
              show_default=True)
@click.option("--families", default=None,
              help="Fitting families, e.g. normal,mixture "
                   "(default: design-dependent).")
@click.option("--kind", default=None,
              type=click.Choice(["size_power", "selection"]),
              help="Driver for --design custom.")
@click.option("--dgp-json", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Custom DgpSpec JSON.")
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None)
@click.option("--json-errors", is_flag=True)
@click.option("--out", default="simulate", show_default=True,
              help="Output prefix.")
def cmd_simulate(design, reps, B, q, q_levels, n, T, M_max, methods,
                 families, kind, dgp_json, seed, threads, json_errors, out):
    """Run a Monte Carlo experiment and write its report files."""

    def body():
        seed_ = _resolve_seed(seed)
        n_jobs = threads or (os.cpu_count() or 1)
        key = design.lower()
        dgp = _load_custom_dgp(dgp_json) if key == "custom" and dgp_json \
            else None
        if key == "custom" and dgp is None:
            raise click.UsageError("--design custom requires --dgp-json")
        if key in _SIZE_POWER_DESIGNS or (key == "custom" and
                                          kind == "size_power"):
            report = run_size_power_experiment(
                design, reps, B=B, q=q, seed=seed_, dgp=dgp, n=n,
                n_jobs=n_jobs,
            )
        else:
            qs = tuple(float(v) for v in q_levels.split(",") if v)
            fams = tuple(f for f in families.split(",") if f) \
                if families else None
            report = run_selection_frequency_experiment(
                design, reps, methods=tuple(methods.split(",")),
                seed=seed_, dgp=dgp, n=n, T=T, B=B, q_levels=qs,
                M_bar=M_max, families=fams, n_jobs=n_jobs,
            )
        with open(f"{out}.json", "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        with open(f"{out}.csv", "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        _write_plot_data(report, out)
        click.echo(f"wrote {out}.json / {out}.csv", err=True)

    _guard(body, json_errors)


if __name__ == "__main__":
    main()
