"""Simulation harness: panel DGPs, size/power experiments, and
selection-frequency experiments with deterministic seeding.

Built-in designs mirror the Monte Carlo tables the package is meant to
reproduce; ``custom`` designs take an explicit DgpSpec.  Every replicate
draws from its own spawned Philox stream keyed by (master seed, replicate
index), so reports are byte-identical across runs and worker counts.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from ._version import __version__ as _pkg_version
from .errors import (
    DataError,
    DegeneratePartitionError,
    DimensionError,
    IllConditionedError,
    NonConvergenceError,
)
from .em import EmConfig
from .model import ComponentParams, MixtureParams, ModelSpec, PanelDataset
from .ranktest import bayesian_bootstrap_pvalue
from .selection import (
    _fit_chain,
    information_criteria,
    parametric_bootstrap_pvalue,
    sequential_pvalues,
)


@dataclass(frozen=True)
class DgpSpec:
    """A complete data-generating design: parameters, model class, and
    panel shape.  ``covariate_law`` is None (no x) or "standard_normal"."""

    params: MixtureParams
    spec: ModelSpec
    n: int
    T: int
    covariate_law: str | None = None

    def __post_init__(self):
        if self.n < 1 or self.T < 2:
            raise DimensionError("need n >= 1 and T >= 2")
        if self.spec.q_x > 0 and self.covariate_law != "standard_normal":
            raise DimensionError(
                "q_x > 0 requires covariate_law='standard_normal'"
            )
        if self.spec.is_dynamic and self.params.components[0].rho is None:
            raise DimensionError("ar1 spec needs dynamic parameters")


def simulate_panel(dgp: DgpSpec, seed) -> PanelDataset:
    """Draw one balanced panel.

    Fixed draw order (component labels, then inner cells, then shocks,
    then covariates) keeps streams reproducible; the AR(1) first period
    comes from the explicit initial-period parameters, not the stationary
    law.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.Philox(ss))
    p = dgp.params
    n, T, M, K = dgp.n, dgp.T, p.M, p.K

    alpha_cum = np.cumsum(p.alpha)
    D = np.searchsorted(alpha_cum, rng.random(n), side="right")
    D = np.clip(D, 0, M - 1)
    tau = np.stack([c.tau for c in p.components])          # (M, K)
    tau_cum = np.cumsum(tau, axis=1)[D]                    # (n, K)
    u = rng.random((n, T))
    C = np.clip(
        (tau_cum[:, None, :] < u[:, :, None]).sum(axis=2), 0, K - 1
    )
    eps = rng.standard_normal((n, T))
    q_x = dgp.spec.q_x
    x = rng.standard_normal((n, T, q_x)) if q_x else None

    mu = np.stack([c.mu for c in p.components])            # (M, K)
    sig = np.sqrt(np.array([c.sigma2 for c in p.components]))
    beta = np.stack([c.beta for c in p.components]) if q_x else None

    y = np.empty((n, T))
    if not dgp.spec.is_dynamic:
        for t in range(T):
            y[:, t] = mu[D, C[:, t]] + sig[D] * eps[:, t]
            if q_x:
                y[:, t] += np.einsum("nq,nq->n", x[:, t, :], beta[D])
    else:
        rho = np.array([c.rho for c in p.components])
        mu1 = np.stack([c.mu1 for c in p.components])
        sig1 = np.sqrt(np.array([c.sigma2_1 for c in p.components]))
        beta1 = np.stack([c.beta1 for c in p.components]) if q_x else None
        y[:, 0] = mu1[D, C[:, 0]] + sig1[D] * eps[:, 0]
        if q_x:
            y[:, 0] += np.einsum("nq,nq->n", x[:, 0, :], beta1[D])
        for t in range(1, T):
            level = (1.0 - rho[D]) * mu[D, C[:, t]]
            y[:, t] = rho[D] * y[:, t - 1] + level + sig[D] * eps[:, t]
            if q_x:
                dx = x[:, t, :] - rho[D][:, None] * x[:, t - 1, :]
                y[:, t] += np.einsum("nq,nq->n", dx, beta[D])
    unit_ids = tuple(range(1, n + 1))
    x_names = tuple(f"x{j + 1}" for j in range(q_x)) if q_x else None
    return PanelDataset(y=y, x=x, unit_ids=unit_ids, x_names=x_names)


# ---------------------------------------------------------------------------
# built-in designs
# ---------------------------------------------------------------------------


def _static_normal(alpha, mu, sigma):
    comps = tuple(
        ComponentParams(mu=[m], sigma2=s * s) for m, s in zip(mu, sigma)
    )
    return MixtureParams(alpha=np.asarray(alpha, dtype=float),
                         components=comps)


def _static_mixture(alpha, tau, mu, sigma):
    comps = tuple(
        ComponentParams(mu=mu_j, sigma2=s * s, tau=tau_j)
        for tau_j, mu_j, s in zip(tau, mu, sigma)
    )
    return MixtureParams(alpha=np.asarray(alpha, dtype=float),
                         components=comps)


def _ar1_normal(alpha, mu, rho, sigma, mu0, sigma0):
    comps = tuple(
        ComponentParams(mu=[m], sigma2=s * s, rho=r, mu1=[m0],
                        sigma2_1=s0 * s0)
        for m, r, s, m0, s0 in zip(mu, rho, sigma, mu0, sigma0)
    )
    return MixtureParams(alpha=np.asarray(alpha, dtype=float),
                         components=comps)


def _ar1_mixture(alpha, tau, mu, rho, sigma, mu0, sigma0):
    comps = tuple(
        ComponentParams(mu=mu_j, sigma2=s * s, tau=tau_j, rho=r,
                        mu1=mu0_j, sigma2_1=s0 * s0)
        for tau_j, mu_j, r, s, mu0_j, s0
        in zip(tau, mu, rho, sigma, mu0, sigma0)
    )
    return MixtureParams(alpha=np.asarray(alpha, dtype=float),
                         components=comps)


def builtin_design(name: str, n: int | None = None, T: int | None = None
                   ) -> DgpSpec:
    """Named Monte Carlo designs; ``n``/``T`` override the defaults."""
    key = name.lower()
    if key == "table1":
        params = _static_normal([0.5, 0.5], [-1.0, 1.0], [0.8, 1.2])
        spec = ModelSpec("normal", "ci")
        return DgpSpec(params, spec, n or 400, T or 3)
    if key == "table2":
        params = _static_normal([1 / 3, 1 / 3, 1 / 3], [-1.5, 0.0, 1.5],
                                [1.0, 1.0, 1.0])
        spec = ModelSpec("normal", "ci")
        return DgpSpec(params, spec, n or 400, T or 3)
    if key in ("tablea1_normal", "table3"):
        params = _static_normal(
            [0.352, 0.402, 0.245] / np.sum([0.352, 0.402, 0.245]),
            [-1.01, -0.557, -0.242], [0.464, 0.187, 0.195],
        )
        spec = ModelSpec("normal", "ci")
        return DgpSpec(params, spec, n or 225, T or 3)
    if key in ("tablea2_mixture", "table4"):
        params = _static_mixture(
            [0.275, 0.247, 0.478],
            [[0.818, 0.182], [0.621, 0.379], [0.105, 0.895]],
            [[-1.099, -1.04], [-0.249, -0.232], [-0.992, -0.539]],
            [0.465, 0.197, 0.178],
        )
        spec = ModelSpec("mixture", "ci", K=2)
        return DgpSpec(params, spec, n or 225, T or 3)
    if key in ("tablea3_ar1", "tablea3"):
        params = _ar1_normal(
            [0.359, 0.641], [-0.883, -0.419], [0.472, 0.579],
            [0.465, 0.208], [-0.991, -0.499], [0.476, 0.269],
        )
        spec = ModelSpec("normal", "ar1")
        return DgpSpec(params, spec, n or 225, T or 5)
    if key in ("tablea4_ar1_mixture", "tablea4"):
        params = _ar1_mixture(
            [0.314, 0.686],
            [[0.159, 0.841], [0.626, 0.374]],
            [[-1.369, -0.874], [-0.435, -0.409]],
            [0.342, 0.565], [0.463, 0.217],
            [[-1.047, -1.038], [-0.512, -0.504]], [0.466, 0.281],
        )
        spec = ModelSpec("mixture", "ar1", K=2)
        return DgpSpec(params, spec, n or 225, T or 5)
    raise DimensionError(f"unknown design {name!r}")


_DESIGN_NULL_M = {"table1": 2, "table2": 2}     # H0 component count tested


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentReport:
    """Tabulated experiment output.

    ``rows`` hold dicts {method, family, values}; ``values`` aligns with
    ``columns``.  ``runtimes`` and ``detail`` (plot-ready per-replicate
    numbers) are in-memory only and never serialized, so identical seeds
    give identical bytes.
    """

    design: str
    replications: int
    columns: tuple
    rows: tuple
    seed: int
    config: dict = field(default_factory=dict)
    runtimes: dict = field(default_factory=dict)
    detail: dict = field(default_factory=dict)
    version: str = _pkg_version

    def to_json(self) -> str:
        payload = {
            "design": self.design,
            "replications": self.replications,
            "columns": list(self.columns),
            "rows": [dict(r) for r in self.rows],
            "seed": self.seed,
            "config": self.config,
            "version": self.version,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "family", *self.columns])
        for r in self.rows:
            fam = r.get("family") or ""
            w.writerow([r["method"], fam,
                        *[repr(float(v)) for v in r["values"]]])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# size / power experiment
# ---------------------------------------------------------------------------


def _size_power_rep(dgp, M0, B, q, em_config, ss):
    data = simulate_panel(dgp, ss)
    sub = ss.spawn(2)
    out = {}
    fits = _fit_chain(data, M0 + 1, dgp.spec, em_config)
    fit0, fit1 = fits[M0 - 1], fits[M0]
    p, _, _ = parametric_bootstrap_pvalue(
        data, fit0, dgp.spec, B, em_config, sub[0], fit_M1=fit1,
    )
    out["lr"] = p <= q
    out["lr_p"] = p
    try:
        rk = bayesian_bootstrap_pvalue(data, M0, B, sub[1])
        out["max-rk"] = rk.p_value < q
        out["ave-rk"] = rk.p_value_ave < q
    except (DegeneratePartitionError, IllConditionedError):
        out["max-rk"] = np.nan
        out["ave-rk"] = np.nan
    ic = information_criteria([fit0, fit1], data.n, dgp.spec)
    out["aic"] = ic.chosen["aic"] == M0 + 1
    out["bic"] = ic.chosen["bic"] == M0 + 1
    return out


def run_size_power_experiment(design: str, reps: int, B: int = 99,
                              q: float = 0.05, seed=0,
                              dgp: DgpSpec | None = None,
                              n: int | None = None,
                              em_config: EmConfig | None = None,
                              n_jobs: int = 1) -> ExperimentReport:
    """Rejection/selection rates for H0: M=2 against M=3.

    LR uses the parametric bootstrap at level q; the rank tests use the
    Bayesian bootstrap (strict p < q); AIC/BIC rows report how often the
    criterion picks M=3 over M=2.  Rates are percents over ``reps``.
    """
    if reps < 1:
        raise DimensionError("reps must be >= 1")
    key = design.lower()
    if key == "custom":
        if dgp is None:
            raise DimensionError("custom design requires a DgpSpec")
    else:
        if key not in _DESIGN_NULL_M:
            raise DimensionError(
                f"size/power designs are table1/table2/custom, got {design!r}"
            )
        dgp = builtin_design(key, n=n)
    M0 = 2
    em_config = em_config or EmConfig()
    seeds = np.random.SeedSequence(seed).spawn(reps)

    if n_jobs == 1:
        results = [_size_power_rep(dgp, M0, B, q, em_config, s)
                   for s in seeds]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_size_power_rep)(dgp, M0, B, q, em_config, s)
            for s in seeds
        )
    methods = ["lr", "ave-rk", "max-rk", "aic", "bic"]
    rows = []
    for m in methods:
        vals = np.array([r[m] for r in results], dtype=float)
        ok = vals[~np.isnan(vals)]
        rate = 100.0 * float(ok.mean()) if ok.size else float("nan")
        rows.append({"method": m, "family": None, "values": [rate]})
    return ExperimentReport(
        design=design, replications=reps, columns=("rate_pct",),
        rows=tuple(rows), seed=int(seed),
        config={"B": B, "q": q, "n": dgp.n, "T": dgp.T, "null_M": M0},
        detail={"lr_pvalues": [float(r["lr_p"]) for r in results]},
    )


# ---------------------------------------------------------------------------
# selection-frequency experiment
# ---------------------------------------------------------------------------


def _fit_spec_for(family: str, dgp: DgpSpec) -> ModelSpec:
    if family == "normal":
        return ModelSpec("normal", dgp.spec.dynamics, K=1, q_x=dgp.spec.q_x)
    if family == "mixture":
        return ModelSpec("mixture", dgp.spec.dynamics, K=2, q_x=dgp.spec.q_x)
    raise DimensionError(f"unknown fit family {family!r}")


def _rank_sequential_both(data, r_max, level, B, ss):
    """One bootstrap pass per r serving both the ave and max statistics."""
    seeds = ss.spawn(r_max)
    chosen = {"ave-rk": r_max + 1, "max-rk": r_max + 1}
    open_max, open_ave = True, True
    for r in range(1, r_max + 1):
        if not (open_max or open_ave):
            break
        res = bayesian_bootstrap_pvalue(data, r, B, seeds[r - 1])
        if open_max and not res.p_value < level:
            chosen["max-rk"] = r
            open_max = False
        if open_ave and not res.p_value_ave < level:
            chosen["ave-rk"] = r
            open_ave = False
    return chosen


def _selection_rep(dgp, families, methods, M_bar, B, q_levels, rank_level,
                   em_config, ss):
    data = simulate_panel(dgp, ss)
    sub = ss.spawn(len(families) + 1)
    out = {}
    q_stop = max(q_levels) if q_levels else 0.0
    for fi, family in enumerate(families):
        fit_spec = _fit_spec_for(family, dgp)
        want_lr = "lr" in methods
        if want_lr:
            fits, rows = sequential_pvalues(
                data, M_bar, fit_spec, B, em_config, sub[fi],
                q_stop=q_stop,
            )
            for q in q_levels:
                m_hat = M_bar
                for row in rows:
                    if row["p_value"] > q:
                        m_hat = row["m"]
                        break
                out[(f"lr_{q:g}", family)] = m_hat
        else:
            fits = _fit_chain(data, M_bar, fit_spec, em_config)
        ic = information_criteria(fits, data.n, fit_spec)
        if "aic" in methods:
            out[("aic", family)] = ic.chosen["aic"]
        if "bic" in methods:
            out[("bic", family)] = ic.chosen["bic"]
    if "averk" in methods or "maxrk" in methods:
        rk = _rank_sequential_both(data, M_bar - 1, rank_level, B, sub[-1])
        if "averk" in methods:
            out[("ave-rk", None)] = rk["ave-rk"]
        if "maxrk" in methods:
            out[("max-rk", None)] = rk["max-rk"]
    return out


def run_selection_frequency_experiment(
    design: str, reps: int, methods=("aic", "bic", "lr", "averk", "maxrk"),
    seed=0, dgp: DgpSpec | None = None, n: int | None = None,
    T: int | None = None, B: int = 99, q_levels=(0.01, 0.05, 0.10),
    M_bar: int = 6, families=None, rank_level: float = 0.05,
    em_config: EmConfig | None = None, n_jobs: int = 1,
) -> ExperimentReport:
    """Selection-frequency table: how often each method picks each M.

    ``methods`` may contain aic, bic, lr (sequential LRT at each level in
    ``q_levels``), averk, maxrk.  Model-based methods run once per fitting
    family ("normal", "mixture"); the rank rows are family-free.  Values
    are percents per M = 1..M_bar; each row sums to 100.
    """
    if reps < 1:
        raise DimensionError("reps must be >= 1")
    key = design.lower()
    if key == "custom":
        if dgp is None:
            raise DimensionError("custom design requires a DgpSpec")
    else:
        dgp = builtin_design(key, n=n, T=T)
    if families is None:
        families = ("normal", "mixture") if dgp.spec.error_family == "mixture" \
            else ("normal",)
    bad = set(methods) - {"aic", "bic", "lr", "averk", "maxrk"}
    if bad:
        raise DimensionError(f"unknown methods {sorted(bad)}")
    em_config = em_config or EmConfig()
    seeds = np.random.SeedSequence(seed).spawn(reps)

    if n_jobs == 1:
        results = [
            _selection_rep(dgp, families, methods, M_bar, B, q_levels,
                           rank_level, em_config, s)
            for s in seeds
        ]
    else:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_selection_rep)(dgp, families, methods, M_bar, B,
                                    q_levels, rank_level, em_config, s)
            for s in seeds
        )

    columns = tuple(f"M={m}" for m in range(1, M_bar + 1)) + (f"M>{M_bar}",)
    keys = list(results[0].keys())
    rows = []
    for method, family in keys:
        picks = np.array([r[(method, family)] for r in results])
        vals = [100.0 * float(np.mean(picks == m))
                for m in range(1, M_bar + 1)]
        vals.append(100.0 * float(np.mean(picks > M_bar)))
        rows.append({"method": method, "family": family, "values": vals})
    return ExperimentReport(
        design=design, replications=reps, columns=columns, rows=tuple(rows),
        seed=int(seed),
        config={
            "B": B, "q_levels": list(q_levels), "M_bar": M_bar,
            "families": list(families), "rank_level": rank_level,
            "n": dgp.n, "T": dgp.T, "methods": list(methods),
        },
    )
