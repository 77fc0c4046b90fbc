"""Choosing the number of components: LRT with parametric bootstrap,
sequential testing, and penalized likelihood (AIC/BIC).

The sequential procedure tests H0: M=m against m+1 for m = 1, 2, ... and
stops at the first non-rejection.  Bootstrap p-values use the
(1 + count)/(B + 1) convention; a test rejects when p <= q_n.  Since the
per-m p-value does not depend on q_n, one pass yields the selection for
every level at once (the experiment drivers rely on this).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from joblib import Parallel, delayed

from .errors import (
    DegenerateComponentError,
    DimensionError,
    NonConvergenceError,
    OptimizationFailureError,
)
from .em import (
    EmConfig,
    FitResult,
    _duplicate_component,
    _jitter,
    _quantile_init,
    _split_component,
    fit_mle,
)
from .model import ModelSpec, PanelDataset, free_param_count

_LRT_SLACK = -1e-6


def _as_seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


@dataclass(frozen=True)
class SelectionResult:
    """Per-M fit summaries plus the M chosen by each method.

    per_M rows are dicts with keys M, loglik, k_M, aic, bic and, when a
    test was run at that M, lrt_stat, p_value, critical_value.
    """

    per_M: tuple
    chosen: dict
    q_n: float | None = None
    B: int | None = None

    def row(self, M: int) -> dict:
        for r in self.per_M:
            if r["M"] == M:
                return r
        raise KeyError(M)


def count_parameters(M: int, spec: ModelSpec) -> int:
    """Number of estimated parameters k_M of the M-component model."""
    return free_param_count(M, spec)


def lrt_statistic(fit_M: FitResult, fit_M1: FitResult,
                  data: PanelDataset | None = None,
                  spec: ModelSpec | None = None,
                  config: EmConfig | None = None) -> float:
    """2(l_{M+1} - l_M).

    A value below -1e-6 signals that the larger fit missed its optimum;
    when (data, spec, config) are supplied the larger model is refit from
    splits of each component of fit_M before giving up.
    """
    if fit_M1.params.M != fit_M.params.M + 1:
        raise DimensionError("fits must differ by exactly one component")
    stat = 2.0 * (fit_M1.loglik - fit_M.loglik)
    if stat >= _LRT_SLACK:
        return float(stat)
    if data is None or spec is None or config is None:
        raise OptimizationFailureError(
            f"negative LRT {stat:.3e} and no data to attempt recovery"
        )
    best = fit_M1.loglik
    inits = [_split_component(fit_M.params, h)
             for h in range(fit_M.params.M)]
    inits.append(_duplicate_component(
        fit_M.params, int(np.argmax(fit_M.params.alpha))
    ))
    try:
        refit = fit_mle(data, fit_M.params.M + 1, spec, config,
                        init_params=inits, sigma0_hat=fit_M.sigma0_hat)
        best = max(best, refit.loglik)
    except NonConvergenceError as e:
        if e.best_partial is not None:
            best = max(best, e.best_partial.loglik)
    stat = 2.0 * (best - fit_M.loglik)
    if stat < _LRT_SLACK:
        raise OptimizationFailureError(
            f"LRT statistic {stat:.3e} still negative after split refits"
        )
    return float(stat)


# ---------------------------------------------------------------------------
# parametric bootstrap
# ---------------------------------------------------------------------------


def _bootstrap_inits_null(params, rng):
    """Restart schedule for refitting the null model on a bootstrap draw:
    truth, jittered truth, harder-jittered truth."""
    sig = float(np.sqrt(max(c.sigma2 for c in params.components)))
    return [
        params,
        _jitter(params, 0.5 * sig, rng),
        _jitter(params, sig, rng),
    ]


def _bootstrap_inits_alt(params, rng):
    """Restart schedule for the (M+1)-model: split of the truth, exact
    duplicate embed (keeps the LR statistic nonnegative), jittered split."""
    h = int(np.argmax(params.alpha))
    split = _split_component(params, h)
    sig = float(np.sqrt(params.components[h].sigma2))
    return [
        split,
        _duplicate_component(params, h),
        _jitter(split, 0.5 * sig, rng),
    ]


def _bootstrap_replicate(params, spec, n, T, em_config, ss, sigma0_hat):
    """One bootstrap LR statistic: simulate from ``params``, refit both
    models with the reduced restart schedule.  Deterministic given ss."""
    from .simulate import DgpSpec, simulate_panel

    covariate_law = "standard_normal" if spec.q_x else None
    dgp = DgpSpec(params=params, spec=spec, n=n, T=T,
                  covariate_law=covariate_law)
    data = simulate_panel(dgp, ss)
    rng = np.random.Generator(np.random.Philox(ss.spawn(1)[0]))
    fit0 = fit_mle(data, params.M, spec, em_config,
                   init_params=_bootstrap_inits_null(params, rng),
                   sigma0_hat=None)
    fit1 = fit_mle(data, params.M + 1, spec, em_config,
                   init_params=_bootstrap_inits_alt(fit0.params, rng),
                   sigma0_hat=fit0.sigma0_hat)
    return 2.0 * (fit1.loglik - fit0.loglik)


def parametric_bootstrap_pvalue(
    data: PanelDataset, fit_M: FitResult, spec: ModelSpec, B: int,
    em_config: EmConfig, seed, fit_M1: FitResult | None = None,
    n_jobs: int = 1,
):
    """Bootstrap p-value for H0: M components against M+1.

    Simulates B panels from the fitted null, refits both models on each
    (three restarts apiece: truth/split-based schedules), and returns
    (p, crit_05, boot_stats) with p = (1 + #{LR*_b >= LR_n})/(B + 1) and
    crit_05 the empirical 95% quantile of the bootstrap statistics.
    Replicates that fail to converge are retried once with a fresh stream;
    more than 20% failures raises.
    """
    if B < 1:
        raise DimensionError("B must be >= 1")
    boot_config = replace(em_config, n_restarts=3)
    null_params = fit_M.params
    if fit_M1 is None:
        fit_M1 = fit_mle(data, null_params.M + 1, spec, em_config,
                         base_fit=fit_M, sigma0_hat=fit_M.sigma0_hat)
    lr_obs = lrt_statistic(fit_M, fit_M1, data=data, spec=spec,
                           config=em_config)

    master = _as_seedseq(seed)
    seeds = master.spawn(2 * B)         # second half reserved for retries

    def one(b):
        try:
            return _bootstrap_replicate(
                null_params, spec, data.n, data.T, boot_config,
                seeds[b], fit_M.sigma0_hat,
            )
        except (NonConvergenceError, DegenerateComponentError):
            try:
                return _bootstrap_replicate(
                    null_params, spec, data.n, data.T, boot_config,
                    seeds[B + b], fit_M.sigma0_hat,
                )
            except (NonConvergenceError, DegenerateComponentError):
                return None

    if n_jobs == 1:
        raw = [one(b) for b in range(B)]
    else:
        raw = Parallel(n_jobs=n_jobs)(delayed(one)(b) for b in range(B))
    boot_stats = np.array([s for s in raw if s is not None], dtype=float)
    n_fail = B - boot_stats.size
    if n_fail > 0.2 * B:
        raise NonConvergenceError(
            f"{n_fail}/{B} bootstrap replicates failed to converge"
        )
    count = int(np.sum(boot_stats >= lr_obs))
    p = (1.0 + count) / (boot_stats.size + 1.0)
    crit_05 = float(np.quantile(boot_stats, 0.95))
    return p, crit_05, boot_stats


# ---------------------------------------------------------------------------
# sequential testing and information criteria
# ---------------------------------------------------------------------------


def _ic_row(fit: FitResult, n: int, spec: ModelSpec) -> dict:
    M = fit.params.M
    k = count_parameters(M, spec)
    return {
        "M": M,
        "loglik": float(fit.loglik),
        "k_M": k,
        "aic": float(fit.loglik - k),
        "bic": float(fit.loglik - 0.5 * k * np.log(n)),
    }


def _fit_chain(data, M_bar, spec, em_config):
    """Fits for M = 1..M_bar, each seeding the next (split/embed restarts)."""
    fits = []
    prev = None
    sigma0 = None
    for M in range(1, M_bar + 1):
        try:
            fit = fit_mle(data, M, spec, em_config, base_fit=prev,
                          sigma0_hat=sigma0)
        except NonConvergenceError as e:
            if e.best_partial is None:
                raise NonConvergenceError(
                    f"fit chain failed at M={M}: {e}"
                ) from e
            fit = e.best_partial
        fits.append(fit)
        prev = fit
        sigma0 = fit.sigma0_hat
    return fits


def sequential_pvalues(data, M_bar, spec, B, em_config, seed,
                       crit_source="bootstrap", q_stop=0.10,
                       n_jobs=1, sim_draws=200_000):
    """p-values (and critical values) of H0: m vs m+1 for m = 1, 2, ...

    Testing stops once a p-value exceeds q_stop (no level below q_stop can
    reject there), or at M_bar - 1.  Returns (fits, rows) where rows[m-1]
    holds the test record for null m.  One pass serves every level
    q <= q_stop.
    """
    fits = _fit_chain(data, M_bar, spec, em_config)
    rows = []
    seeds = _as_seedseq(seed).spawn(max(M_bar - 1, 1))
    for m in range(1, M_bar):
        fit0, fit1 = fits[m - 1], fits[m]
        lr = lrt_statistic(fit0, fit1, data=data, spec=spec, config=em_config)
        if crit_source == "bootstrap":
            p, crit, _ = parametric_bootstrap_pvalue(
                data, fit0, spec, B, em_config, seeds[m - 1],
                fit_M1=fit1, n_jobs=n_jobs,
            )
        elif crit_source == "asymptotic":
            from .asymptotic import (
                information_matrix, score_vector, simulate_null_distribution,
            )
            info = information_matrix(score_vector(data, fit0, spec))
            null_stats = simulate_null_distribution(
                info, draws=sim_draws,
                seed=int(seeds[m - 1].generate_state(1)[0]),
            )
            crit = float(np.quantile(null_stats, 1.0 - q_stop))
            p = (1.0 + int(np.sum(null_stats >= lr))) / (null_stats.size + 1.0)
        else:
            raise DimensionError(f"unknown crit_source {crit_source!r}")
        rows.append({"m": m, "lrt_stat": float(lr), "p_value": float(p),
                     "critical_value": float(crit)})
        if p > q_stop:
            break
    return fits, rows


def sequential_select(data: PanelDataset, M_bar: int, spec: ModelSpec,
                      q_n: float, B: int, em_config: EmConfig, seed,
                      crit_source: str = "bootstrap",
                      n_jobs: int = 1) -> SelectionResult:
    """Sequential LRT estimate of the number of components.

    Tests H0: M=m against m+1 for m = 1, 2, ...; rejects when the bootstrap
    (or asymptotic-simulation) p-value is <= q_n; returns the first
    non-rejected m, or M_bar when every test rejects.
    """
    if M_bar < 1:
        raise DimensionError("M_bar must be >= 1")
    if not (0.0 < q_n < 1.0):
        raise DimensionError("q_n must be in (0, 1)")
    if M_bar == 1:
        fits = _fit_chain(data, 1, spec, em_config)
        rows = [_ic_row(fits[0], data.n, spec)]
        return SelectionResult(per_M=tuple(rows), chosen={"lrt": 1},
                               q_n=q_n, B=B)
    fits, test_rows = sequential_pvalues(
        data, M_bar, spec, B, em_config, seed, crit_source=crit_source,
        q_stop=q_n, n_jobs=n_jobs,
    )
    chosen = M_bar
    for row in test_rows:
        if row["p_value"] > q_n:
            chosen = row["m"]
            break
    per_M = []
    tests = {r["m"]: r for r in test_rows}
    for fit in fits:
        row = _ic_row(fit, data.n, spec)
        t = tests.get(row["M"])
        if t is not None:
            row.update(lrt_stat=t["lrt_stat"], p_value=t["p_value"],
                       critical_value=t["critical_value"])
        per_M.append(row)
    return SelectionResult(per_M=tuple(per_M), chosen={"lrt": chosen},
                           q_n=q_n, B=B)


def information_criteria(fits, n: int, spec: ModelSpec) -> SelectionResult:
    """AIC/BIC over a list of fits (penalties k and (k/2) log n on the
    log-likelihood scale); ties break toward the smaller M."""
    rows = sorted((_ic_row(f, n, spec) for f in fits), key=lambda r: r["M"])
    if not rows:
        raise DimensionError("need at least one fit")
    chosen = {}
    for crit in ("aic", "bic"):
        best = max(rows, key=lambda r: (r[crit], -r["M"]))
        chosen[crit] = best["M"]
    return SelectionResult(per_M=tuple(rows), chosen=chosen)
