"""Constrained maximum likelihood for panel mixtures via EM.

The static model uses closed-form weighted updates; the dynamic model cycles
through conditional maximizers (mu given rho and beta, beta given mu, rho
given both, then the scales), each exact, so the likelihood is nondecreasing
apart from the constraint projection applied after every M-step.

Multi-start schedule: restart 0 spreads component means over empirical
quantiles of unit means; restart 1 splits the largest-weight component of a
supplied (M-1)-component fit; restart 2 embeds that fit exactly with one
component duplicated (this makes the fitted log-likelihood nondecreasing in
M by construction); later restarts jitter restart 0.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .errors import (
    DegenerateComponentError,
    DimensionError,
    IllConditionedError,
    NonConvergenceError,
)
from .model import (
    ComponentParams,
    ConstraintSet,
    MixtureParams,
    ModelSpec,
    PanelDataset,
    _cell_log_weights,
    _Packed,
    canonicalize,
    enforce_constraints,
    free_param_count,
)

logger = logging.getLogger(__name__)

_DEGENERATE_MASS = 1e-8


@dataclass(frozen=True)
class EmConfig:
    """EM tuning knobs.  tol is on the relative log-likelihood change."""

    max_iter: int = 2000
    tol: float = 1e-8
    n_restarts: int = 10
    seed: int = 0
    constraints: ConstraintSet = field(default_factory=ConstraintSet)

    def __post_init__(self):
        if self.tol <= 0:
            raise DimensionError("tol must be positive")
        if self.n_restarts < 1:
            raise DimensionError("n_restarts must be >= 1")
        if self.max_iter < 1:
            raise DimensionError("max_iter must be >= 1")


@dataclass(frozen=True)
class Posteriors:
    """E-step output: unit-level responsibilities ``pi`` (n, M) and
    inner-cell responsibilities ``gamma`` (n, T, M, K)."""

    pi: np.ndarray
    gamma: np.ndarray
    loglik: float


@dataclass(frozen=True)
class FitResult:
    params: MixtureParams
    loglik: float
    n_iter: int
    converged: bool
    restart_logliks: np.ndarray
    sigma0_hat: float

    @property
    def M(self) -> int:
        return self.params.M


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


def _posteriors(data: PanelDataset, params: MixtureParams, spec: ModelSpec):
    packed = _Packed(params, spec)
    cells = _cell_log_weights(data.y, data.x, packed, spec)     # (n,T,M,K)
    if packed.K == 1:
        per_period = cells[:, :, :, 0]
        gamma = None                                            # all ones
    else:
        cmax = cells.max(axis=3, keepdims=True)
        gamma = np.exp(cells - cmax)
        ssum = gamma.sum(axis=3, keepdims=True)
        gamma /= ssum
        per_period = (cmax + np.log(ssum))[:, :, :, 0]
    comp_ll = per_period.sum(axis=1)                            # (n,M)
    log_num = comp_ll + np.log(packed.alpha)[None, :]
    nmax = log_num.max(axis=1, keepdims=True)
    pi = np.exp(log_num - nmax)
    den = pi.sum(axis=1, keepdims=True)
    pi /= den
    loglik = float((nmax + np.log(den)).sum())
    if gamma is None:
        gamma = np.ones_like(cells)
    return Posteriors(pi=pi, gamma=gamma, loglik=loglik)


def e_step(data: PanelDataset, vartheta: MixtureParams,
           spec: ModelSpec) -> Posteriors:
    """Posterior responsibilities of the latent type and inner cell.

    Computed in log space; the sample log-likelihood at ``vartheta`` comes
    out as a byproduct and is stored on the result.
    """
    return _posteriors(data, vartheta, spec)


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def _solve_wls(A, b, fallback):
    """Solve the normal equations, falling back to lstsq near singularity."""
    try:
        sol = np.linalg.solve(A, b)
        if np.all(np.isfinite(sol)):
            return sol
    except np.linalg.LinAlgError:
        pass
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    return sol if np.all(np.isfinite(sol)) else fallback


def _m_step_static(data, post, current, spec):
    y, x = data.y, data.x
    n, T = y.shape
    packed = _Packed(current, spec)
    M, K, qx = packed.M, packed.K, packed.q_x
    w = post.pi[:, None, :, None] * post.gamma                  # (n,T,M,K)
    sum_pi = post.pi.sum(axis=0)                                # (M,)
    bad = np.flatnonzero(sum_pi < _DEGENERATE_MASS)
    if bad.size:
        raise DegenerateComponentError(
            f"component(s) {bad.tolist()} lost posterior mass"
        )
    alpha = sum_pi / n
    w_cells = w.sum(axis=(0, 1))                                # (M,K)
    tau = w_cells / (T * sum_pi)[:, None]

    # cell means, using the current slopes
    if qx:
        resid0 = y[:, :, None] - np.einsum("nta,ja->ntj", x, packed.beta)
    else:
        resid0 = np.broadcast_to(y[:, :, None], (n, T, M))
    mu = np.einsum("ntjk,ntj->jk", w, resid0) / np.clip(w_cells, 1e-300, None)

    # slopes, using the new means
    if qx:
        wk = w.sum(axis=3)                                      # (n,T,M)
        r = y[:, :, None, None] - mu[None, None]                # (n,T,M,K)
        beta = np.empty((M, qx))
        for j in range(M):
            A = np.einsum("nt,nta,ntb->ab", wk[:, :, j], x, x)
            b = np.einsum("ntk,nta->a", w[:, :, j] * r[:, :, j], x)
            beta[j] = _solve_wls(A, b, packed.beta[j])
        xb = np.einsum("nta,ja->ntj", x, beta)
    else:
        beta = packed.beta
        xb = 0.0

    resid = y[:, :, None, None] - mu[None, None]
    if qx:
        resid = resid - xb[:, :, :, None]
    sigma2 = np.einsum("ntjk,ntjk->j", w, resid * resid) / (T * sum_pi)

    comps = tuple(
        ComponentParams(mu=mu[j], sigma2=max(sigma2[j], 1e-300),
                        tau=tau[j], beta=beta[j])
        for j in range(M)
    )
    return MixtureParams(alpha=alpha, components=comps)


def _m_step_dynamic(data, post, current, spec):
    y, x = data.y, data.x
    n, T = y.shape
    packed = _Packed(current, spec)
    M, K, qx = packed.M, packed.K, packed.q_x
    w = post.pi[:, None, :, None] * post.gamma                  # (n,T,M,K)
    w1 = w[:, 0]                                                # (n,M,K)
    wt = w[:, 1:]                                               # (n,T-1,M,K)
    sum_pi = post.pi.sum(axis=0)
    bad = np.flatnonzero(sum_pi < _DEGENERATE_MASS)
    if bad.size:
        raise DegenerateComponentError(
            f"component(s) {bad.tolist()} lost posterior mass"
        )
    alpha = sum_pi / n
    tau = w.sum(axis=(0, 1)) / (T * sum_pi)[:, None]

    ycur, ylag = y[:, 1:], y[:, :-1]
    y1 = y[:, 0]
    rho_c = packed.rho

    # transition cell means given current rho, beta
    mu = np.empty((M, K))
    for j in range(M):
        if abs(1.0 - rho_c[j]) < 1e-8:
            mu[j] = packed.mu[j]                # rho at unit root: keep old
            continue
        r = ycur - rho_c[j] * ylag
        if qx:
            r = r - x[:, 1:] @ packed.beta[j] + rho_c[j] * (
                x[:, :-1] @ packed.beta[j]
            )
        denom = (1.0 - rho_c[j]) * wt[:, :, j].sum(axis=(0, 1))
        mu[j] = np.einsum("ntk,nt->k", wt[:, :, j], r) / np.clip(
            denom, 1e-300, None
        )

    # first-period cell means given current beta1
    if qx:
        r1 = y1[:, None] - x[:, 0] @ packed.beta1.T             # (n, M)
    else:
        r1 = np.broadcast_to(y1[:, None], (n, M))
    mu1 = np.einsum("nmk,nm->mk", w1, r1) / np.clip(
        w1.sum(axis=0), 1e-300, None
    )

    # slopes by WLS on quasi-differenced data, using new means
    if qx:
        beta = np.empty((M, qx))
        beta1 = np.empty((M, qx))
        x1 = x[:, 0]
        for j in range(M):
            xd = x[:, 1:] - rho_c[j] * x[:, :-1]                # (n,T-1,qx)
            wj = wt[:, :, j]                                    # (n,T-1,K)
            target = (
                ycur[:, :, None]
                - rho_c[j] * ylag[:, :, None]
                - (1.0 - rho_c[j]) * mu[j][None, None, :]
            )
            A = np.einsum("nt,nta,ntb->ab", wj.sum(axis=2), xd, xd)
            b = np.einsum("ntk,nta->a", wj * target, xd)
            beta[j] = _solve_wls(A, b, packed.beta[j])
            w1j = w1[:, j]                                      # (n,K)
            t1 = y1[:, None] - mu1[j][None, :]
            A1 = np.einsum("n,na,nb->ab", w1j.sum(axis=1), x1, x1)
            b1 = np.einsum("nk,na->a", w1j * t1, x1)
            beta1[j] = _solve_wls(A1, b1, packed.beta1[j])
        xb_cur = np.einsum("nta,ja->ntj", x[:, 1:], beta)
        xb_lag = np.einsum("nta,ja->ntj", x[:, :-1], beta)
        xb1 = x1 @ beta1.T
    else:
        beta, beta1 = packed.beta, packed.beta1
        xb_cur = xb_lag = np.zeros((n, T - 1, M))
        xb1 = np.zeros((n, M))

    # autoregression coefficient by WLS on residuals demeaned with new mu
    rho = np.empty(M)
    for j in range(M):
        a = ycur[:, :, None] - mu[j][None, None, :] - xb_cur[:, :, j, None]
        bres = ylag[:, :, None] - mu[j][None, None, :] - xb_lag[:, :, j, None]
        den = np.einsum("ntk,ntk->", wt[:, :, j], bres * bres)
        if den < 1e-12:
            rho[j] = rho_c[j]
        else:
            rho[j] = np.einsum("ntk,ntk->", wt[:, :, j], a * bres) / den

    # scales with all-new parameters
    sigma2 = np.empty(M)
    sigma2_1 = np.empty(M)
    for j in range(M):
        res = (
            ycur[:, :, None]
            - rho[j] * ylag[:, :, None]
            - (1.0 - rho[j]) * mu[j][None, None, :]
            - (xb_cur[:, :, j, None] - rho[j] * xb_lag[:, :, j, None])
        )
        sigma2[j] = np.einsum("ntk,ntk->", wt[:, :, j], res * res) / (
            (T - 1) * sum_pi[j]
        )
        res1 = y1[:, None] - mu1[j][None, :] - xb1[:, j, None]
        sigma2_1[j] = np.einsum("nk,nk->", w1[:, j], res1 * res1) / sum_pi[j]

    comps = tuple(
        ComponentParams(
            mu=mu[j], sigma2=max(sigma2[j], 1e-300), tau=tau[j], beta=beta[j],
            rho=rho[j], mu1=mu1[j], sigma2_1=max(sigma2_1[j], 1e-300),
            beta1=beta1[j],
        )
        for j in range(M)
    )
    return MixtureParams(alpha=alpha, components=comps)


def _is_binding(params, projected):
    """True when the constraint projection moved the point."""
    if not np.allclose(params.alpha, projected.alpha, rtol=0, atol=1e-14):
        return True
    for c, p in zip(params.components, projected.components):
        if (
            not np.allclose(c.mu, p.mu, rtol=0, atol=1e-14)
            or not np.allclose(c.tau, p.tau, rtol=0, atol=1e-14)
            or abs(c.sigma2 - p.sigma2) > 1e-14
        ):
            return True
        if c.rho is not None and (
            abs(c.rho - p.rho) > 1e-14
            or not np.allclose(c.mu1, p.mu1, rtol=0, atol=1e-14)
            or abs(c.sigma2_1 - p.sigma2_1) > 1e-14
        ):
            return True
    return False


def m_step(data: PanelDataset, post: Posteriors, current: MixtureParams,
           spec: ModelSpec, constraints: ConstraintSet,
           sigma0_hat: float | None = None) -> MixtureParams:
    """Closed-form weighted update of all parameter blocks.

    Applies the static updates (weights, cell probabilities, means given
    current slopes, slopes given new means, scale) or the dynamic cyclic
    updates, then clips into the constraint set and canonicalizes labels.
    """
    if spec.is_dynamic:
        raw = _m_step_dynamic(data, post, current, spec)
    else:
        raw = _m_step_static(data, post, current, spec)
    proj = enforce_constraints(raw, constraints, sigma0_hat)
    if _is_binding(raw, proj):
        logger.debug("constraint projection bound during M-step")
    return canonicalize(proj)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _pooled_scale_and_slopes(data: PanelDataset, spec: ModelSpec):
    """One-pass pooled regression used to seed initial values.

    Returns (sigma, beta, rho, sigma_first, beta_first).  Static models get
    rho = None.
    """
    y, x = data.y, data.x
    n, T = y.shape
    if not spec.is_dynamic:
        yy = y.ravel()
        if spec.q_x:
            X = np.column_stack([np.ones(yy.size), x.reshape(-1, spec.q_x)])
            coef, *_ = np.linalg.lstsq(X, yy, rcond=None)
            resid = yy - X @ coef
            beta = coef[1:]
        else:
            resid = yy - yy.mean()
            beta = np.zeros(0)
        sigma = max(float(resid.std()), 1e-8)
        return sigma, beta, None, sigma, beta
    # dynamic: pooled AR(1) regression over transitions
    yy = y[:, 1:].ravel()
    cols = [np.ones(yy.size), y[:, :-1].ravel()]
    if spec.q_x:
        cols.append(x[:, 1:].reshape(-1, spec.q_x))
        cols.append(x[:, :-1].reshape(-1, spec.q_x))
    X = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(X, yy, rcond=None)
    resid = yy - X @ coef
    rho = float(np.clip(coef[1], -0.95, 0.95))
    beta = coef[2:2 + spec.q_x] if spec.q_x else np.zeros(0)
    sigma = max(float(resid.std()), 1e-8)
    y1 = y[:, 0]
    if spec.q_x:
        X1 = np.column_stack([np.ones(n), x[:, 0]])
        coef1, *_ = np.linalg.lstsq(X1, y1, rcond=None)
        resid1 = y1 - X1 @ coef1
        beta1 = coef1[1:]
    else:
        resid1 = y1 - y1.mean()
        beta1 = np.zeros(0)
    sigma1 = max(float(resid1.std()), 1e-8)
    return sigma, beta, rho, sigma1, beta1


def _quantile_init(data: PanelDataset, M: int, spec: ModelSpec) -> MixtureParams:
    """Spread component means over empirical quantiles of unit means."""
    y, x = data.y, data.x
    sigma, beta, rho, sigma1, beta1 = _pooled_scale_and_slopes(data, spec)
    r = y - (np.einsum("nta,a->nt", x, beta) if spec.q_x else 0.0)
    unit_means = r.mean(axis=1)
    qs = (np.arange(M) + 0.5) / M
    centers = np.quantile(unit_means, qs)
    K = spec.K
    # deterministic inner-cell offsets at normal quantiles, half scale
    if K > 1:
        from scipy.stats import norm
        offs = norm.ppf((np.arange(K) + 0.5) / K) * (0.5 * sigma)
    else:
        offs = np.zeros(1)
    comps = []
    for j in range(M):
        mu = centers[j] + offs
        kw = {}
        if spec.is_dynamic:
            kw = dict(rho=rho, mu1=mu.copy(), sigma2_1=sigma1 ** 2,
                      beta1=beta1.copy())
        comps.append(
            ComponentParams(mu=mu, sigma2=sigma ** 2,
                            tau=np.full(K, 1.0 / K), beta=beta.copy(), **kw)
        )
    return MixtureParams(alpha=np.full(M, 1.0 / M), components=tuple(comps))


def _jitter(params: MixtureParams, scale: float, rng) -> MixtureParams:
    comps = []
    for c in params.components:
        kw = {}
        if c.rho is not None:
            kw = dict(rho=c.rho,
                      mu1=c.mu1 + rng.uniform(-scale, scale, size=c.K),
                      sigma2_1=c.sigma2_1, beta1=c.beta1)
        comps.append(replace(c, mu=c.mu + rng.uniform(-scale, scale, size=c.K),
                             **kw))
    return MixtureParams(alpha=params.alpha, components=tuple(comps))


def _split_component(params: MixtureParams, h: int,
                     shift: float | None = None) -> MixtureParams:
    """Split component h in two, shifting the halves' means apart."""
    c = params.components[h]
    s = 0.5 * math.sqrt(c.sigma2) if shift is None else shift
    alpha = np.concatenate([
        params.alpha[:h], [params.alpha[h] / 2, params.alpha[h] / 2],
        params.alpha[h + 1:],
    ])
    lo = replace(c, mu=c.mu - s,
                 **({"mu1": c.mu1 - s} if c.mu1 is not None else {}))
    hi = replace(c, mu=c.mu + s,
                 **({"mu1": c.mu1 + s} if c.mu1 is not None else {}))
    comps = params.components[:h] + (lo, hi) + params.components[h + 1:]
    return MixtureParams(alpha=alpha, components=comps)


def _duplicate_component(params: MixtureParams, h: int) -> MixtureParams:
    """Exact embed: clone component h with its weight halved."""
    return _split_component(params, h, shift=0.0)


def _default_inits(data, M, spec, config, base_params):
    """The restart schedule.  base_params is the best (M-1) fit or None."""
    rng_seeds = np.random.SeedSequence(config.seed).spawn(config.n_restarts)
    q0 = _quantile_init(data, M, spec)
    sigma_pool = math.sqrt(q0.components[0].sigma2)
    inits = [q0]
    if M >= 2 and base_params is not None and base_params.M == M - 1:
        h = int(np.argmax(base_params.alpha))
        inits.append(_split_component(base_params, h))
        inits.append(_duplicate_component(base_params, h))
    while len(inits) < config.n_restarts:
        rng = np.random.Generator(np.random.Philox(rng_seeds[len(inits)]))
        inits.append(_jitter(q0, sigma_pool, rng))
    # the structural restarts are kept even when n_restarts is smaller
    return inits


# ---------------------------------------------------------------------------
# EM driver
# ---------------------------------------------------------------------------


def _run_em(data, init, spec, constraints, sigma0, max_iter, tol,
            project=None):
    """Single EM run from one initialization.

    project, when given, is an extra projection applied after each M-step
    (used by the split-restricted local fit).  Returns (params, loglik,
    n_iter, converged).
    """
    params = enforce_constraints(init, constraints, sigma0)
    if project is not None:
        params = project(params)
    params = canonicalize(params)
    step_raw = _m_step_dynamic if spec.is_dynamic else _m_step_static
    prev_ll = -np.inf
    n_iter = 0
    for _ in range(max_iter):
        post = _posteriors(data, params, spec)
        ll = post.loglik
        if abs(ll - prev_ll) / (1.0 + abs(ll)) < tol:
            return canonicalize(params), ll, n_iter, True
        prev_ll = ll
        params = enforce_constraints(
            step_raw(data, post, params, spec), constraints, sigma0
        )
        if project is not None:
            params = canonicalize(project(params))
        n_iter += 1
    params = canonicalize(params)
    ll = _posteriors(data, params, spec).loglik
    return params, ll, n_iter, False


def _first_stage_scale(data, spec, config):
    """sigma0_hat: the scale of a one-component fit, used as the floor
    reference for multi-component fits."""
    pooled, *_ = _pooled_scale_and_slopes(data, spec)
    if spec.K == 1 and not spec.is_dynamic:
        return pooled
    one = fit_mle(
        data, 1, spec,
        replace(config, n_restarts=min(config.n_restarts, 3)),
        sigma0_hat=pooled,
    )
    return math.sqrt(one.params.components[0].sigma2)


def fit_mle(data: PanelDataset, M: int, spec: ModelSpec, config: EmConfig,
            base_fit: FitResult | None = None,
            init_params: list | None = None,
            sigma0_hat: float | None = None) -> FitResult:
    """Constrained MLE of the M-component model by multi-start EM.

    base_fit, when supplied, should be the (M-1)-component solution; it
    seeds the split and exact-embed restarts, which guarantees the fitted
    log-likelihood is nondecreasing in M.  init_params overrides the whole
    restart schedule (used by bootstrap refits).  Deterministic given
    config.seed.
    """
    k_free = free_param_count(M, spec)
    if data.n <= k_free:
        raise DimensionError(
            f"n={data.n} too small for {k_free} free parameters"
        )
    if sigma0_hat is None:
        if M == 1 and spec.K == 1 and not spec.is_dynamic:
            sigma0_hat, *_ = _pooled_scale_and_slopes(data, spec)
        else:
            sigma0_hat = _first_stage_scale(data, spec, config)
    if init_params is not None:
        inits = list(init_params)
    else:
        base_params = None
        if base_fit is not None:
            base_params = base_fit.params
        elif M >= 2:
            base_params = fit_mle(
                data, M - 1, spec, config, sigma0_hat=sigma0_hat
            ).params
        inits = _default_inits(data, M, spec, config, base_params)

    runs = []
    logliks = np.full(len(inits), -np.inf)
    for r, init in enumerate(inits):
        try:
            params, ll, n_iter, conv = _run_em(
                data, init, spec, config.constraints, sigma0_hat,
                config.max_iter, config.tol,
            )
        except DegenerateComponentError:
            logger.debug("restart %d degenerated, skipped", r)
            continue
        logliks[r] = ll
        runs.append((ll, r, params, n_iter, conv))

    converged_runs = [run for run in runs if run[4]]
    pool = converged_runs if converged_runs else runs
    if not pool:
        raise NonConvergenceError(
            f"all {len(inits)} restarts degenerated for M={M}"
        )
    ll, r, params, n_iter, conv = max(pool, key=lambda t: (t[0], -t[1]))
    result = FitResult(
        params=params, loglik=ll, n_iter=n_iter, converged=conv,
        restart_logliks=logliks, sigma0_hat=float(sigma0_hat),
    )
    if not converged_runs:
        raise NonConvergenceError(
            f"no restart converged for M={M} within {config.max_iter} "
            "iterations", best_partial=result,
        )
    return result


def fit_local_mle(data: PanelDataset, base_fit: FitResult, h: int,
                  spec: ModelSpec, config: EmConfig) -> FitResult:
    """Split-restricted (M+1)-component fit.

    The mean axis is partitioned at midpoints of the base fit's ordered
    component mean levels; components h and h+1 of the larger model share
    cell h (1-based) and every component's cell means are clipped to its
    cell after each M-step.  Initialized by splitting component h.
    """
    base = canonicalize(base_fit.params)
    M = base.M
    if not (1 <= h <= M):
        raise DimensionError(f"h must be in 1..{M}, got {h}")
    levels = np.array([c.mean_level for c in base.components])
    edges = np.concatenate([[-np.inf], (levels[:-1] + levels[1:]) / 2, [np.inf]])
    # cell index for each component of the (M+1)-model, 0-based;
    # components h-1 and h (0-based) share cell h-1
    cell_of = [i if i < h else i - 1 for i in range(M + 1)]

    def project(params):
        comps = []
        for i, c in enumerate(params.components):
            lo, hi = edges[cell_of[i]], edges[cell_of[i] + 1]
            comps.append(replace(c, mu=np.clip(c.mu, lo, hi)))
        return MixtureParams(alpha=params.alpha, components=tuple(comps))

    split0 = _split_component(base, h - 1)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_restarts)
    sigma_h = math.sqrt(base.components[h - 1].sigma2)
    inits = [split0]
    while len(inits) < config.n_restarts:
        rng = np.random.Generator(np.random.Philox(seeds[len(inits)]))
        inits.append(_jitter(split0, 0.5 * sigma_h, rng))

    runs = []
    logliks = np.full(len(inits), -np.inf)
    for r, init in enumerate(inits):
        try:
            params, ll, n_iter, conv = _run_em(
                data, init, spec, config.constraints, base_fit.sigma0_hat,
                config.max_iter, config.tol, project=project,
            )
        except DegenerateComponentError:
            continue
        logliks[r] = ll
        runs.append((ll, r, params, n_iter, conv))
    converged_runs = [run for run in runs if run[4]]
    pool = converged_runs if converged_runs else runs
    if not pool:
        raise NonConvergenceError(f"all local restarts degenerated for h={h}")
    ll, r, params, n_iter, conv = max(pool, key=lambda t: (t[0], -t[1]))
    result = FitResult(
        params=params, loglik=ll, n_iter=n_iter, converged=conv,
        restart_logliks=logliks, sigma0_hat=base_fit.sigma0_hat,
    )
    if not converged_runs:
        raise NonConvergenceError(
            f"no local restart converged for h={h}", best_partial=result
        )
    return result


# ---------------------------------------------------------------------------
# free-parameter packing and sandwich standard errors
# ---------------------------------------------------------------------------


def pack_params(params: MixtureParams, spec: ModelSpec) -> np.ndarray:
    """Flatten to the free-parameter vector (drops the last alpha and the
    last tau of each component, which are determined by the simplex)."""
    out = list(params.alpha[:-1])
    for c in params.components:
        if c.K > 1:
            out.extend(c.tau[:-1])
        out.extend(c.mu)
        out.append(c.sigma2)
        out.extend(c.beta)
        if spec.is_dynamic:
            out.append(c.rho)
            out.extend(c.mu1)
            out.append(c.sigma2_1)
            out.extend(c.beta1)
    return np.array(out, dtype=float)


def unpack_params(vec: np.ndarray, M: int, spec: ModelSpec) -> MixtureParams:
    """Inverse of pack_params."""
    v = np.asarray(vec, dtype=float)
    pos = M - 1
    alpha_head = v[:pos]
    alpha = np.concatenate([alpha_head, [1.0 - alpha_head.sum()]])
    K, qx = spec.K, spec.q_x
    comps = []
    for _ in range(M):
        if K > 1:
            tau_head = v[pos:pos + K - 1]
            pos += K - 1
            tau = np.concatenate([tau_head, [1.0 - tau_head.sum()]])
        else:
            tau = np.array([1.0])
        mu = v[pos:pos + K]; pos += K
        sigma2 = v[pos]; pos += 1
        beta = v[pos:pos + qx]; pos += qx
        kw = {}
        if spec.is_dynamic:
            kw["rho"] = v[pos]; pos += 1
            kw["mu1"] = v[pos:pos + K]; pos += K
            kw["sigma2_1"] = v[pos]; pos += 1
            kw["beta1"] = v[pos:pos + qx]; pos += qx
        comps.append(ComponentParams(mu=mu, sigma2=sigma2, tau=tau,
                                     beta=beta, **kw))
    if pos != v.size:
        raise DimensionError("parameter vector length mismatch")
    return MixtureParams(alpha=alpha, components=tuple(comps))


def free_param_labels(M: int, spec: ModelSpec) -> list:
    """Names aligned with pack_params order (1-based component indices)."""
    labels = [f"alpha[{j}]" for j in range(1, M)]
    K, qx = spec.K, spec.q_x
    for j in range(1, M + 1):
        if K > 1:
            labels += [f"comp{j}.tau[{k}]" for k in range(1, K)]
        labels += [f"comp{j}.mu[{k}]" for k in range(1, K + 1)]
        labels += [f"comp{j}.sigma2"]
        labels += [f"comp{j}.beta[{a}]" for a in range(1, qx + 1)]
        if spec.is_dynamic:
            labels += [f"comp{j}.rho"]
            labels += [f"comp{j}.mu1[{k}]" for k in range(1, K + 1)]
            labels += [f"comp{j}.sigma2_1"]
            labels += [f"comp{j}.beta1[{a}]" for a in range(1, qx + 1)]
    return labels


def _unit_logliks(data, vec, M, spec):
    from .model import _component_loglik_matrix
    params = unpack_params(vec, M, spec)
    mat = _component_loglik_matrix(data, params, spec)
    return logsumexp(mat + np.log(params.alpha)[None, :], axis=1)


def sandwich_se(data: PanelDataset, fit: FitResult,
                spec: ModelSpec) -> np.ndarray:
    """Robust standard errors A^{-1} B A^{-1} / n on the free parameters.

    A is the average Hessian of the per-unit log density (numeric central
    differences), B the average outer product of per-unit gradients.  Order
    of entries follows free_param_labels.
    """
    if not fit.converged:
        warnings.warn("sandwich_se on a non-converged fit", stacklevel=2)
    M = fit.params.M
    theta0 = pack_params(canonicalize(fit.params), spec)
    d = theta0.size
    n = data.n
    hg = 5e-6 * (1.0 + np.abs(theta0))
    hh = 1e-4 * (1.0 + np.abs(theta0))

    def ll_units(v):
        return _unit_logliks(data, v, M, spec)

    # meat: per-unit central-difference gradients
    G = np.empty((n, d))
    for a in range(d):
        vp, vm = theta0.copy(), theta0.copy()
        vp[a] += hg[a]
        vm[a] -= hg[a]
        G[:, a] = (ll_units(vp) - ll_units(vm)) / (2 * hg[a])
    B = np.einsum("na,nb->ab", G, G) / n

    # bread: central-difference Hessian of the mean log-likelihood
    A = np.empty((d, d))
    for a in range(d):
        for b in range(a, d):
            vpp, vpm, vmp, vmm = (theta0.copy() for _ in range(4))
            vpp[a] += hh[a]; vpp[b] += hh[b]
            vpm[a] += hh[a]; vpm[b] -= hh[b]
            vmp[a] -= hh[a]; vmp[b] += hh[b]
            vmm[a] -= hh[a]; vmm[b] -= hh[b]
            val = (
                ll_units(vpp).sum() - ll_units(vpm).sum()
                - ll_units(vmp).sum() + ll_units(vmm).sum()
            ) / (4 * hh[a] * hh[b] * n)
            A[a, b] = A[b, a] = val

    evals, evecs = np.linalg.eigh(A)
    if np.min(np.abs(evals)) < 1e-10 * np.max(np.abs(evals)):
        labels = free_param_labels(M, spec)
        flat = evecs[:, int(np.argmin(np.abs(evals)))]
        worst = [labels[i] for i in np.argsort(-np.abs(flat))[:3]]
        raise IllConditionedError(
            f"Hessian numerically singular; near-flat direction loads on {worst}"
        )
    Ainv = np.linalg.inv(A)
    V = Ainv @ B @ Ainv / n
    return np.sqrt(np.clip(np.diag(V), 0.0, None))
