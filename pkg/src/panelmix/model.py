"""Core data structures and density evaluation for panel mixture regressions.

A model is a finite mixture over latent unit types.  Conditional on the type,
a unit's outcome path is either

* conditionally independent across periods with a Normal or K-cell Normal
  mixture error ("ci" dynamics), or
* a stationary Gaussian/Normal-mixture AR(1) in levels ("ar1" dynamics),
  where the transition mean is ``rho * y_{t-1} + (1 - rho) * mu_cell
  + (x_t - rho * x_{t-1})' beta`` and the first period has its own mean,
  scale and covariate coefficients.

Everything here evaluates in log space; mixtures are combined with
log-sum-exp so components separated by hundreds of standard deviations do
not underflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, InfeasibleConstraintError

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# data and model descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel: outcomes ``y`` of shape (n, T) and optional
    covariates ``x`` of shape (n, T, q_x).

    ``unit_ids`` is kept only for reporting; estimation is positional.
    """

    y: np.ndarray
    x: np.ndarray | None = None
    unit_ids: tuple | None = None
    x_names: tuple | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "y", y)
        if y.ndim != 2:
            raise DimensionError(f"y must be (n, T), got shape {y.shape}")
        if y.shape[0] < 1 or y.shape[1] < 2:
            raise DimensionError("need at least 1 unit and 2 periods")
        if not np.all(np.isfinite(y)):
            raise DimensionError("y contains non-finite values")
        if self.x is not None:
            x = np.asarray(self.x, dtype=float)
            object.__setattr__(self, "x", x)
            if x.ndim != 3 or x.shape[:2] != y.shape:
                raise DimensionError(
                    f"x must be (n, T, q_x) aligned with y, got {x.shape}"
                )
            if not np.all(np.isfinite(x)):
                raise DimensionError("x contains non-finite values")
        if self.unit_ids is not None and len(self.unit_ids) != y.shape[0]:
            raise DimensionError("unit_ids length does not match n")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def q_x(self) -> int:
        return 0 if self.x is None else self.x.shape[2]


@dataclass(frozen=True)
class ModelSpec:
    """Which model class to estimate.

    error_family : "normal" (single Gaussian cell) or "mixture"
        (K >= 2 Gaussian cells sharing the component's scale and slopes).
    dynamics     : "ci" (conditionally independent periods) or "ar1".
    K            : number of inner cells; forced to 1 for "normal".
    q_x          : number of covariates (0 = none).
    """

    error_family: str = "normal"
    dynamics: str = "ci"
    K: int = 1
    q_x: int = 0

    def __post_init__(self):
        if self.error_family not in ("normal", "mixture"):
            raise DimensionError(f"unknown error_family {self.error_family!r}")
        if self.dynamics not in ("ci", "ar1"):
            raise DimensionError(f"unknown dynamics {self.dynamics!r}")
        if self.error_family == "normal" and self.K != 1:
            raise DimensionError("error_family 'normal' requires K=1")
        if self.error_family == "mixture" and self.K < 2:
            raise DimensionError("error_family 'mixture' requires K>=2")
        if self.q_x < 0:
            raise DimensionError("q_x must be >= 0")

    @property
    def is_dynamic(self) -> bool:
        return self.dynamics == "ar1"


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _vec(a, length, name):
    v = np.atleast_1d(np.asarray(a, dtype=float))
    if v.shape != (length,):
        raise DimensionError(f"{name} must have shape ({length},), got {v.shape}")
    return v


@dataclass(frozen=True)
class ComponentParams:
    """Parameters of one mixture component.

    ``mu`` and ``tau`` always have length K (K=1 for the Normal family,
    with tau == [1.0]).  The AR(1) fields are None under "ci" dynamics.
    ``mu1``, ``sigma2_1``, ``beta1`` describe the first-period density of
    the dynamic model.
    """

    mu: np.ndarray
    sigma2: float
    tau: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rho: float | None = None
    mu1: np.ndarray | None = None
    sigma2_1: float | None = None
    beta1: np.ndarray | None = None

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "mu", mu)
        K = mu.shape[0]
        object.__setattr__(self, "tau", _vec(self.tau, K, "tau"))
        object.__setattr__(
            self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float))
        )
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if self.sigma2 <= 0:
            raise DimensionError("sigma2 must be positive")
        if self.rho is not None:
            object.__setattr__(self, "rho", float(self.rho))
            if self.mu1 is None or self.sigma2_1 is None:
                raise DimensionError("dynamic component needs mu1 and sigma2_1")
            object.__setattr__(
                self, "mu1", _vec(self.mu1, K, "mu1")
            )
            object.__setattr__(self, "sigma2_1", float(self.sigma2_1))
            if self.sigma2_1 <= 0:
                raise DimensionError("sigma2_1 must be positive")
            b1 = self.beta1 if self.beta1 is not None else np.zeros(self.beta.shape)
            object.__setattr__(
                self, "beta1", np.atleast_1d(np.asarray(b1, dtype=float))
            )

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def mean_level(self) -> float:
        """tau-weighted cell mean; the canonical ordering key."""
        return float(self.tau @ self.mu)


@dataclass(frozen=True)
class MixtureParams:
    """Full mixture parameter point: weights plus per-component blocks."""

    alpha: np.ndarray
    components: tuple

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        object.__setattr__(self, "alpha", a)
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if a.shape != (len(comps),):
            raise DimensionError("alpha length must equal number of components")
        if len(comps) == 0:
            raise DimensionError("need at least one component")
        Ks = {c.K for c in comps}
        if len(Ks) != 1:
            raise DimensionError("all components must share the same K")
        qs = {c.beta.shape[0] for c in comps}
        if len(qs) != 1:
            raise DimensionError("all components must share the same q_x")

    @property
    def M(self) -> int:
        return len(self.components)

    @property
    def K(self) -> int:
        return self.components[0].K


@dataclass(frozen=True)
class ConstraintSet:
    """Compactification constraints imposed during estimation.

    c1               : floor on each mixing weight alpha_j.
    tau_floor        : floor on each inner-cell weight tau_jk.
    sigma_floor_mult : sigma_j >= sigma_floor_mult * sigma0_hat, where
                       sigma0_hat is the one-component fit's scale.
    mu_bounds        : optional (low, high) box for all cell means.
    rho_bound        : |rho| <= rho_bound keeps the AR(1) stationary.
    """

    c1: float = 0.05
    tau_floor: float = 0.05
    sigma_floor_mult: float = 0.05
    mu_bounds: tuple | None = None
    rho_bound: float = 0.99

    def __post_init__(self):
        if not (0.0 <= self.c1 < 1.0):
            raise InfeasibleConstraintError("c1 must be in [0, 1)")
        if not (0.0 <= self.tau_floor < 1.0):
            raise InfeasibleConstraintError("tau_floor must be in [0, 1)")
        if self.sigma_floor_mult < 0:
            raise InfeasibleConstraintError("sigma_floor_mult must be >= 0")
        if self.mu_bounds is not None:
            lo, hi = self.mu_bounds
            if not (lo < hi):
                raise InfeasibleConstraintError("mu_bounds must satisfy low < high")
        if not (0.0 < self.rho_bound <= 0.999):
            raise InfeasibleConstraintError("rho_bound must be in (0, 0.999]")


# ---------------------------------------------------------------------------
# packed array view (internal)
# ---------------------------------------------------------------------------


class _Packed:
    """Struct-of-arrays view of MixtureParams used by vectorized kernels."""

    __slots__ = (
        "alpha", "mu", "sigma", "tau", "beta",
        "rho", "mu1", "sigma1", "beta1", "M", "K", "q_x",
    )

    def __init__(self, params: MixtureParams, spec: ModelSpec):
        comps = params.components
        M, K = params.M, params.K
        if K != spec.K:
            raise DimensionError(f"params have K={K} but spec expects K={spec.K}")
        qb = comps[0].beta.shape[0]
        if qb != spec.q_x:
            raise DimensionError(f"params have q_x={qb} but spec expects {spec.q_x}")
        self.M, self.K, self.q_x = M, K, spec.q_x
        self.alpha = np.asarray(params.alpha, dtype=float)
        self.mu = np.stack([c.mu for c in comps])              # (M, K)
        self.sigma = np.sqrt([c.sigma2 for c in comps])        # (M,)
        self.tau = np.stack([c.tau for c in comps])            # (M, K)
        self.beta = np.stack([c.beta for c in comps])          # (M, q_x)
        if spec.is_dynamic:
            if any(c.rho is None for c in comps):
                raise DimensionError("ar1 spec requires rho/mu1/sigma2_1 fields")
            self.rho = np.asarray([c.rho for c in comps], dtype=float)
            self.mu1 = np.stack([c.mu1 for c in comps])
            self.sigma1 = np.sqrt([c.sigma2_1 for c in comps])
            self.beta1 = np.stack([c.beta1 for c in comps])
        else:
            self.rho = self.mu1 = self.sigma1 = self.beta1 = None


def _cell_log_weights(y, x, packed: _Packed, spec: ModelSpec):
    """Per-period, per-cell log(tau_jk * normal_pdf) array.

    Returns shape (n, T, M, K).  Under "ar1" the first period uses the
    initial-condition block and later periods the transition density.
    """
    n, T = y.shape
    M, K = packed.M, packed.K
    if not spec.is_dynamic:
        # residual depends on k only through the cell mean
        base = y[:, :, None]                                   # (n, T, 1)
        if packed.q_x:
            base = base - np.einsum("nta,ja->ntj", x, packed.beta)
        else:
            base = np.broadcast_to(base, (n, T, M))
        z = (base[:, :, :, None] - packed.mu[None, None]) / packed.sigma[
            None, None, :, None
        ]
        return (
            -0.5 * z * z
            - 0.5 * LOG_2PI
            - np.log(packed.sigma)[None, None, :, None]
            + np.log(packed.tau)[None, None]
        )
    out = np.empty((n, T, M, K))
    # dynamic: first period
    b1 = y[:, 0][:, None]                                      # (n, 1)
    if packed.q_x:
        b1 = b1 - np.einsum("na,ja->nj", x[:, 0], packed.beta1)
    else:
        b1 = np.broadcast_to(b1, (n, M))
    z1 = (b1[:, :, None] - packed.mu1[None]) / packed.sigma1[None, :, None]
    out[:, 0] = (
        -0.5 * z1 * z1
        - 0.5 * LOG_2PI
        - np.log(packed.sigma1)[None, :, None]
        + np.log(packed.tau)[None]
    )
    # transitions: y_t - rho*y_{t-1} - (1-rho)*mu_k - (x_t - rho*x_{t-1})'beta
    ylag = y[:, :-1]
    ycur = y[:, 1:]
    base = ycur[:, :, None] - packed.rho[None, None] * ylag[:, :, None]
    if packed.q_x:
        xb_cur = np.einsum("nta,ja->ntj", x[:, 1:], packed.beta)
        xb_lag = np.einsum("nta,ja->ntj", x[:, :-1], packed.beta)
        base = base - xb_cur + packed.rho[None, None] * xb_lag
    zt = (
        base[:, :, :, None]
        - ((1.0 - packed.rho)[None, None, :, None] * packed.mu[None, None])
    ) / packed.sigma[None, None, :, None]
    out[:, 1:] = (
        -0.5 * zt * zt
        - 0.5 * LOG_2PI
        - np.log(packed.sigma)[None, None, :, None]
        + np.log(packed.tau)[None, None]
    )
    return out


def _component_loglik_matrix(data: PanelDataset, params: MixtureParams,
                             spec: ModelSpec):
    """log f(W_i; theta_j) for every unit and component: shape (n, M)."""
    packed = _Packed(params, spec)
    cells = _cell_log_weights(data.y, data.x, packed, spec)
    per_period = logsumexp(cells, axis=3)                      # (n, T, M)
    return per_period.sum(axis=1)


# ---------------------------------------------------------------------------
# public density API
# ---------------------------------------------------------------------------


def _unit_dataset(w, spec: ModelSpec) -> PanelDataset:
    """Wrap one unit's trajectory as a 1-row panel.

    ``w`` may be a PanelDataset row spec, a (y, x) tuple, or a plain
    1-d outcome array when the model has no covariates.  Single-period
    trajectories are allowed here (useful for marginal checks).
    """
    if isinstance(w, PanelDataset):
        return w
    if isinstance(w, tuple):
        y, x = w
    else:
        y, x = w, None
    y = np.atleast_1d(np.asarray(y, dtype=float))[None, :]
    if x is not None:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        x = x[None, :, :]
    if spec.q_x and x is None:
        raise DimensionError("model has covariates but none supplied")
    # bypass PanelDataset's T >= 2 check: build the arrays directly
    ds = object.__new__(PanelDataset)
    object.__setattr__(ds, "y", y)
    object.__setattr__(ds, "x", x)
    object.__setattr__(ds, "unit_ids", None)
    object.__setattr__(ds, "x_names", None)
    return ds


def component_log_density(w, theta: ComponentParams, spec: ModelSpec) -> float:
    """log f(w; theta): one unit's trajectory under a single component."""
    ds = _unit_dataset(w, spec)
    params = MixtureParams(alpha=np.array([1.0]), components=(theta,))
    return float(_component_loglik_matrix(ds, params, spec)[0, 0])


def mixture_log_density(w, vartheta: MixtureParams, spec: ModelSpec) -> float:
    """log of the mixture density sum_j alpha_j f(w; theta_j)."""
    ds = _unit_dataset(w, spec)
    mat = _component_loglik_matrix(ds, vartheta, spec)
    return float(logsumexp(mat[0] + np.log(vartheta.alpha)))


def log_likelihood(data: PanelDataset, vartheta: MixtureParams,
                   spec: ModelSpec) -> float:
    """Sample log-likelihood: sum over units of the mixture log density."""
    mat = _component_loglik_matrix(data, vartheta, spec)
    return float(logsumexp(mat + np.log(vartheta.alpha)[None, :], axis=1).sum())


# ---------------------------------------------------------------------------
# ordering and constraints
# ---------------------------------------------------------------------------


def component_param_count(spec: ModelSpec) -> int:
    """Free parameters in one component block.

    Static: (K-1) cell weights + K cell means + 1 scale + q_x slopes.
    Dynamic adds rho and the first-period block (K means, 1 scale, q_x
    slopes).
    """
    d = (spec.K - 1) + spec.K + 1 + spec.q_x
    if spec.is_dynamic:
        d += 1 + spec.K + 1 + spec.q_x
    return d


def free_param_count(M: int, spec: ModelSpec) -> int:
    """Total free parameters of the M-component model: (M-1) mixing
    weights plus M component blocks."""
    return (M - 1) + M * component_param_count(spec)


def canonicalize(vartheta: MixtureParams) -> MixtureParams:
    """Return the label-canonical representative of a parameter point.

    Inner cells are sorted by ascending cell mean (tau and, when present,
    the first-period means are co-permuted).  Components are then sorted by
    ascending tau-weighted mean level, with ties broken by sigma2, then the
    slope vector, then rho.  Idempotent.
    """
    comps = []
    for c in vartheta.components:
        order = np.argsort(c.mu, kind="stable")
        if not np.array_equal(order, np.arange(c.K)):
            c = replace(
                c,
                mu=c.mu[order],
                tau=c.tau[order],
                mu1=None if c.mu1 is None else c.mu1[order],
            )
        comps.append(c)

    def key(item):
        _, c = item
        return (
            c.mean_level,
            c.sigma2,
            tuple(c.beta),
            0.0 if c.rho is None else c.rho,
        )

    ranked = sorted(enumerate(comps), key=key)
    idx = [i for i, _ in ranked]
    return MixtureParams(
        alpha=vartheta.alpha[idx],
        components=tuple(c for _, c in ranked),
    )


def _floor_simplex(w: np.ndarray, floor: float) -> np.ndarray:
    """Project a probability vector onto {w : w_j >= floor, sum w = 1}.

    Floor-binding entries are pinned at the floor and the remaining mass is
    spread proportionally over the rest; the binding set grows until stable.
    """
    m = w.shape[0]
    if m * floor > 1.0 + 1e-12:
        raise InfeasibleConstraintError(
            f"floor {floor} infeasible for {m} weights"
        )
    w = np.clip(np.asarray(w, dtype=float), 1e-300, None)
    w = w / w.sum()
    binding = w < floor
    for _ in range(m):
        free_mass = 1.0 - binding.sum() * floor
        out = np.where(binding, floor, 0.0)
        free = ~binding
        if free.any():
            out[free] = w[free] * (free_mass / w[free].sum())
        new_binding = binding | (out < floor - 1e-15)
        if np.array_equal(new_binding, binding):
            return out
        binding = new_binding
    return out


def _feasible(vartheta, constraints, sig_floor2, lo, hi) -> bool:
    """Cheap interior check letting enforce_constraints skip the rebuild."""
    if vartheta.alpha.min() < constraints.c1:
        return False
    for c in vartheta.components:
        if c.K > 1 and c.tau.min() < constraints.tau_floor:
            return False
        if sig_floor2 is not None and c.sigma2 < sig_floor2:
            return False
        if lo is not None and (c.mu.min() < lo or c.mu.max() > hi):
            return False
        if c.rho is not None:
            if abs(c.rho) > constraints.rho_bound:
                return False
            if sig_floor2 is not None and c.sigma2_1 < sig_floor2:
                return False
            if lo is not None and (c.mu1.min() < lo or c.mu1.max() > hi):
                return False
    return True


def enforce_constraints(vartheta: MixtureParams, constraints: ConstraintSet,
                        sigma0_hat: float | None = None) -> MixtureParams:
    """Clip a parameter point into the constraint set.

    Weights are floored and renormalized exactly (water-filling); scales are
    floored at sigma_floor_mult * sigma0_hat (skipped when sigma0_hat is
    None); means are boxed when mu_bounds is set; rho is clipped to keep the
    AR(1) stationary.  Idempotent by construction; already-feasible points
    are returned unchanged.
    """
    sf2 = None
    if sigma0_hat is not None and constraints.sigma_floor_mult > 0:
        sf2 = (constraints.sigma_floor_mult * float(sigma0_hat)) ** 2
    blo, bhi = (constraints.mu_bounds if constraints.mu_bounds is not None
                else (None, None))
    if _feasible(vartheta, constraints, sf2, blo, bhi):
        return vartheta
    alpha = _floor_simplex(vartheta.alpha, constraints.c1)
    sig_floor2 = None
    if sigma0_hat is not None and constraints.sigma_floor_mult > 0:
        sig_floor2 = (constraints.sigma_floor_mult * float(sigma0_hat)) ** 2
    lo, hi = (constraints.mu_bounds if constraints.mu_bounds is not None
              else (None, None))
    comps = []
    for c in vartheta.components:
        mu = c.mu if lo is None else np.clip(c.mu, lo, hi)
        tau = c.tau
        if c.K > 1:
            tau = _floor_simplex(tau, constraints.tau_floor)
        sigma2 = c.sigma2 if sig_floor2 is None else max(c.sigma2, sig_floor2)
        kw = {}
        if c.rho is not None:
            kw["rho"] = float(
                np.clip(c.rho, -constraints.rho_bound, constraints.rho_bound)
            )
            kw["mu1"] = c.mu1 if lo is None else np.clip(c.mu1, lo, hi)
            kw["sigma2_1"] = (
                c.sigma2_1 if sig_floor2 is None else max(c.sigma2_1, sig_floor2)
            )
        comps.append(replace(c, mu=mu, tau=tau, sigma2=sigma2, **kw))
    return MixtureParams(alpha=alpha, components=tuple(comps))


def params_to_dict(vartheta: MixtureParams) -> dict:
    """JSON-ready nested dict of a parameter point."""
    comps = []
    for c in vartheta.components:
        d = {
            "mu": c.mu.tolist(),
            "sigma2": c.sigma2,
            "tau": c.tau.tolist(),
            "beta": c.beta.tolist(),
        }
        if c.rho is not None:
            d.update(rho=c.rho, mu1=c.mu1.tolist(), sigma2_1=c.sigma2_1,
                     beta1=c.beta1.tolist())
        comps.append(d)
    return {"alpha": vartheta.alpha.tolist(), "components": comps}


def params_from_dict(d: dict) -> MixtureParams:
    """Inverse of params_to_dict."""
    comps = []
    for c in d["components"]:
        kw = {}
        if c.get("rho") is not None:
            kw = {"rho": c["rho"], "mu1": c["mu1"],
                  "sigma2_1": c["sigma2_1"], "beta1": c.get("beta1")}
        comps.append(ComponentParams(
            mu=c["mu"], sigma2=c["sigma2"], tau=c.get("tau", [1.0]),
            beta=c.get("beta", ()), **kw,
        ))
    return MixtureParams(alpha=d["alpha"], components=tuple(comps))
