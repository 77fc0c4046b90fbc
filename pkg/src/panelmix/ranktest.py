"""Nonparametric lower bound on the number of components via the rank of
discretized cross-period contingency matrices.

For each held-out period k the panel is cut into a (r+1) x (r+1) table
P_k: rows bin y_ik by pooled-sample quantiles, columns bin the mean of the
remaining periods by its own quantiles.  Under M latent components every
P_k has rank <= M, so testing rank <= r for r = 1, 2, ... yields a lower
bound estimate.  Inference uses a Bayesian (Dirichlet-weight) bootstrap of
the minimum-chi-square rank statistic; the partition is re-cut with the
drawn weights and the bootstrap statistics are centered at the sample
estimate.  A rectangular variant (construction="khatri_rao") codes the
complementary periods jointly instead of averaging them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DataError,
    DegeneratePartitionError,
    DimensionError,
    IllConditionedError,
)
from .model import PanelDataset

_CONSTRUCTIONS = ("square", "khatri_rao")


def _as_seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


@dataclass(frozen=True)
class DiscretizedPanel:
    """Cell assignments for one held-out margin.

    cells_k[i, t] is the 1-based quantile bin of y_it under the pooled
    cuts; joint_cells[i, t] is the cell of the complementary summary for
    unit i when margin t+1 is held out (1..r+1 for the square
    construction, 1..(r+1)^(T-1) for khatri_rao).
    """

    cells_k: np.ndarray
    joint_cells: np.ndarray
    r: int
    k: int
    construction: str = "square"

    @property
    def n_joint(self) -> int:
        return int(self.joint_cells.max())


@dataclass(frozen=True)
class RankTestResult:
    r: int
    per_k: tuple
    ave: float
    max: float
    df: int
    p_value: float = float("nan")
    p_value_ave: float = float("nan")
    B: int = 0
    n_degenerate: int = 0
    construction: str = "square"


def _weighted_cuts(values, weights, r):
    """Interior cut points at j/(r+1), j=1..r, of the weighted ECDF
    (type-1: smallest value with cumulative weight >= target)."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    cw = np.cumsum(weights[order])
    targets = np.arange(1, r + 1) / (r + 1) * cw[-1]
    idx = np.searchsorted(cw, targets, side="left")
    return v[np.clip(idx, 0, v.size - 1)]


def _bin(values, cuts):
    """1-based bin index; a value equal to a cut falls in the lower bin."""
    return np.searchsorted(cuts, values, side="left") + 1


def build_partition(data: PanelDataset, k: int, r: int,
                    weights=None, construction: str = "square"
                    ) -> DiscretizedPanel:
    """Quantile-cut cell assignments for testing rank <= r at margin k.

    Pooled {y_it} quantiles give the margin cuts (shared across t); each
    complementary summary (unit mean over the other periods) is cut by its
    own quantiles.  ``weights`` (per unit, nonnegative) feed the weighted
    ECDF so the bootstrap can re-cut the partition.
    """
    if construction not in _CONSTRUCTIONS:
        raise DimensionError(f"unknown construction {construction!r}")
    n, T = data.n, data.T
    if not 1 <= k <= T:
        raise DimensionError(f"margin k={k} outside 1..{T}")
    if r < 1:
        raise DimensionError("r must be >= 1")
    if n < 5 * (r + 1):
        raise DataError(f"need n >= {5 * (r + 1)} units to cut {r + 1} bins")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,) or (w < 0).any() or w.sum() <= 0:
            raise DataError("weights must be nonnegative with positive sum")
    y = data.y
    if np.unique(y).size < r + 1:
        raise DegeneratePartitionError(
            f"fewer than {r + 1} distinct outcome values"
        )
    pooled_w = np.repeat(w, T)
    cuts = _weighted_cuts(y.ravel(), pooled_w, r)
    if np.unique(cuts).size < r:
        raise DegeneratePartitionError("duplicate pooled quantile cuts")
    cells_k = _bin(y, cuts)

    joint = np.empty((n, T), dtype=np.int64)
    if construction == "square":
        for t in range(T):
            comp = (y.sum(axis=1) - y[:, t]) / (T - 1)
            ccuts = _weighted_cuts(comp, w, r)
            if np.unique(ccuts).size < r:
                raise DegeneratePartitionError(
                    f"duplicate complementary cuts at margin {t + 1}"
                )
            joint[:, t] = _bin(comp, ccuts)
    else:
        # mixed-radix code over the r+1 bins of each remaining period
        for t in range(T):
            code = np.zeros(n, dtype=np.int64)
            for s in range(T):
                if s == t:
                    continue
                code = code * (r + 1) + (cells_k[:, s] - 1)
            joint[:, t] = code + 1
    return DiscretizedPanel(cells_k=cells_k, joint_cells=joint, r=r, k=k,
                            construction=construction)


def estimate_Pk(disc: DiscretizedPanel, k: int, weights=None) -> np.ndarray:
    """Weighted joint cell-frequency matrix for margin k.

    Rows index the margin bin of y_ik, columns the complementary cell;
    entries sum to one.  An empty row or column in the square construction
    raises (the rank statistic needs full support there).
    """
    n, T = disc.cells_k.shape
    if not 1 <= k <= T:
        raise DimensionError(f"margin k={k} outside 1..{T}")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
    r = disc.r
    n_rows = r + 1
    n_cols = (r + 1) if disc.construction == "square" else (r + 1) ** (T - 1)
    rows = disc.cells_k[:, k - 1] - 1
    cols = disc.joint_cells[:, k - 1] - 1
    P = np.zeros((n_rows, n_cols))
    np.add.at(P, (rows, cols), w)
    if disc.construction == "square":
        if (P.sum(axis=1) <= 0).any() or (P.sum(axis=0) <= 0).any():
            raise DegeneratePartitionError(
                f"empty cell row/column at margin {k}"
            )
    return P


def _sqrtm_psd(S):
    evals, evecs = np.linalg.eigh(0.5 * (S + S.T))
    return (evecs * np.sqrt(np.clip(evals, 0.0, None))[None, :]) @ evecs.T


def _orth_complement(W, r):
    """[W12; W22] (W22)^-1 (W22 W22')^{1/2} built from the trailing
    singular-vector block; orthonormal columns, invariant to any rotation
    of the trailing block, so no bootstrap sign alignment is needed."""
    m = W.shape[0]
    W2 = W[:, r:]
    W22 = W2[r:, :]
    if np.linalg.matrix_rank(W22) < m - r:
        raise IllConditionedError("singular orientation block in rank "
                                  "decomposition")
    return W2 @ np.linalg.inv(W22) @ _sqrtm_psd(W22 @ W22.T)


def _rank_decomposition(P, r):
    """(A_perp, B_perp) spanning the rank-r residual space of P."""
    m1, m2 = P.shape
    if not 1 <= r < min(m1, m2):
        raise DimensionError(f"r={r} incompatible with {m1}x{m2} matrix")
    if m1 == m2 and np.allclose(P, P.T, atol=1e-12):
        evals, evecs = np.linalg.eigh(P)
        order = np.argsort(-np.abs(evals))
        U = evecs[:, order]
        # sign 0 would zero out the vector; a null eigenvalue's singular
        # vector carries an arbitrary sign, so use +1 there
        signs = np.sign(evals[order])
        signs[signs == 0] = 1.0
        V = U * signs[None, :]
    else:
        U, _, Vt = np.linalg.svd(P)
        V = Vt.T
    return _orth_complement(U, r), _orth_complement(V, r)


def _quad_form(lam, Omega, n):
    if Omega.shape == (1, 1):
        if Omega[0, 0] <= 0:
            raise IllConditionedError("degenerate 1x1 residual covariance")
    elif np.linalg.cond(Omega) > 1e12:
        raise IllConditionedError("residual covariance condition number "
                                  "exceeds 1e12")
    return float(n * lam @ np.linalg.solve(Omega, lam))


def rk_statistic(P_hat, Sigma_hat, r: int, n: int):
    """Minimum-chi-square statistic for H0: rank(P) <= r.

    lambda = vec(A_perp' P B_perp) (column-major) and
    Omega = (B_perp (x) A_perp)' Sigma (B_perp (x) A_perp); the statistic
    n lambda' Omega^{-1} lambda is asymptotically chi-square with
    (rows - r)(cols - r) degrees of freedom.  All-zero columns (sparse
    khatri_rao cells) are dropped with their Sigma rows first.
    """
    P = np.asarray(P_hat, dtype=float)
    Sigma = np.asarray(Sigma_hat, dtype=float)
    m1, m2 = P.shape
    if Sigma.shape != (m1 * m2, m1 * m2):
        raise DimensionError("Sigma must be (m1*m2) x (m1*m2) in "
                             "column-major vec order")
    keep = np.flatnonzero(P.sum(axis=0) > 0)
    if keep.size < m2:
        P = P[:, keep]
        sel = (keep[:, None] * m1 + np.arange(m1)[None, :]).ravel()
        Sigma = Sigma[np.ix_(sel, sel)]
        m2 = keep.size
    Aperp, Bperp = _rank_decomposition(P, r)
    lam = (Aperp.T @ P @ Bperp).ravel(order="F")
    K = np.kron(Bperp, Aperp)
    Omega = K.T @ Sigma @ K
    return _quad_form(lam, Omega, n), lam, Omega


def _multinomial_sigma(P):
    p = P.ravel(order="F")
    return np.diag(p) - np.outer(p, p)


def _margin_stat(data, k, r, weights, construction, center_at=None):
    """rk at margin k; with ``center_at`` the quadratic form is taken in
    (lambda - center) using this sample's decomposition (bootstrap use)."""
    disc = build_partition(data, k, r, weights=weights,
                           construction=construction)
    P = estimate_Pk(disc, k, weights=weights)
    Sigma = _multinomial_sigma(P)
    keep = np.flatnonzero(P.sum(axis=0) > 0)
    if keep.size < P.shape[1]:
        sel = (keep[:, None] * P.shape[0] + np.arange(P.shape[0])[None, :]).ravel()
        P = P[:, keep]
        Sigma = Sigma[np.ix_(sel, sel)]
    Aperp, Bperp = _rank_decomposition(P, r)
    lam = (Aperp.T @ P @ Bperp).ravel(order="F")
    K = np.kron(Bperp, Aperp)
    Omega = K.T @ Sigma @ K
    if center_at is not None:
        if lam.shape != center_at.shape:
            raise DegeneratePartitionError(
                "bootstrap residual dimension changed"
            )
        lam = lam - center_at
    return _quad_form(lam, Omega, data.n), lam


def ave_max_rk(data: PanelDataset, r: int,
               construction: str = "square") -> RankTestResult:
    """Per-margin rank statistics with their average and maximum over k."""
    stats = []
    lam_dim = None
    for k in range(1, data.T + 1):
        stat, lam = _margin_stat(data, k, r, None, construction)
        stats.append(stat)
        lam_dim = lam.size
    stats = np.array(stats)
    return RankTestResult(
        r=r, per_k=tuple(float(s) for s in stats),
        ave=float(stats.mean()), max=float(stats.max()), df=int(lam_dim),
        construction=construction,
    )


def bayesian_bootstrap_pvalue(data: PanelDataset, r: int, B: int, seed,
                              construction: str = "square",
                              ) -> RankTestResult:
    """Dirichlet-weight bootstrap p-values for the ave/max rank statistics.

    Each draw reweights units by normalized Exp(1) variables shared across
    margins, re-cuts the partition with the weighted quantiles, and
    recomputes every margin's statistic centered at the sample lambda.
    p = fraction of bootstrap aggregates >= the observed aggregate.  Draws
    whose re-cut partition degenerates are skipped; more than 10% raises.
    """
    if B < 1:
        raise DimensionError("B must be >= 1")
    observed = []
    centers = []
    for k in range(1, data.T + 1):
        stat, lam = _margin_stat(data, k, r, None, construction)
        observed.append(stat)
        centers.append(lam)
    obs_ave = float(np.mean(observed))
    obs_max = float(np.max(observed))

    rng = np.random.Generator(np.random.Philox(_as_seedseq(seed)))
    boot_ave, boot_max = [], []
    n_degenerate = 0
    for _ in range(B):
        w = rng.standard_exponential(data.n)
        w /= w.sum()
        try:
            stats_b = [
                _margin_stat(data, k, r, w, construction,
                             center_at=centers[k - 1])[0]
                for k in range(1, data.T + 1)
            ]
        except (DegeneratePartitionError, IllConditionedError):
            n_degenerate += 1
            continue
        boot_ave.append(np.mean(stats_b))
        boot_max.append(np.max(stats_b))
    if n_degenerate > 0.1 * B:
        raise DegeneratePartitionError(
            f"{n_degenerate}/{B} bootstrap partitions degenerate"
        )
    boot_ave = np.array(boot_ave)
    boot_max = np.array(boot_max)
    return RankTestResult(
        r=r, per_k=tuple(float(s) for s in observed),
        ave=obs_ave, max=obs_max, df=centers[0].size,
        p_value=float(np.mean(boot_max >= obs_max)),
        p_value_ave=float(np.mean(boot_ave >= obs_ave)),
        B=int(boot_max.size), n_degenerate=n_degenerate,
        construction=construction,
    )


def rank_sequential_lower_bound(data: PanelDataset, r_max: int,
                                level: float = 0.05, B: int = 199,
                                seed=0, statistic: str = "max",
                                construction: str = "square",
                                full: bool = False):
    """Smallest r in 1..r_max whose rank test does not reject, testing
    upward; r_max + 1 when every test rejects (p < level, strict).

    With ``full=True`` returns (r_hat, per_r_results) instead.
    """
    if statistic not in ("max", "ave"):
        raise DimensionError(f"unknown statistic {statistic!r}")
    seeds = _as_seedseq(seed).spawn(r_max)
    details = []
    r_hat = r_max + 1
    for r in range(1, r_max + 1):
        res = bayesian_bootstrap_pvalue(data, r, B, seeds[r - 1],
                                        construction=construction)
        details.append(res)
        p = res.p_value if statistic == "max" else res.p_value_ave
        if not p < level:
            r_hat = r
            break
    if full:
        return r_hat, tuple(details)
    return r_hat
