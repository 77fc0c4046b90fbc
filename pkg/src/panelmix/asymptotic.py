"""Hermite scores, information matrices, and the simulated null law of the
likelihood-ratio statistic.

The score bundle stacks, per unit, the first-order (identified-direction)
scores and the second-derivative scores of each tested split.  Second-order
rows are the raw cells of (d2 f/f), assembled mechanically from per-period
Hermite terms: with a_t the per-period gradient ratio and B_t the per-period
second-derivative ratio,

    d2 f / f = sum_t B_t + (sum_t a_t)(sum_t a_t)' - sum_t a_t a_t'.

Diagonal cells enter unhalved, exactly as the explicit score formulas write
them; the quadratic pairing lambda' A lambda / 2 is restored downstream by a
fixed diagonal rescaling, so the cone projection itself works with the plain
duplication map v(lambda).

Scores cover static models with Normal or two-cell mixture errors; other
classes use the parametric bootstrap instead.

All Monte Carlo linear algebra on the simulation path avoids multithreaded
BLAS calls (einsum/rank-1 accumulation only) so critical values are
bit-identical across thread settings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import (
    DimensionError,
    IllConditionedError,
    OptimizationFailureError,
    UnsupportedModelError,
)
from .em import FitResult, _posteriors
from .model import ModelSpec, PanelDataset, canonicalize

__all__ = [
    "ScoreBundle", "InfoMatrix", "hermite", "score_vector",
    "information_matrix", "v_map", "cone_project", "simulate_critical_value",
    "simulate_null_distribution",
]


def hermite(b: int, t):
    """Probabilist's Hermite polynomial H^b for b in 1..4."""
    t = np.asarray(t, dtype=float)
    if b == 1:
        out = t
    elif b == 2:
        out = t * t - 1.0
    elif b == 3:
        out = t ** 3 - 3.0 * t
    elif b == 4:
        out = t ** 4 - 6.0 * t * t + 3.0
    else:
        raise DimensionError(f"hermite order must be 1..4, got {b}")
    return out if out.ndim else float(out)


def _pairs(q: int):
    """Duplication-order index pairs: (0,0),(1,0),(1,1),(2,0),(2,1),..."""
    return [(i, j) for i in range(q) for j in range(i + 1)]


def _diag_scale(q: int) -> np.ndarray:
    """0.5 at diagonal pair positions, 1 elsewhere: converts raw
    second-derivative rows to the plain-v(lambda) pairing."""
    return np.array([0.5 if i == j else 1.0 for i, j in _pairs(q)])


# ---------------------------------------------------------------------------
# score assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreBundle:
    """Per-unit scores: s_eta (n, d_eta), s_lambda (n, n_splits*d_lambda).

    q is the per-split parameter dimension; d_lambda = q(q+1)/2.
    """

    s_eta: np.ndarray
    s_lambda: np.ndarray
    q: int
    n_splits: int
    eta_labels: tuple

    @property
    def n(self) -> int:
        return self.s_eta.shape[0]

    @property
    def d_lambda(self) -> int:
        return self.q * (self.q + 1) // 2


def _normalized_hermite(z, sigma):
    """H^b(z)/sigma^b for b = 1..4, stacked on the last axis."""
    s1 = 1.0 / sigma
    return np.stack([hermite(b, z) * s1 ** b for b in (1, 2, 3, 4)], axis=-1)


def _normal_period_blocks(y, x, mu, sigma, beta):
    """Per-period gradient/second-derivative ratios, Normal component.

    theta order (mu, sigma2, beta); returns a: (n,T,q), B: (n,T,q,q).
    """
    n, T = y.shape
    qx = 0 if x is None else x.shape[2]
    q = 2 + qx
    z = (y - mu[0] - (x @ beta if qx else 0.0)) / sigma
    H = _normalized_hermite(z, sigma)
    a = np.zeros((n, T, q))
    a[..., 0] = H[..., 0]
    a[..., 1] = 0.5 * H[..., 1]
    B = np.zeros((n, T, q, q))
    B[..., 0, 0] = H[..., 1]
    B[..., 0, 1] = B[..., 1, 0] = 0.5 * H[..., 2]
    B[..., 1, 1] = 0.25 * H[..., 3]
    if qx:
        a[..., 2:] = H[..., 0, None] * x
        B[..., 0, 2:] = B[..., 2:, 0] = H[..., 1, None] * x
        B[..., 1, 2:] = B[..., 2:, 1] = 0.5 * H[..., 2, None] * x
        B[..., 2:, 2:] = H[..., 1, None, None] * (
            x[..., :, None] * x[..., None, :]
        )
    return a, B


def _mixture2_period_blocks(y, x, mu, sigma, tau, beta, gamma):
    """Per-period ratios for a two-cell mixture component.

    theta order (tau, mu_1, mu_2, sigma2, beta); gamma is the (n,T,2)
    within-component cell posterior at the fitted point.
    """
    n, T = y.shape
    qx = 0 if x is None else x.shape[2]
    q = 4 + qx
    xb = x @ beta if qx else 0.0
    H1 = _normalized_hermite((y - mu[0] - xb) / sigma, sigma)
    H2 = _normalized_hermite((y - mu[1] - xb) / sigma, sigma)
    g1, g2 = gamma[..., 0], gamma[..., 1]
    t1, t2 = float(tau[0]), float(tau[1])
    w1 = [g1 * H1[..., b] for b in range(4)]    # gamma-weighted Hermite
    w2 = [g2 * H2[..., b] for b in range(4)]
    r1 = [v / t1 for v in w1]                   # additionally tau-divided
    r2 = [v / t2 for v in w2]

    a = np.zeros((n, T, q))
    a[..., 0] = g1 / t1 - g2 / t2
    a[..., 1] = w1[0]
    a[..., 2] = w2[0]
    a[..., 3] = 0.5 * (w1[1] + w2[1])
    B = np.zeros((n, T, q, q))
    B[..., 0, 1] = B[..., 1, 0] = r1[0]
    B[..., 0, 2] = B[..., 2, 0] = -r2[0]
    B[..., 0, 3] = B[..., 3, 0] = 0.5 * (r1[1] - r2[1])
    B[..., 1, 1] = w1[1]
    B[..., 1, 3] = B[..., 3, 1] = 0.5 * w1[2]
    B[..., 2, 2] = w2[1]
    B[..., 2, 3] = B[..., 3, 2] = 0.5 * w2[2]
    B[..., 3, 3] = 0.25 * (w1[3] + w2[3])
    if qx:
        a[..., 4:] = (w1[0] + w2[0])[..., None] * x
        c0 = (r1[0] - r2[0])[..., None] * x
        B[..., 0, 4:] = c0
        B[..., 4:, 0] = c0
        c1 = w1[1][..., None] * x
        B[..., 1, 4:] = c1
        B[..., 4:, 1] = c1
        c2 = w2[1][..., None] * x
        B[..., 2, 4:] = c2
        B[..., 4:, 2] = c2
        c3 = 0.5 * (w1[2] + w2[2])[..., None] * x
        B[..., 3, 4:] = c3
        B[..., 4:, 3] = c3
        B[..., 4:, 4:] = (w1[1] + w2[1])[..., None, None] * (
            x[..., :, None] * x[..., None, :]
        )
    return a, B


def _unit_ratio_blocks(a, B):
    """Cross-period assembly: S = sum_t a_t and
    A = sum_t B_t + S S' - sum_t a_t a_t'."""
    S = a.sum(axis=1)
    A = (
        B.sum(axis=1)
        + S[:, :, None] * S[:, None, :]
        - np.einsum("ntq,ntr->nqr", a, a)
    )
    return S, A


def score_vector(data: PanelDataset, fit: FitResult, spec: ModelSpec,
                 split: int | None = None) -> ScoreBundle:
    """Per-unit score columns at the fitted null model.

    The eta block holds the mixing-weight contrasts (empty when M=1)
    followed by the posterior-weighted first-order component scores.  The
    lambda block holds the posterior-weighted second-derivative cells in
    duplication order, one sub-block per tested split h (all splits when
    ``split`` is None; ``split`` is 1-based).
    """
    if spec.is_dynamic:
        raise UnsupportedModelError(
            "asymptotic scores cover static models only; use the bootstrap"
        )
    if spec.K not in (1, 2):
        raise UnsupportedModelError(
            "mixture scores cover K=2 only; use the bootstrap"
        )
    params = canonicalize(fit.params)
    M = params.M
    if split is not None and not (1 <= split <= M):
        raise DimensionError(f"split must be in 1..{M}")
    splits = tuple(range(M)) if split is None else (int(split) - 1,)
    post = _posteriors(data, params, spec)
    pi = post.pi
    y, x = data.y, data.x
    n = data.n

    eta_blocks = []
    eta_labels = []
    if M > 1:
        cols = [
            pi[:, j] / params.alpha[j] - pi[:, M - 1] / params.alpha[M - 1]
            for j in range(M - 1)
        ]
        eta_blocks.append(np.column_stack(cols))
        eta_labels += [f"alpha[{j + 1}]" for j in range(M - 1)]

    lam_blocks = {}
    for h in range(M):
        c = params.components[h]
        sigma = float(np.sqrt(c.sigma2))
        if spec.K == 1:
            a, B = _normal_period_blocks(y, x, c.mu, sigma, c.beta)
            names = ["mu", "sigma2"] + [
                f"beta[{i + 1}]" for i in range(spec.q_x)
            ]
        else:
            a, B = _mixture2_period_blocks(
                y, x, c.mu, sigma, c.tau, c.beta, post.gamma[:, :, h, :]
            )
            names = ["tau", "mu[1]", "mu[2]", "sigma2"] + [
                f"beta[{i + 1}]" for i in range(spec.q_x)
            ]
        S, A = _unit_ratio_blocks(a, B)
        w = pi[:, h][:, None]
        eta_blocks.append(w * S)
        eta_labels += [f"comp{h + 1}.{nm}" for nm in names]
        if h in splits:
            q = S.shape[1]
            cells = np.stack([A[:, i, j] for i, j in _pairs(q)], axis=1)
            lam_blocks[h] = w * cells

    s_eta = np.hstack(eta_blocks) if eta_blocks else np.zeros((n, 0))
    s_lambda = np.hstack([lam_blocks[h] for h in sorted(lam_blocks)])
    q = (2 if spec.K == 1 else 4) + spec.q_x
    return ScoreBundle(
        s_eta=s_eta, s_lambda=s_lambda, q=q, n_splits=len(lam_blocks),
        eta_labels=tuple(eta_labels),
    )


# ---------------------------------------------------------------------------
# information matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InfoMatrix:
    """Sample second-moment matrix of the stacked scores, partitioned.

    ``schur`` is the lambda-block Schur complement across all splits
    jointly; per-split diagonal blocks come from schur_block(h).
    """

    I: np.ndarray
    d_eta: int
    q: int
    n_splits: int
    n: int
    warnings: tuple = ()

    @property
    def d_lambda(self) -> int:
        return self.q * (self.q + 1) // 2

    @property
    def I_eta(self) -> np.ndarray:
        return self.I[: self.d_eta, : self.d_eta]

    @property
    def I_eta_lambda(self) -> np.ndarray:
        return self.I[: self.d_eta, self.d_eta:]

    @property
    def I_lambda(self) -> np.ndarray:
        return self.I[self.d_eta:, self.d_eta:]

    @property
    def schur(self) -> np.ndarray:
        if self.d_eta == 0:
            return self.I_lambda
        evals, evecs = np.linalg.eigh(self.I_eta)
        tol = 1e-10 * max(float(evals.max()), 1e-300)
        inv_diag = np.where(evals > tol, 1.0 / np.where(evals > tol, evals, 1.0), 0.0)
        inv = (evecs * inv_diag[None, :]) @ evecs.T
        s = self.I_lambda - self.I_eta_lambda.T @ inv @ self.I_eta_lambda
        return 0.5 * (s + s.T)

    def schur_block(self, h: int) -> np.ndarray:
        d = self.d_lambda
        return self.schur[h * d:(h + 1) * d, h * d:(h + 1) * d]


def information_matrix(scores: ScoreBundle) -> InfoMatrix:
    """(1/n) sum_i s_i s_i' over the stacked eta and lambda columns."""
    s = np.hstack([scores.s_eta, scores.s_lambda])
    n, D = s.shape
    if n == 0:
        raise DimensionError("empty score bundle")
    # einsum keeps the reduction order independent of BLAS thread count
    I = np.einsum("ni,nj->ij", s, s) / n
    I = 0.5 * (I + I.T)
    warns = []
    if n < D:
        warns.append(f"rank-deficient: n={n} < score dimension {D}")
    d_eta = scores.s_eta.shape[1]
    if d_eta:
        evals = np.linalg.eigvalsh(I[:d_eta, :d_eta])
        if evals.min() < 1e-10 * max(float(evals.max()), 1e-300):
            warns.append("I_eta numerically singular; Schur uses pseudo-inverse")
    return InfoMatrix(
        I=I, d_eta=d_eta, q=scores.q, n_splits=scores.n_splits, n=n,
        warnings=tuple(warns),
    )


# ---------------------------------------------------------------------------
# cone machinery
# ---------------------------------------------------------------------------


def v_map(lam) -> np.ndarray:
    """Unique elements of lambda lambda' in duplication order:
    (l1^2, l2*l1, l2^2, l3*l1, l3*l2, l3^2, ...)."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    return np.array([lam[i] * lam[j] for i, j in _pairs(lam.shape[0])])


def _lambda_dim(d: int) -> int:
    """Inverse of d = q(q+1)/2."""
    q = int((np.sqrt(8 * d + 1) - 1) / 2)
    if q * (q + 1) // 2 != d:
        raise DimensionError(f"{d} is not a triangular number")
    return q


def _v_jacobian(lam, pairs):
    q = lam.shape[0]
    J = np.zeros((len(pairs), q))
    for r, (i, j) in enumerate(pairs):
        if i == j:
            J[r, i] = 2.0 * lam[i]
        else:
            J[r, i] = lam[j]
            J[r, j] = lam[i]
    return J


def cone_project(G: np.ndarray, I_schur: np.ndarray):
    """Project G onto the cone {v(lambda)} in the metric I_schur.

    Returns (t_hat, stat) with stat = t_hat' I_schur t_hat, minimizing the
    quartic r(lambda) = (v(lambda)-G)' I (v(lambda)-G) by multi-start BFGS:
    the apex, signed and scaled top eigenvectors of the matricization of G,
    and seeded random points (20 starts).  The reported minimum never
    exceeds r(0).
    """
    G = np.asarray(G, dtype=float)
    I = np.asarray(I_schur, dtype=float)
    q = _lambda_dim(G.shape[0])
    pairs = _pairs(q)

    def objective(lam):
        diff = v_map(lam) - G
        return float(diff @ I @ diff)

    def grad(lam):
        diff = v_map(lam) - G
        return 2.0 * _v_jacobian(lam, pairs).T @ (I @ diff)

    Gm = np.zeros((q, q))
    for r, (i, j) in enumerate(pairs):
        Gm[i, j] = Gm[j, i] = G[r]
    evals, evecs = np.linalg.eigh(Gm)
    top = evecs[:, int(np.argmax(evals))]
    lam0 = np.sqrt(max(float(evals.max()), 0.0)) * top
    scale = max(float(np.linalg.norm(lam0)), 1.0)

    rng = np.random.Generator(np.random.Philox(0xC0FFEE))
    starts = [np.zeros(q), lam0, -lam0, 0.5 * lam0, 2.0 * lam0]
    while len(starts) < 20:
        starts.append(scale * rng.standard_normal(q))

    apex_val = objective(np.zeros(q))
    best_val, best_lam = apex_val, np.zeros(q)
    n_fail = 0
    for s in starts:
        try:
            res = minimize(objective, s, jac=grad, method="BFGS",
                           options={"gtol": 1e-9, "maxiter": 500})
        except (ValueError, FloatingPointError):
            n_fail += 1
            continue
        if not (np.all(np.isfinite(res.x)) and np.isfinite(res.fun)):
            n_fail += 1
            continue
        if res.fun < best_val:
            best_val, best_lam = float(res.fun), res.x
    if n_fail == len(starts):
        raise OptimizationFailureError(
            f"all cone-projection starts failed; best incumbent {best_val}"
        )
    t_hat = v_map(best_lam) if best_val < apex_val else np.zeros(G.shape[0])
    return t_hat, float(t_hat @ I @ t_hat)


# ---------------------------------------------------------------------------
# batched cone statistics (internal)
# ---------------------------------------------------------------------------


def _unit_directions(q, n_dir, seed=987654321):
    rng = np.random.Generator(np.random.Philox(seed))
    u = rng.standard_normal((n_dir, q))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _ray_stats(G, I, dirs_v):
    """max over candidate rays of (max(0, v'IG))^2 / v'Iv, per row of G.

    The cone is a union of rays c*v(u), so this is exact as the ray set
    becomes dense.  einsum keeps the arithmetic off multithreaded BLAS.
    """
    A = np.einsum("de,ek->dk", I, dirs_v)
    den = np.clip(np.einsum("dk,dk->k", dirs_v, A), 1e-300, None)
    num = np.einsum("nd,dk->nk", G, A)
    np.clip(num, 0.0, None, out=num)
    return np.max(num * num / den[None, :], axis=1)


def _v_rows(lam, pairs):
    return lam[:, [i for i, _ in pairs]] * lam[:, [j for _, j in pairs]]


def _newton_polish(G, I, lam, pairs, iters=15):
    """Batched damped-Newton refinement of r(lam) = (v-G)'I(v-G)."""
    N, q = lam.shape
    d = len(pairs)
    for _ in range(iters):
        V = _v_rows(lam, pairs)
        diff = V - G
        Idiff = np.einsum("nd,de->ne", diff, I)
        J = np.zeros((N, d, q))
        for r, (i, j) in enumerate(pairs):
            if i == j:
                J[:, r, i] = 2.0 * lam[:, i]
            else:
                J[:, r, i] = lam[:, j]
                J[:, r, j] = lam[:, i]
        grad = 2.0 * np.einsum("ndq,nd->nq", J, Idiff)
        H = 2.0 * np.einsum("ndq,de,ner->nqr", J, I, J)
        for r, (i, j) in enumerate(pairs):
            if i == j:
                H[:, i, i] += 4.0 * Idiff[:, r]
            else:
                H[:, i, j] += 2.0 * Idiff[:, r]
                H[:, j, i] += 2.0 * Idiff[:, r]
        tr = np.trace(H, axis1=1, axis2=2) / q
        damp = np.maximum(1e-3 * np.abs(tr), 1e-8)
        H[:, np.arange(q), np.arange(q)] += damp[:, None]
        try:
            step = np.linalg.solve(H, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        cand = lam - step
        Vc = _v_rows(cand, pairs)
        f_old = np.einsum("nd,de,ne->n", diff, I, diff)
        dc = Vc - G
        f_new = np.einsum("nd,de,ne->n", dc, I, dc)
        better = f_new < f_old
        lam[better] = cand[better]
    return lam


def _batched_cone_stats(G, I, q):
    """Projection statistic for each row of G (plain-v coordinates)."""
    pairs = _pairs(q)
    if q == 1:
        g = np.clip(G[:, 0], 0.0, None)
        return g * g * I[0, 0]
    if q == 2:
        phi = (np.arange(4096) + 0.5) * (np.pi / 4096)
        c, s = np.cos(phi), np.sin(phi)
        dirs = np.stack([c * c, s * c, s * s])
        return _ray_stats(G, I, dirs)
    # q >= 3: coarse ray scan, then polish the best ray per draw
    u = _unit_directions(q, 512)
    dirs = np.stack([u[:, i] * u[:, j] for i, j in pairs])
    A = np.einsum("de,ek->dk", I, dirs)
    den = np.clip(np.einsum("dk,dk->k", dirs, A), 1e-300, None)
    num = np.einsum("nd,dk->nk", G, A)
    vals = np.clip(num, 0.0, None) ** 2 / den[None, :]
    stats = np.max(vals, axis=1)
    best = np.argmax(vals, axis=1)
    cstar = np.clip(num[np.arange(G.shape[0]), best] / den[best], 0.0, None)
    lam0 = np.sqrt(cstar)[:, None] * u[best]
    lam = _newton_polish(G, I, lam0, pairs)
    V = _v_rows(lam, pairs)
    gIg = np.einsum("nd,de,ne->n", G, I, G)
    r = np.einsum("nd,de,ne->n", V - G, I, V - G)
    return np.maximum(stats, np.clip(gIg - r, 0.0, None))


# ---------------------------------------------------------------------------
# null-law simulation
# ---------------------------------------------------------------------------


def _psd_factor(S):
    """Factor L with L L' = S via eigendecomposition (negatives clipped)."""
    evals, evecs = np.linalg.eigh(0.5 * (S + S.T))
    if evals.min() < -1e-8 * max(float(evals.max()), 1.0):
        raise IllConditionedError("covariance block far from PSD")
    return evecs * np.sqrt(np.clip(evals, 0.0, None))[None, :]


def simulate_null_distribution(info, draws: int = 200_000, seed: int = 0,
                               chunk: int = 2048) -> np.ndarray:
    """Monte Carlo sample from the limiting null law of the LR statistic.

    ``info`` is the joint InfoMatrix over all tested splits (a length-1
    list is unwrapped; longer lists are rejected because separate per-split
    matrices lose the cross-split covariance).  Each draw samples the
    residualized lambda scores from the full Schur covariance, rescales to
    the plain-v pairing, projects per split, and takes the max over splits.
    """
    if isinstance(info, (list, tuple)):
        if len(info) != 1:
            raise UnsupportedModelError(
                "pass the joint InfoMatrix from score_vector(split=None); "
                "separate per-split matrices lose the cross-split covariance"
            )
        info = info[0]
    if draws < 1000:
        raise DimensionError("draws must be >= 1000")
    d = info.d_lambda
    H = info.n_splits
    q = info.q
    schur = info.schur
    dscale = _diag_scale(q)

    mets, invs = [], []
    for h in range(H):
        blk = schur[h * d:(h + 1) * d, h * d:(h + 1) * d]
        if np.linalg.eigvalsh(blk).min() <= 0:
            raise IllConditionedError(
                f"Schur block for split {h + 1} is not positive definite"
            )
        met = dscale[:, None] * blk * dscale[None, :]
        mets.append(met)
        invs.append(np.linalg.inv(met))

    L = _psd_factor(schur)
    n_chunks = (draws + chunk - 1) // chunk
    seeds = np.random.SeedSequence(seed).spawn(n_chunks)
    stats = np.empty(draws)
    pos = 0
    for ss in seeds:
        m = min(chunk, draws - pos)
        rng = np.random.Generator(np.random.Philox(ss))
        Z = rng.standard_normal((m, L.shape[1]))
        S = np.einsum("mc,dc->md", Z, L)
        best = np.zeros(m)
        for h in range(H):
            Sh = S[:, h * d:(h + 1) * d] * dscale[None, :]
            G = np.einsum("nd,de->ne", Sh, invs[h])
            np.maximum(best, _batched_cone_stats(G, mets[h], q), out=best)
        stats[pos:pos + m] = best
        pos += m
    return stats


def simulate_critical_value(info, level: float, draws: int = 200_000,
                            seed: int = 0, chunk: int = 2048) -> float:
    """Empirical (1-level) quantile of the simulated null LR law."""
    if not (0.0 < level <= 1.0):
        raise DimensionError("level must be in (0, 1]")
    stats = simulate_null_distribution(info, draws=draws, seed=seed,
                                       chunk=chunk)
    if level >= 1.0:
        return float(max(np.min(stats), 0.0))
    return float(np.quantile(stats, 1.0 - level))
