"""Invariance and calibration properties checked over randomized inputs.

Eleven suites: EM ascent, posterior normalization, unit-order invariance,
first-order score identities, information-matrix shape, Hermite moments
under the Gaussian law, rank-statistic degeneracy, rank-test size,
bootstrap p-value uniformity, quadratic-map identities, and cone
projection against direction grids.  All randomness is seeded; the whole
file is budgeted to run well inside ten minutes on one core.
"""

import math

import numpy as np
import pytest
from dataclasses import replace
from scipy import stats as sps

from panelmix import (
    ComponentParams,
    ConstraintSet,
    DgpSpec,
    EmConfig,
    MixtureParams,
    ModelSpec,
    PanelDataset,
    bayesian_bootstrap_pvalue,
    canonicalize,
    cone_project,
    e_step,
    enforce_constraints,
    fit_mle,
    hermite,
    information_matrix,
    log_likelihood,
    m_step,
    mixture_log_density,
    parametric_bootstrap_pvalue,
    rk_statistic,
    score_vector,
    simulate_panel,
    v_map,
)
from panelmix.asymptotic import _pairs
from panelmix.em import FitResult
from panelmix.ranktest import _multinomial_sigma

# spec/M pairs cycled through by the randomized suites; static and dynamic,
# with and without covariates, both error families
_CONFIGS = [
    (ModelSpec("normal", "ci", K=1, q_x=0), 1),
    (ModelSpec("mixture", "ci", K=2, q_x=0), 2),
    (ModelSpec("normal", "ci", K=1, q_x=1), 2),
    (ModelSpec("mixture", "ci", K=2, q_x=1), 3),
    (ModelSpec("normal", "ci", K=1, q_x=0), 3),
    (ModelSpec("normal", "ar1", K=1, q_x=0), 1),
    (ModelSpec("normal", "ar1", K=1, q_x=1), 2),
    (ModelSpec("mixture", "ar1", K=2, q_x=0), 2),
]


def _random_params(rng, M, spec):
    comps = []
    for _ in range(M):
        if spec.K == 1:
            tau = np.array([1.0])
            mu = rng.normal(0.0, 1.5, 1)
        else:
            tau = rng.dirichlet(np.full(spec.K, 5.0))
            mu = np.sort(rng.normal(0.0, 1.5, spec.K))
        kw = {}
        if spec.is_dynamic:
            kw = dict(rho=rng.uniform(-0.6, 0.6),
                      mu1=rng.normal(0.0, 1.0, spec.K),
                      sigma2_1=rng.uniform(0.4, 2.0),
                      beta1=rng.normal(0.0, 0.7, spec.q_x))
        comps.append(ComponentParams(
            mu=mu, sigma2=rng.uniform(0.4, 2.0), tau=tau,
            beta=rng.normal(0.0, 0.7, spec.q_x), **kw))
    params = MixtureParams(alpha=rng.dirichlet(np.full(M, 5.0)),
                           components=tuple(comps))
    # canonical order so that component j means the same thing to the
    # score code (which canonicalizes) and to perturbations made here
    return canonicalize(enforce_constraints(params, ConstraintSet(),
                                            sigma0_hat=1.0))


def _random_case(seed, spec, M, n=60):
    """Data from one random draw, a different random starting point."""
    rng = np.random.default_rng(np.random.Philox(seed))
    T = 4 if spec.is_dynamic else 3
    truth = _random_params(rng, M, spec)
    law = "standard_normal" if spec.q_x else None
    data = simulate_panel(DgpSpec(params=truth, spec=spec, n=n, T=T,
                                  covariate_law=law),
                          seed=rng.integers(2**31))
    start = _random_params(rng, M, spec)
    return data, start


def _point_fit(params):
    return FitResult(params=params, loglik=0.0, n_iter=1, converged=True,
                     restart_logliks=np.zeros(1), sigma0_hat=1.0)


# ---------------------------------------------------------------------------
# 1. EM ascent
# ---------------------------------------------------------------------------


def test_em_iterates_ascend_on_random_configs():
    for case, (spec, M) in enumerate(_CONFIGS):
        data, params = _random_case(81 + case, spec, M)
        last = log_likelihood(data, params, spec)
        for it in range(12):
            post = e_step(data, params, spec)
            params = m_step(data, post, params, spec, ConstraintSet())
            ll = log_likelihood(data, params, spec)
            assert ll >= last - 1e-9 * abs(last), \
                f"case {case} iteration {it}: {ll} < {last}"
            last = ll


# ---------------------------------------------------------------------------
# 2. posterior normalization
# ---------------------------------------------------------------------------


def test_posteriors_normalize_on_random_configs():
    for case, (spec, M) in enumerate(_CONFIGS):
        data, params = _random_case(101 + case, spec, M)
        post = e_step(data, params, spec)
        n, T = data.n, data.T
        assert post.pi.shape == (n, M)
        assert post.gamma.shape == (n, T, M, spec.K)
        assert np.all(post.pi >= 0) and np.all(post.pi <= 1)
        assert np.all(post.gamma >= 0) and np.all(post.gamma <= 1)
        assert np.allclose(post.pi.sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(post.gamma.sum(axis=3), 1.0, atol=1e-12)
        assert np.isfinite(post.loglik)


# ---------------------------------------------------------------------------
# 3. unit-order invariance
# ---------------------------------------------------------------------------


def test_unit_permutation_leaves_results_invariant():
    spec, M = ModelSpec("normal", "ci", K=1, q_x=0), 2
    data, params = _random_case(123, spec, M, n=80)
    rng = np.random.default_rng(5)
    perm = rng.permutation(data.n)
    pdata = PanelDataset(y=data.y[perm], x=None,
                         unit_ids=tuple(data.unit_ids[i] for i in perm),
                         x_names=None)

    ll = log_likelihood(data, params, spec)
    assert log_likelihood(pdata, params, spec) == pytest.approx(
        ll, rel=1e-12)
    post = e_step(data, params, spec)
    ppost = e_step(pdata, params, spec)
    assert np.allclose(ppost.pi, post.pi[perm], atol=1e-12)

    config = EmConfig(n_restarts=2, seed=9)
    fit = fit_mle(data, M, spec, config)
    pfit = fit_mle(pdata, M, spec, config)
    assert pfit.loglik == pytest.approx(fit.loglik, rel=1e-9)
    assert np.allclose(pfit.params.alpha, fit.params.alpha, atol=1e-7)
    for c, pc in zip(fit.params.components, pfit.params.components):
        assert pc.mu == pytest.approx(c.mu, abs=1e-6)
        assert pc.sigma2 == pytest.approx(c.sigma2, abs=1e-6)


# ---------------------------------------------------------------------------
# 4. first-order score identities
# ---------------------------------------------------------------------------


def _perturb_coord(c, coord, delta):
    name, idx = coord
    if name == "tau":
        return replace(c, tau=np.array([c.tau[0] + delta, c.tau[1] - delta]))
    if name == "mu":
        mu = c.mu.copy()
        mu[idx] += delta
        return replace(c, mu=mu)
    if name == "sigma2":
        return replace(c, sigma2=c.sigma2 + delta)
    beta = c.beta.copy()
    beta[idx] += delta
    return replace(c, beta=beta)


def _density_coords(spec):
    names = []
    if spec.K == 2:
        names.append(("tau", None))
    for k in range(spec.K):
        names.append(("mu", k))
    names.append(("sigma2", None))
    for a in range(spec.q_x):
        names.append(("beta", a))
    return names


def test_eta_scores_are_density_derivatives_on_random_configs():
    for case, (spec, M) in enumerate(_CONFIGS[:5]):  # static specs only
        data, params = _random_case(141 + case, spec, M, n=40)
        sb = score_vector(data, _point_fit(params), spec)
        coords = _density_coords(spec)
        q = len(coords)

        def w(i):
            return data.y[i] if data.x is None else (data.y[i], data.x[i])

        def logg(p, i):
            return mixture_log_density(w(i), p, spec)

        units = range(4)
        col = M - 1 if M > 1 else 0
        for j in range(M - 1):
            for i in units:
                h = 1e-6
                up = params.alpha.copy()
                up[j] += h
                up[M - 1] -= h
                dn = params.alpha.copy()
                dn[j] -= h
                dn[M - 1] += h
                fd = (logg(replace(params, alpha=up), i)
                      - logg(replace(params, alpha=dn), i)) / (2 * h)
                assert sb.s_eta[i, j] == pytest.approx(fd, rel=5e-3,
                                                       abs=5e-6)
        for j in range(M):
            for c_i, coord in enumerate(coords):
                h = 1e-5
                for i in units:
                    cp = list(params.components)
                    cp[j] = _perturb_coord(cp[j], coord, h)
                    cm = list(params.components)
                    cm[j] = _perturb_coord(cm[j], coord, -h)
                    fd = (logg(replace(params, components=tuple(cp)), i)
                          - logg(replace(params, components=tuple(cm)), i)
                          ) / (2 * h)
                    assert sb.s_eta[i, col + j * q + c_i] == pytest.approx(
                        fd, rel=5e-3, abs=5e-6), \
                        f"case {case} comp {j} coord {coord}"


# ---------------------------------------------------------------------------
# 5. information matrix shape
# ---------------------------------------------------------------------------


def test_information_matrix_is_symmetric_psd_on_random_configs():
    for case, (spec, M) in enumerate(_CONFIGS[:5]):
        data, params = _random_case(161 + case, spec, M, n=60)
        info = information_matrix(score_vector(data, _point_fit(params),
                                               spec))
        I = info.I
        assert np.allclose(I, I.T, atol=1e-12)
        eig = np.linalg.eigvalsh(I)
        assert eig.min() >= -1e-8 * max(1.0, eig.max())
        assert info.n_splits == M
        d = len(_pairs(info.q))
        for h in range(M):
            block = info.schur_block(h)
            assert block.shape == (d, d)
            assert np.allclose(block, block.T, atol=1e-10)


# ---------------------------------------------------------------------------
# 6. Hermite moments
# ---------------------------------------------------------------------------


def test_hermite_moments_match_gaussian_orthogonality():
    rng = np.random.default_rng(np.random.Philox(186))
    z = rng.standard_normal(200_000)
    for a in range(1, 5):
        for b in range(1, a + 1):
            prod = hermite(a, z) * hermite(b, z)
            target = float(math.factorial(a)) if a == b else 0.0
            se = prod.std() / np.sqrt(z.size)
            assert abs(prod.mean() - target) < 4.0 * se, (a, b)


# ---------------------------------------------------------------------------
# 7. rank statistic degeneracy
# ---------------------------------------------------------------------------


def test_rank_statistic_vanishes_on_exact_low_rank():
    rng = np.random.default_rng(np.random.Philox(187))
    for size, r in [(3, 1), (3, 2), (4, 2), (4, 3)]:
        for _ in range(3):
            P = np.zeros((size, size))
            for _k in range(r):
                P += rng.uniform(0.2, 1.0) * np.outer(
                    rng.uniform(0.1, 1.0, size), rng.uniform(0.1, 1.0, size))
            P /= P.sum()
            stat, lam, _ = rk_statistic(P, _multinomial_sigma(P), r=r,
                                        n=1000)
            assert stat < 1e-10, (size, r, stat)
            assert np.abs(lam).max() < 1e-8


# ---------------------------------------------------------------------------
# 8. rank test size under a rank-one null
# ---------------------------------------------------------------------------


def test_rank_test_size_under_rank_one_null():
    comp = ComponentParams(mu=np.array([0.2]), sigma2=0.81)
    dgp = DgpSpec(params=MixtureParams(alpha=np.array([1.0]),
                                       components=(comp,)),
                  spec=ModelSpec(), n=400, T=3)
    reps, rejections = 200, 0
    for ss in np.random.SeedSequence(483).spawn(reps):
        s_data, s_boot = ss.spawn(2)
        data = simulate_panel(dgp, seed=s_data)
        res = bayesian_bootstrap_pvalue(data, 1, B=99, seed=s_boot)
        # r+1 = 2 cells per margin, so (2-1)(2-1) degrees of freedom
        assert res.df == 1
        rejections += res.p_value <= 0.05
    rate = 100.0 * rejections / reps
    print(f"rank test size at rank-one null: {rate:.1f}% of {reps}")
    assert 1.0 <= rate <= 10.0


# ---------------------------------------------------------------------------
# 9. bootstrap p-value uniformity
# ---------------------------------------------------------------------------


def test_bootstrap_pvalues_near_uniform_under_null():
    comp = ComponentParams(mu=np.array([0.2]), sigma2=0.81)
    dgp = DgpSpec(params=MixtureParams(alpha=np.array([1.0]),
                                       components=(comp,)),
                  spec=ModelSpec(), n=120, T=3)
    config = EmConfig(n_restarts=2)
    R, B = 60, 19
    pvals = []
    for ss in np.random.SeedSequence(741).spawn(R):
        s_data, s_boot = ss.spawn(2)
        data = simulate_panel(dgp, seed=s_data)
        fit1 = fit_mle(data, 1, dgp.spec, config)
        p, _, stats_b = parametric_bootstrap_pvalue(
            data, fit1, dgp.spec, B, config, seed=s_boot)
        # nestedness up to solver noise on the refits
        assert stats_b.min() >= -1e-8
        pvals.append(p)
    pvals = np.array(pvals)
    # p lives on the lattice k/(B+1)
    assert np.allclose(pvals * (B + 1), np.round(pvals * (B + 1)),
                       atol=1e-9)
    assert pvals.min() >= 1.0 / (B + 1) - 1e-12
    ks = sps.kstest(pvals, "uniform").statistic
    print(f"bootstrap p-values: mean {pvals.mean():.3f}, KS {ks:.3f}")
    assert ks < 0.30
    assert 0.35 <= pvals.mean() <= 0.65


# ---------------------------------------------------------------------------
# 10. quadratic map identities
# ---------------------------------------------------------------------------


def test_v_map_matches_quadratic_forms_on_random_inputs():
    rng = np.random.default_rng(np.random.Philox(190))
    for q in (1, 2, 3, 5):
        pairs = _pairs(q)
        for _ in range(5):
            u = rng.normal(size=q)
            v = v_map(u)
            assert v.shape == (len(pairs),)
            A = rng.normal(size=(q, q))
            A = 0.5 * (A + A.T)
            lam = np.array([A[a, b] if a == b else 2.0 * A[a, b]
                            for a, b in pairs])
            assert v @ lam == pytest.approx(u @ A @ u, rel=1e-12,
                                            abs=1e-12)
            c = rng.uniform(0.5, 2.0)
            assert np.allclose(v_map(c * u), c * c * v)
            assert np.allclose(v_map(-u), v)


# ---------------------------------------------------------------------------
# 11. cone projection against direction grids
# ---------------------------------------------------------------------------


def _grid_lower_bound(G, I, dirs):
    best = 0.0
    for u in dirs:
        v = v_map(u)
        viv = float(v @ I @ v)
        s = max(0.0, float(v @ I @ G) / viv)
        best = max(best, s * s * viv)
    return best


def test_cone_projection_dominates_direction_grids():
    rng = np.random.default_rng(np.random.Philox(191))
    for q in (2, 3):
        d = q * (q + 1) // 2
        for trial in range(6):
            A = rng.normal(size=(d, d))
            I = A @ A.T + 0.1 * np.eye(d)
            G = rng.normal(size=d)
            t_hat, stat = cone_project(G, I)
            if q == 2:
                angles = np.linspace(0.0, np.pi, 512, endpoint=False)
                dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
            else:
                dirs = rng.normal(size=(600, q))
                dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            lower = _grid_lower_bound(G, I, dirs)
            assert stat >= lower - 1e-9, (q, trial)
            # the projected distance never exceeds the distance to zero
            assert stat <= float(G @ I @ G) + 1e-9
            assert stat == pytest.approx(float(t_hat @ I @ t_hat),
                                         rel=1e-8, abs=1e-10)
