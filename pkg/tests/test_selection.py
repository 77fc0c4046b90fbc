"""Sequential LRT with parametric bootstrap, and information criteria.

Oracles: direct recomputation of the statistic and penalties, the
documented seeding contract for bootstrap replicates, and a Monte Carlo
size check of the bootstrap test on one-component data (nominal 5%,
accepted band 2..9% over 200 replications).
"""

import numpy as np
import pytest

from panelmix import (
    ComponentParams,
    DgpSpec,
    DimensionError,
    EmConfig,
    MixtureParams,
    ModelSpec,
    OptimizationFailureError,
    count_parameters,
    fit_mle,
    free_param_count,
    information_criteria,
    lrt_statistic,
    parametric_bootstrap_pvalue,
    sequential_pvalues,
    sequential_select,
    simulate_panel,
)
from panelmix.em import FitResult
from panelmix.selection import _bootstrap_replicate


def _fake_fit(params, loglik):
    return FitResult(params=params, loglik=loglik, n_iter=5, converged=True,
                     restart_logliks=np.array([loglik]), sigma0_hat=1.0)


def test_count_parameters_delegates_to_free_param_count():
    for M in (1, 2, 4):
        for spec in (ModelSpec(), ModelSpec(error_family="mixture", K=2),
                     ModelSpec(dynamics="ar1", q_x=1)):
            assert count_parameters(M, spec) == free_param_count(M, spec)


# ---------------------------------------------------------------------------
# LR statistic
# ---------------------------------------------------------------------------


def test_lrt_statistic_is_twice_the_gap(small_panel):
    spec = ModelSpec()
    cfg = EmConfig(n_restarts=4)
    fit1 = fit_mle(small_panel, 1, spec, cfg)
    fit2 = fit_mle(small_panel, 2, spec, cfg, base_fit=fit1,
                   sigma0_hat=fit1.sigma0_hat)
    lr = lrt_statistic(fit1, fit2)
    assert lr == pytest.approx(2.0 * (fit2.loglik - fit1.loglik), rel=1e-12)
    assert lr >= 0.0


def test_lrt_statistic_wrong_M_gap_rejected(small_panel):
    spec = ModelSpec()
    cfg = EmConfig(n_restarts=2)
    fit1 = fit_mle(small_panel, 1, spec, cfg)
    with pytest.raises(DimensionError):
        lrt_statistic(fit1, fit1)


def test_lrt_negative_gap_recovered_by_refit(small_panel):
    # a deliberately bad 2-component "fit": the statistic is negative, so
    # the refit path must rescue it (and the rescued value is nonnegative)
    spec = ModelSpec()
    cfg = EmConfig(n_restarts=4)
    fit1 = fit_mle(small_panel, 1, spec, cfg)
    c = fit1.params.components[0]
    bad2 = MixtureParams(
        alpha=[0.5, 0.5],
        components=(ComponentParams(mu=[-9.0], sigma2=0.5),
                    ComponentParams(mu=[9.0], sigma2=0.5)),
    )
    fake = _fake_fit(bad2, fit1.loglik - 25.0)
    lr = lrt_statistic(fit1, fake, data=small_panel, spec=spec, config=cfg)
    assert lr >= 0.0
    with pytest.raises(OptimizationFailureError):
        lrt_statistic(fit1, fake)  # no data to refit with


# ---------------------------------------------------------------------------
# parametric bootstrap
# ---------------------------------------------------------------------------


def test_bootstrap_pvalue_support_and_determinism(one_comp_panel):
    spec = ModelSpec()
    cfg = EmConfig(n_restarts=3)
    fit1 = fit_mle(one_comp_panel, 1, spec, cfg)
    B = 9
    p1, crit1, stats1 = parametric_bootstrap_pvalue(
        one_comp_panel, fit1, spec, B, cfg, seed=77
    )
    p2, crit2, stats2 = parametric_bootstrap_pvalue(
        one_comp_panel, fit1, spec, B, cfg, seed=77
    )
    assert p1 == p2 and crit1 == crit2
    assert np.array_equal(stats1, stats2)
    assert stats1.size == B
    # nestedness of the bootstrap refits keeps every statistic nonnegative
    assert stats1.min() >= 0.0
    k = round(p1 * (B + 1))
    assert 1 <= k <= B + 1 and p1 == pytest.approx(k / (B + 1))
    assert crit1 == pytest.approx(float(np.quantile(stats1, 0.95)))


def test_bootstrap_replicate_seeding_contract(one_comp_panel):
    # replicate b of seed s must equal a direct call with spawn(2B)[b]
    spec = ModelSpec()
    cfg = EmConfig(n_restarts=3)
    fit1 = fit_mle(one_comp_panel, 1, spec, cfg)
    B, seed = 5, 123
    _, _, stats = parametric_bootstrap_pvalue(
        one_comp_panel, fit1, spec, B, cfg, seed=seed
    )
    from dataclasses import replace
    boot_cfg = replace(cfg, n_restarts=3)
    seeds = np.random.SeedSequence(seed).spawn(2 * B)
    for b in (0, 3):
        direct = _bootstrap_replicate(
            fit1.params, spec, one_comp_panel.n, one_comp_panel.T,
            boot_cfg, seeds[b], fit1.sigma0_hat,
        )
        assert direct == pytest.approx(stats[b], rel=1e-12)


def test_bootstrap_rejects_bad_B(one_comp_panel):
    spec = ModelSpec()
    cfg = EmConfig(n_restarts=2)
    fit1 = fit_mle(one_comp_panel, 1, spec, cfg)
    with pytest.raises(DimensionError):
        parametric_bootstrap_pvalue(one_comp_panel, fit1, spec, 0, cfg, seed=1)


# ---------------------------------------------------------------------------
# sequential testing
# ---------------------------------------------------------------------------


def test_sequential_pvalues_rejects_one_accepts_two(small_panel):
    spec = ModelSpec()
    cfg = EmConfig(n_restarts=4)
    fits, rows = sequential_pvalues(small_panel, 4, spec, B=19,
                                    em_config=cfg, seed=5)
    assert [f.M for f in fits] == [1, 2, 3, 4]
    assert rows[0]["m"] == 1 and rows[0]["p_value"] <= 0.10
    assert rows[-1]["p_value"] > 0.10
    # stopped before exhausting every null
    assert rows[-1]["m"] < 4
    sel = sequential_select(small_panel, 4, spec, q_n=0.10, B=19,
                            em_config=cfg, seed=5)
    assert sel.chosen["lrt"] == rows[-1]["m"] == 2
    row2 = sel.row(2)
    assert {"M", "loglik", "k_M", "aic", "bic", "lrt_stat", "p_value",
            "critical_value"} <= set(row2)


def test_sequential_pvalues_asymptotic_branch(small_panel):
    spec = ModelSpec()
    cfg = EmConfig(n_restarts=4)
    fits, rows = sequential_pvalues(small_panel, 3, spec, B=19,
                                    em_config=cfg, seed=6,
                                    crit_source="asymptotic",
                                    sim_draws=20_000)
    # same decision as the bootstrap on this well-separated panel
    assert rows[0]["p_value"] <= 0.10
    assert rows[1]["p_value"] > 0.10
    assert rows[1]["lrt_stat"] < rows[1]["critical_value"]
    with pytest.raises(DimensionError):
        sequential_pvalues(small_panel, 3, spec, 19, cfg, 6,
                           crit_source="exact")


def test_sequential_select_validates_inputs(small_panel):
    spec = ModelSpec()
    cfg = EmConfig(n_restarts=2)
    with pytest.raises(DimensionError):
        sequential_select(small_panel, 0, spec, 0.05, 19, cfg, 1)
    with pytest.raises(DimensionError):
        sequential_select(small_panel, 3, spec, 1.5, 19, cfg, 1)


# ---------------------------------------------------------------------------
# information criteria
# ---------------------------------------------------------------------------


def test_information_criteria_penalties(small_panel):
    spec = ModelSpec()
    cfg = EmConfig(n_restarts=4)
    fit1 = fit_mle(small_panel, 1, spec, cfg)
    fit2 = fit_mle(small_panel, 2, spec, cfg, base_fit=fit1,
                   sigma0_hat=fit1.sigma0_hat)
    res = information_criteria([fit1, fit2], small_panel.n, spec)
    n = small_panel.n
    for fit in (fit1, fit2):
        row = res.row(fit.M)
        k = free_param_count(fit.M, spec)
        assert row["k_M"] == k
        assert row["aic"] == pytest.approx(fit.loglik - k)
        assert row["bic"] == pytest.approx(fit.loglik - 0.5 * k * np.log(n))
    # the two-component structure is obvious in this panel
    assert res.chosen["aic"] == 2 and res.chosen["bic"] == 2


def test_information_criteria_ties_break_to_smaller_M():
    spec = ModelSpec()
    p1 = MixtureParams(alpha=[1.0],
                       components=(ComponentParams(mu=[0.0], sigma2=1.0),))
    p2 = MixtureParams(
        alpha=[0.5, 0.5],
        components=(ComponentParams(mu=[0.0], sigma2=1.0),
                    ComponentParams(mu=[0.1], sigma2=1.0)),
    )
    n = 100
    k1, k2 = free_param_count(1, spec), free_param_count(2, spec)
    # logliks rigged so both aic values tie exactly
    f1 = _fake_fit(p1, -50.0)
    f2 = _fake_fit(p2, -50.0 + (k2 - k1))
    res = information_criteria([f1, f2], n, spec)
    assert res.row(1)["aic"] == pytest.approx(res.row(2)["aic"])
    assert res.chosen["aic"] == 1


def test_information_criteria_empty_rejected():
    with pytest.raises(DimensionError):
        information_criteria([], 100, ModelSpec())


# ---------------------------------------------------------------------------
# Monte Carlo size of the bootstrap test (slow)
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_bootstrap_test_size_on_one_component_data():
    """Nominal 5% test of H0: one component, on one-component data:
    n=200, T=3, B=99, 200 replications; the rejection rate must land in
    [2%, 9%]."""
    spec = ModelSpec()
    cfg = EmConfig()
    dgp = DgpSpec(
        params=MixtureParams(
            alpha=[1.0], components=(ComponentParams(mu=[0.3], sigma2=0.81),)
        ),
        spec=spec, n=200, T=3,
    )
    reps = 200
    seeds = np.random.SeedSequence(373).spawn(reps)
    rejections = 0
    for ss in seeds:
        data = simulate_panel(dgp, ss)
        fit1 = fit_mle(data, 1, spec, cfg)
        p, _, _ = parametric_bootstrap_pvalue(data, fit1, spec, 99, cfg,
                                              seed=ss.spawn(1)[0])
        rejections += p <= 0.05
    rate = 100.0 * rejections / reps
    print(f"\none-component bootstrap size: {rate:.1f}% rejections")
    assert 2.0 <= rate <= 9.0
