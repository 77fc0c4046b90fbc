"""Nonparametric rank statistic and its Bayesian bootstrap.

Oracles: hand tabulation of the frequency matrix, exact-rank matrices
whose statistic must vanish, and the chi-square(1) limit law under a
true rank-2 matrix (Monte Carlo with multinomial resampling).
"""

import numpy as np
import pytest

from panelmix import (
    DataError,
    DegeneratePartitionError,
    DimensionError,
    IllConditionedError,
    PanelDataset,
    ave_max_rk,
    bayesian_bootstrap_pvalue,
    build_partition,
    builtin_design,
    estimate_Pk,
    rank_sequential_lower_bound,
    rk_statistic,
    simulate_panel,
)
from panelmix.ranktest import _margin_stat, _multinomial_sigma


@pytest.fixture(scope="module")
def mix_panel():
    """Two well-separated latent groups; margin matrices have rank 2."""
    return simulate_panel(builtin_design("table1", n=400), seed=91)


@pytest.fixture(scope="module")
def flat_panel():
    """One latent group; margin matrices have rank 1."""
    rng = np.random.Generator(np.random.Philox(17))
    return PanelDataset(y=0.2 + 0.9 * rng.standard_normal((400, 3)))


# ---------------------------------------------------------------------------
# partitions and frequency matrices
# ---------------------------------------------------------------------------


def test_partition_bins_are_balanced():
    rng = np.random.Generator(np.random.Philox(2))
    data = PanelDataset(y=rng.standard_normal((121, 3)))
    for r in (1, 2, 4):
        disc = build_partition(data, 1, r)
        pooled = np.bincount(disc.cells_k.ravel() - 1, minlength=r + 1)
        # weighted-ECDF cuts are exact up to one float-accumulation slot
        assert pooled.max() - pooled.min() <= 2
        assert disc.cells_k.min() >= 1 and disc.cells_k.max() <= r + 1
        for t in range(3):
            comp = np.bincount(disc.joint_cells[:, t] - 1, minlength=r + 1)
            assert comp.max() - comp.min() <= 2


def test_estimate_pk_matches_hand_tabulation():
    rng = np.random.Generator(np.random.Philox(4))
    data = PanelDataset(y=rng.standard_normal((60, 3)))
    k, r = 2, 2
    disc = build_partition(data, k, r)
    P = estimate_Pk(disc, k)
    hand = np.zeros((3, 3))
    for i in range(60):
        hand[disc.cells_k[i, k - 1] - 1, disc.joint_cells[i, k - 1] - 1] += 1
    hand /= 60
    assert np.allclose(P, hand, atol=1e-15)
    assert P.sum() == pytest.approx(1.0, abs=1e-12)
    assert P.min() >= 0.0


def test_partition_respects_bootstrap_weights():
    rng = np.random.Generator(np.random.Philox(6))
    data = PanelDataset(y=rng.standard_normal((80, 3)))
    w = rng.standard_exponential(80)
    disc = build_partition(data, 1, 2, weights=w)
    P = estimate_Pk(disc, 1, weights=w)
    assert P.sum() == pytest.approx(1.0, abs=1e-12)
    # heavier units move the cuts: the weighted row masses stay near 1/3
    # the cuts balance the pooled weighted mass (weights repeat across t),
    # to within a couple of unit weights
    wn = w / w.sum()
    pooled_w = np.repeat(wn / 3.0, 3)
    cells = disc.cells_k.ravel()
    for row in range(3):
        mass = pooled_w[cells == row + 1].sum()
        assert mass == pytest.approx(1.0 / 3.0, abs=wn.max() + 1e-12)


def test_partition_input_validation():
    rng = np.random.Generator(np.random.Philox(9))
    data = PanelDataset(y=rng.standard_normal((30, 3)))
    with pytest.raises(DimensionError):
        build_partition(data, 0, 2)
    with pytest.raises(DimensionError):
        build_partition(data, 1, 0)
    with pytest.raises(DataError):
        build_partition(data, 1, 6)  # needs n >= 35
    with pytest.raises(DataError):
        build_partition(data, 1, 2, weights=np.full(30, -1.0))
    const = PanelDataset(y=np.ones((40, 3)))
    with pytest.raises(DegeneratePartitionError):
        build_partition(const, 1, 2)


# ---------------------------------------------------------------------------
# the statistic
# ---------------------------------------------------------------------------


def _rank2_P():
    a = np.array([0.7, 0.2, 0.1])
    b = np.array([0.5, 0.3, 0.2])
    c = np.array([0.1, 0.3, 0.6])
    d = np.array([0.2, 0.3, 0.5])
    return 0.6 * np.outer(a, b) + 0.4 * np.outer(c, d)


def test_statistic_vanishes_on_exact_low_rank():
    P = _rank2_P()
    assert np.linalg.matrix_rank(P) == 2
    Sigma = _multinomial_sigma(P)
    stat, lam, Omega = rk_statistic(P, Sigma, r=2, n=500)
    assert lam.shape == (1,)
    assert abs(lam[0]) < 1e-12
    assert stat < 1e-18
    # full-rank alternative: the same machinery detects rank 3
    P3 = 0.7 * P + 0.3 * np.diag([0.4, 0.3, 0.3])
    stat3, _, _ = rk_statistic(P3, _multinomial_sigma(P3), r=2, n=500)
    assert stat3 > 10.0


def test_statistic_matches_chi_square_one_limit():
    """True rank 2, multinomial sampling at n=2000: the statistic's mean
    over 400 draws must sit within 3 standard errors of 1, and the 3.841
    rejection rate near 5%."""
    P = _rank2_P()
    pvec = P.ravel(order="F")
    rng = np.random.Generator(np.random.Philox(14))
    stats = []
    for _ in range(400):
        counts = rng.multinomial(2000, pvec)
        P_hat = (counts / 2000.0).reshape(3, 3, order="F")
        stat, _, _ = rk_statistic(P_hat, _multinomial_sigma(P_hat), r=2,
                                  n=2000)
        stats.append(stat)
    stats = np.array(stats)
    se_mean = np.sqrt(2.0 / stats.size)
    assert abs(stats.mean() - 1.0) < 3 * se_mean
    reject = (stats > 3.841).mean()
    assert 0.02 <= reject <= 0.10


def test_statistic_rejects_mismatched_sigma():
    P = _rank2_P()
    with pytest.raises(DimensionError):
        rk_statistic(P, np.eye(4), r=2, n=100)
    with pytest.raises(IllConditionedError):
        rk_statistic(P, np.zeros((9, 9)), r=2, n=100)


def test_zero_column_dropping_matches_dense_subproblem():
    # padding a matrix with an all-zero column must not change the result
    P = _rank2_P()
    Pz = np.hstack([P, np.zeros((3, 1))])
    Sz = np.zeros((12, 12))
    S = _multinomial_sigma(P)
    sel = (np.array([0, 1, 2])[:, None] * 3 + np.arange(3)[None, :]).ravel()
    Sz[np.ix_(sel, sel)] = S
    stat_dense, _, _ = rk_statistic(P, S, r=2, n=700)
    stat_padded, _, _ = rk_statistic(Pz, Sz, r=2, n=700)
    assert stat_padded == pytest.approx(stat_dense, rel=1e-10)


# ---------------------------------------------------------------------------
# per-margin aggregation
# ---------------------------------------------------------------------------


def test_ave_max_consistent_with_margins(mix_panel):
    res = ave_max_rk(mix_panel, r=2, construction="square")
    assert len(res.per_k) == mix_panel.T
    assert res.ave == pytest.approx(float(np.mean(res.per_k)), rel=1e-12)
    assert res.max == pytest.approx(float(np.max(res.per_k)), rel=1e-12)
    assert res.df == 1
    for k in range(1, mix_panel.T + 1):
        stat_k, _ = _margin_stat(mix_panel, k, 2, None, "square")
        assert stat_k == pytest.approx(res.per_k[k - 1], rel=1e-12)


def test_margin_stat_centering_zeroes_the_plugin_sample(mix_panel):
    _, lam = _margin_stat(mix_panel, 1, 2, None, "square")
    stat, _ = _margin_stat(mix_panel, 1, 2, None, "square", center_at=lam)
    assert stat == pytest.approx(0.0, abs=1e-18)


def test_khatri_rao_construction(mix_panel):
    disc = build_partition(mix_panel, 1, 2, construction="khatri_rao")
    P = estimate_Pk(disc, 1)
    assert P.shape == (3, 9)
    assert P.sum() == pytest.approx(1.0, abs=1e-12)
    res = ave_max_rk(mix_panel, r=2, construction="khatri_rao")
    assert np.isfinite(res.max) and res.max >= 0.0
    # df = (rows - r) * (kept columns - r) with one row direction left
    assert res.df >= 1


# ---------------------------------------------------------------------------
# bootstrap p-values and the sequential bound
# ---------------------------------------------------------------------------


def test_bootstrap_pvalue_determinism_and_range(mix_panel):
    a = bayesian_bootstrap_pvalue(mix_panel, 2, B=59, seed=33,
                                  construction="square")
    b = bayesian_bootstrap_pvalue(mix_panel, 2, B=59, seed=33,
                                  construction="square")
    assert a.p_value == b.p_value
    assert a.p_value_ave == b.p_value_ave
    assert 0.0 <= a.p_value <= 1.0
    assert a.B == 59
    assert a.n_degenerate <= 5
    # rank 2 holds here: neither statistic should reject at 5%
    assert a.p_value >= 0.05
    assert a.p_value_ave >= 0.05


def test_rank_lower_bound_two_groups(mix_panel):
    r_hat, details = rank_sequential_lower_bound(
        mix_panel, r_max=3, level=0.05, B=99, seed=2, full=True
    )
    assert r_hat == 2
    assert details[0].p_value < 0.05      # r=1 rejected
    assert not details[1].p_value < 0.05  # r=2 kept
    ave_hat = rank_sequential_lower_bound(mix_panel, r_max=3, level=0.05,
                                          B=99, seed=2, statistic="ave")
    assert ave_hat == 2


def test_rank_lower_bound_one_group(flat_panel):
    r_hat = rank_sequential_lower_bound(flat_panel, r_max=3, level=0.05,
                                        B=99, seed=3)
    assert r_hat == 1


def test_rank_lower_bound_validates_statistic(flat_panel):
    with pytest.raises(DimensionError):
        rank_sequential_lower_bound(flat_panel, 2, statistic="median")
