"""Simulation designs, data generators and experiment runners."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fabtest.sim import (
    FDR_GRID,
    HIST_BINS,
    SimDesign,
    draw_nonnull_structure,
    oracle_one_sided_p,
    run_null_experiment,
    run_power_experiment,
    simulate_nonnull_study,
    simulate_null_study,
)
from fabtest.ttest import classical_p, t_cdf

SMALL = dict(L=4, G=6, d=2, n_reps=4)


class TestDesign:
    def test_defaults(self):
        null = SimDesign.null_default()
        assert (null.M, null.n_reps, null.d, null.n_datasets) == (250, 5, 5, 2000)
        assert SimDesign.null_default(paper_scale=True).n_datasets == 10_000
        power = SimDesign.power_default()
        assert (power.M, power.d, power.n_datasets) == (500, 10, 50)

    @pytest.mark.parametrize("kw", [dict(n_reps=1), dict(L=0), dict(tau2_grid=(1.2,)),
                                    dict(target_fdr=0.0)])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            SimDesign(**kw)


class TestGenerators:
    def test_null_study(self):
        design = SimDesign(**SMALL, n_datasets=1)
        summ, feats = simulate_null_study(design, seed=3)
        assert len(summ) == 24 and feats.q == 4
        assert summ.ids[5] == "L1:G1" and summ.row_keys[5] == "L1" and summ.col_keys[5] == "G1"
        again, _ = simulate_null_study(design, seed=3)
        np.testing.assert_array_equal(summ.ybar, again.ybar)

    def test_null_sampling_distribution(self):
        design = SimDesign(L=10, G=50, d=2, n_reps=5, n_datasets=1)
        summ, _ = simulate_null_study(design, seed=0)
        # ybar ~ N(0, 1/5), s^2 ~ chi2_4 / 4
        assert abs(summ.ybar.mean()) < 4 * np.sqrt(0.2 / 500)
        assert summ.ybar.var() == pytest.approx(0.2, rel=0.2)
        assert np.mean(summ.s ** 2) == pytest.approx(1.0, rel=0.15)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from([0.0, 0.2, 0.6, 1.0]))
    def test_effects_have_unit_variance(self, seed, tau2):
        design = SimDesign(**SMALL, n_datasets=1)
        _, _, theta = simulate_nonnull_study(design, tau2, seed=seed)
        assert theta.var() == pytest.approx(1.0, abs=1e-12)

    def test_structure_pieces(self):
        design = SimDesign(**SMALL, n_datasets=1)
        s = draw_nonnull_structure(design, seed=1)
        X = np.kron(s.V, s.U)
        # signal lies in the feature span; noise is empirically uncorrelated with it
        coef = np.linalg.lstsq(X, s.signal, rcond=None)[0]
        np.testing.assert_allclose(X @ coef, s.signal, atol=1e-10)
        assert abs(np.corrcoef(s.signal, s.noise)[0, 1]) < 1e-12

    def test_fixed_structure_reused(self):
        design = SimDesign(**SMALL, n_datasets=1)
        s = draw_nonnull_structure(design, seed=1)
        _, _, a = simulate_nonnull_study(design, 0.4, seed=5, structure=s)
        _, _, b = simulate_nonnull_study(design, 0.4, seed=6, structure=s)
        np.testing.assert_array_equal(a, b)

    def test_tau2_range(self):
        with pytest.raises(ValueError):
            simulate_nonnull_study(SimDesign(**SMALL), 1.5)


class TestOracle:
    def test_direction(self):
        t = np.array([2.0, 2.0, -1.0])
        p = oracle_one_sided_p(t, 7, np.array([1, -1, 0]))
        assert p[0] == pytest.approx(t_cdf(-2.0, 7))
        assert p[1] == pytest.approx(t_cdf(2.0, 7))
        assert p[2] == pytest.approx(classical_p(-1.0, 7))

    def test_half_of_two_sided_when_aligned(self):
        t = np.linspace(0.1, 5, 20)
        np.testing.assert_allclose(oracle_one_sided_p(t, 9, np.ones(20)), classical_p(t, 9) / 2,
                                   rtol=1e-13)


class TestExperiments:
    def test_null_experiment(self):
        design = SimDesign(**SMALL, n_datasets=40, seed=2)
        rep = run_null_experiment(design)
        assert rep.kind == "null" and rep.hist_edges.size == HIST_BINS + 1
        for name in ("classical", "fab"):
            assert rep.hist_counts[name].sum() == 40 * 24
            est, se = rep.fdr[name]
            assert 0 <= est <= 1 and se == pytest.approx(np.sqrt(est * (1 - est) / 40))
            assert 0 <= rep.ks[name][1] <= 1

    def test_null_experiment_deterministic_and_parallel_safe(self):
        design = SimDesign(**SMALL, n_datasets=12, seed=4)
        a = run_null_experiment(design)
        b = run_null_experiment(design, workers=2)
        assert a.fdr == b.fdr
        for name in a.hist_counts:
            np.testing.assert_array_equal(a.hist_counts[name], b.hist_counts[name])

    def test_power_experiment(self):
        design = SimDesign(**SMALL, n_datasets=5, tau2_grid=(1.0, 0.0), seed=1)
        rep = run_power_experiment(design)
        assert rep.curves.shape == (2, FDR_GRID.size, 3)
        assert rep.counts.shape == (2, 5, 3)
        # cumulative discoveries can only grow with the FDR level
        assert np.all(np.diff(rep.curves, axis=1) >= 0)
        # the target-level counts are a slice of the same computation
        i = int(np.flatnonzero(np.isclose(FDR_GRID, design.target_fdr))[0])
        np.testing.assert_array_equal(rep.counts.sum(axis=1), rep.curves[:, i, :])
