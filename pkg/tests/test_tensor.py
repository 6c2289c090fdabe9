"""Gibbs sampler: full conditionals against closed forms, latents, imputation, driver."""

import numpy as np
import pytest
from scipy import stats
from scipy.special import ndtr

from fabtest.errors import NumericalError, ValidationError
from fabtest.tensor import (
    ChainConfig,
    ModelState,
    TensorDataset,
    _sample_factor_block,
    check_state,
    impute_missing,
    initialize,
    linear_predictor,
    loading_moments,
    precision_posterior,
    run_chain,
    sample_col_factors,
    sample_intercepts,
    sample_precisions,
    sample_row_factors,
    sample_slice_loadings,
    sweep,
    update_latents,
)
from fabtest.toy import probit_auc, synthetic_tensor
from fabtest.truncnorm import sample_truncated_normal

N_DRAWS = 20_000


def assert_moments(draws, mean, var, k=3.0):
    """Sample mean and variance within k Monte Carlo standard errors."""
    n = draws.size
    assert abs(draws.mean() - mean) <= k * np.sqrt(var / n), (draws.mean(), mean)
    # SE of the sample variance for a normal population
    assert abs(draws.var(ddof=1) - var) <= k * var * np.sqrt(2.0 / (n - 1)), (draws.var(), var)


def scalar_state(rng, L=3, G=4, K=2):
    """Rank-one state small enough to write each conditional by hand."""
    return ModelState(
        U=rng.standard_normal((L, 1)), V=rng.standard_normal((G, 1)),
        B=rng.standard_normal((K, 1, 1)), mu=rng.standard_normal(K),
        tau2=rng.uniform(0.3, 2.0, K), theta=rng.standard_normal((L, G, K)),
        Y=np.zeros((L, G, K)),
    )


@pytest.fixture
def masked():
    rng = np.random.default_rng(0)
    live = rng.random((3, 4, 2)) < 0.7
    live[0, 0, 0] = True
    return live


class TestScalarConditionals:
    """Each block against its conjugate closed form with d_U = d_V = 1."""

    def test_row_factor(self, masked):
        rng = np.random.default_rng(1)
        st = scalar_state(rng)
        l = 1
        prec = 1.0 / st.tau2
        z = st.B[:, 0, 0][None, :] * st.V[:, 0][:, None]  # (G, K)
        r = st.theta[l] - st.mu
        w = masked[l]
        lam = 1.0 + np.sum(w * prec * z * z)
        mean = np.sum(w * prec * r * z) / lam
        draws = np.array([sample_row_factors(st, masked, rng)[l, 0] for _ in range(N_DRAWS)])
        assert_moments(draws, mean, 1.0 / lam)

    def test_col_factor(self, masked):
        rng = np.random.default_rng(2)
        st = scalar_state(rng)
        g = 2
        prec = 1.0 / st.tau2
        z = st.B[:, 0, 0][None, :] * st.U[:, 0][:, None]  # (L, K)
        r = st.theta[:, g] - st.mu
        w = masked[:, g]
        lam = 1.0 + np.sum(w * prec * z * z)
        mean = np.sum(w * prec * r * z) / lam
        draws = np.array([sample_col_factors(st, masked, rng)[g, 0] for _ in range(N_DRAWS)])
        assert_moments(draws, mean, 1.0 / lam)

    def test_loading(self, masked):
        rng = np.random.default_rng(3)
        st = scalar_state(rng)
        k = 1
        uv = np.outer(st.U[:, 0], st.V[:, 0])
        w = masked[:, :, k]
        psi = np.sum(w * uv * uv) / st.tau2[k]
        mean = np.sum(w * (st.theta[:, :, k] - st.mu[k]) * uv) / st.tau2[k] / psi
        draws = np.array([sample_slice_loadings(st, masked, rng)[k, 0, 0] for _ in range(N_DRAWS)])
        assert_moments(draws, mean, 1.0 / psi)

    def test_intercept(self, masked):
        rng = np.random.default_rng(4)
        st = scalar_state(rng)
        k = 0
        core = np.outer(st.U[:, 0], st.V[:, 0]) * st.B[k, 0, 0]
        w = masked[:, :, k]
        phi = w.sum() / st.tau2[k] + 1.0
        mean = np.sum(w * (st.theta[:, :, k] - core)) / st.tau2[k] / phi
        draws = np.array([sample_intercepts(st, masked, rng)[k] for _ in range(N_DRAWS)])
        assert_moments(draws, mean, 1.0 / phi)

    def test_precision(self, masked):
        rng = np.random.default_rng(5)
        st = scalar_state(rng)
        k = 1
        resid = st.theta[:, :, k] - linear_predictor(st)[:, :, k]
        w = masked[:, :, k]
        shape = (w.sum() + 1) / 2
        rate = (np.sum(w * resid * resid) + 1) / 2
        draws = np.array([1.0 / sample_precisions(st, masked, ("normal", "normal"), rng)[k]
                          for _ in range(N_DRAWS)])
        assert_moments(draws, shape / rate, shape / rate ** 2)

    def test_precision_posterior_parameters(self):
        assert precision_posterior(3.0, 4) == (2.5, 2.0)

    def test_probit_precision_fixed(self, masked):
        rng = np.random.default_rng(6)
        st = scalar_state(rng)
        tau2 = sample_precisions(st, masked, ("probit", "normal"), rng)
        assert tau2[0] == 1.0 and tau2[1] != 1.0


class TestBlockOracles:
    """Vectorized blocks against per-row dense computations with the same noise."""

    @pytest.mark.parametrize("all_live", [True, False])
    def test_factor_block(self, all_live):
        rng = np.random.default_rng(7)
        L, G, K, dU, dV = 5, 6, 3, 3, 2
        other = rng.standard_normal((G, dV))
        loads = rng.standard_normal((K, dU, dV))
        resid = rng.standard_normal((L, G, K))
        weight = np.ones((L, G, K)) if all_live else (rng.random((L, G, K)) < 0.6).astype(float)
        prec = rng.uniform(0.5, 2.0, K)
        got = _sample_factor_block(other, loads, resid, weight, prec, np.random.default_rng(9))
        noise = np.random.default_rng(9).standard_normal((L, dU))
        for i in range(L):
            lam = np.eye(dU)
            num = np.zeros(dU)
            for j in range(G):
                for k in range(K):
                    z = loads[k] @ other[j]
                    lam += weight[i, j, k] * prec[k] * np.outer(z, z)
                    num += weight[i, j, k] * prec[k] * resid[i, j, k] * z
            C = np.linalg.cholesky(lam)
            want = np.linalg.solve(lam, num) + np.linalg.solve(C.T, noise[i])
            np.testing.assert_allclose(got[i], want, atol=1e-12)

    @pytest.mark.parametrize("all_live", [True, False])
    def test_loading_moments(self, all_live):
        rng = np.random.default_rng(8)
        L, G, dU, dV = 6, 7, 2, 3
        U, V = rng.standard_normal((L, dU)), rng.standard_normal((G, dV))
        resid = rng.standard_normal((L, G))
        weight = np.ones((L, G)) if all_live else (rng.random((L, G)) < 0.7).astype(float)
        Psi, xi, _ = loading_moments(U, V, resid, weight, 1.7)
        P = np.zeros((dU * dV, dU * dV))
        r = np.zeros(dU * dV)
        for l in range(L):
            for g in range(G):
                x = np.kron(V[g], U[l])
                P += 1.7 * weight[l, g] * np.outer(x, x)
                r += 1.7 * weight[l, g] * resid[l, g] * x
        np.testing.assert_allclose(Psi, P, atol=1e-12)
        np.testing.assert_allclose(xi, np.linalg.solve(P, r), atol=1e-10)
        # vec ordering: U B V^T evaluated through kron rows
        B = xi.reshape(dV, dU).T
        np.testing.assert_allclose((U @ B @ V.T).ravel(order="F"),
                                   np.kron(V, U) @ xi, atol=1e-12)

    def test_singular_loading_precision_gets_ridge(self):
        U = np.zeros((4, 2))
        V = np.ones((3, 2))
        Psi, xi, _ = loading_moments(U, V, np.zeros((4, 3)), np.ones((4, 3)), 1.0)
        assert np.all(np.isfinite(xi))


class TestTruncatedNormal:
    def test_half_normal_mean(self):
        rng = np.random.default_rng(10)
        x = sample_truncated_normal(np.zeros(N_DRAWS), 1.0, "positive", rng)
        assert np.all(x > 0)
        mean = np.sqrt(2 / np.pi)
        var = 1 - 2 / np.pi
        assert abs(x.mean() - mean) <= 3 * np.sqrt(var / N_DRAWS)

    def test_negative_side(self):
        rng = np.random.default_rng(11)
        x = sample_truncated_normal(np.full(N_DRAWS, 0.5), 2.0, "negative", rng)
        assert np.all(x < 0)
        ref = stats.truncnorm(-np.inf, -0.25, loc=0.5, scale=2.0)
        assert stats.kstest(x, ref.cdf).pvalue > 1e-3

    @pytest.mark.parametrize("mean", [-3.0, -6.0, -12.0, 1.0])
    def test_distribution_matches_scipy(self, mean):
        rng = np.random.default_rng(12)
        x = sample_truncated_normal(np.full(N_DRAWS, mean), 1.0, "positive", rng)
        ref = stats.truncnorm(-mean, np.inf, loc=mean, scale=1.0)
        assert np.all(x > 0)
        assert stats.kstest(x, ref.cdf).pvalue > 1e-3

    def test_far_tail_is_exact(self):
        # E[X | X > 0] for N(-30, 1) is about 1/30; a clipping sampler would return 0 or nan
        rng = np.random.default_rng(13)
        x = sample_truncated_normal(np.full(N_DRAWS, -30.0), 1.0, "positive", rng)
        a = 30.0
        mills = stats.norm.pdf(a) / stats.norm.sf(a)
        assert np.all(x > 0)
        assert x.mean() == pytest.approx(mills - a, rel=0.03)

    def test_per_element_side(self):
        rng = np.random.default_rng(14)
        side = np.array([1, -1, 1, -1] * 50)
        x = sample_truncated_normal(np.zeros(side.size), 1.0, side, rng)
        assert np.all(np.sign(x) == side)

    def test_bad_arguments(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            sample_truncated_normal(0.0, 0.0, "positive", rng)
        with pytest.raises(ValueError):
            sample_truncated_normal(0.0, 1.0, "up", rng)


def small_data(likelihoods=("normal", "probit", "tobit"), missing=0.3, seed=0):
    data, _ = synthetic_tensor(L=6, G=7, likelihoods=likelihoods, d=2, missing=missing, seed=seed)
    return data


class TestLatentsAndImputation:
    def test_latent_support(self):
        data = small_data()
        rng = np.random.default_rng(0)
        st = initialize(data, ChainConfig(2, 2, 10, 0), rng)
        live = data.observed
        update_latents(st, data.likelihoods, live, rng)
        check_state(st, data, live)
        th, y = st.theta[:, :, 1][live[:, :, 1]], st.Y[:, :, 1][live[:, :, 1]]
        assert np.all((th > 0) == (y == 1))
        th, y = st.theta[:, :, 2][live[:, :, 2]], st.Y[:, :, 2][live[:, :, 2]]
        assert np.all(th[y > 0] == y[y > 0]) and np.all(th[y == 0] < 0)

    def test_probit_latent_moments(self):
        # one probit cell with y = 1: theta ~ N+(pred, 1)
        rng = np.random.default_rng(1)
        st = ModelState(np.ones((1, 1)), np.ones((1, 1)), np.full((1, 1, 1), 0.4),
                        np.array([-0.2]), np.array([1.0]), np.zeros((1, 1, 1)), np.ones((1, 1, 1)))
        live = np.ones((1, 1, 1), dtype=bool)
        draws = []
        for _ in range(N_DRAWS):
            update_latents(st, ("probit",), live, rng)
            draws.append(st.theta[0, 0, 0])
        ref = stats.truncnorm(-0.2, np.inf, loc=0.2, scale=1.0)
        assert abs(np.mean(draws) - ref.mean()) <= 3 * ref.std() / np.sqrt(N_DRAWS)

    def test_imputation_supports_and_rates(self):
        data = small_data(missing=0.5)
        rng = np.random.default_rng(2)
        st = initialize(data, ChainConfig(2, 2, 10, 0), rng)
        pred = linear_predictor(st)
        miss = ~data.observed
        hits = np.zeros(data.shape)
        n = 2000
        for _ in range(n):
            impute_missing(st, data, rng)
            hits += st.Y > 0
            assert np.all(st.Y[:, :, 2][miss[:, :, 2]] > 0)
            assert set(np.unique(st.Y[:, :, 1][miss[:, :, 1]])) <= {0.0, 1.0}
        # probit imputations follow Phi(pred)
        p = ndtr(pred[:, :, 1][miss[:, :, 1]])
        rate = hits[:, :, 1][miss[:, :, 1]] / n
        assert np.all(np.abs(rate - p) <= 4 * np.sqrt(p * (1 - p) / n) + 1e-9)
        # observed cells never move
        np.testing.assert_array_equal(st.Y[data.observed], data.values[data.observed])

    def test_normal_imputation_moments(self):
        data = TensorDataset(np.array([[[1.0], [np.nan]]]), np.array([[[True], [False]]]), ("normal",))
        rng = np.random.default_rng(3)
        st = ModelState(np.ones((1, 1)), np.ones((2, 1)), np.full((1, 1, 1), 0.5),
                        np.array([0.3]), np.array([0.8]), np.zeros((1, 2, 1)), np.zeros((1, 2, 1)))
        draws = []
        for _ in range(N_DRAWS):
            impute_missing(st, data, rng)
            draws.append(st.Y[0, 1, 0])
        assert_moments(np.array(draws), 0.8, 0.8)


class TestStationarity:
    def test_successive_conditional_recovers_prior(self):
        """Alternate data-given-parameters and one sweep; parameters must keep their prior.

        The loadings have an improper flat prior, so they are held fixed.
        Standard errors come from batch means to account for autocorrelation.
        """
        rng = np.random.default_rng(20)
        L, G = 3, 4
        st = ModelState(rng.standard_normal((L, 1)), rng.standard_normal((G, 1)),
                        np.full((1, 1, 1), 0.8), rng.standard_normal(1),
                        np.array([1.0]), np.zeros((L, G, 1)), np.zeros((L, G, 1)))
        data = TensorDataset(np.zeros((L, G, 1)), np.ones((L, G, 1), bool), ("normal",))
        live = np.ones((L, G, 1), dtype=bool)
        n_it = 30_000
        keep = np.empty((n_it, 3))
        for it in range(n_it):
            pred = linear_predictor(st)
            st.Y = pred + np.sqrt(st.tau2) * rng.standard_normal(pred.shape)
            sweep(st, data, live, rng, impute=False, update_loadings=False)
            keep[it] = st.mu[0], st.U[0, 0], 1.0 / st.tau2[0]
        batches = keep.reshape(100, -1, 3).mean(axis=1)
        se = batches.std(axis=0, ddof=1) / np.sqrt(100)
        # prior means: mu ~ N(0,1), U ~ N(0,1), 1/tau2 ~ Gamma(1/2, rate 1/2) with mean 1
        for value, target, s in zip(keep.mean(axis=0), (0.0, 0.0, 1.0), se):
            assert abs(value - target) <= 4 * s, (value, target, s)
        second = (keep[:, :2] ** 2).reshape(100, -1, 2).mean(axis=1)
        se2 = second.std(axis=0, ddof=1) / np.sqrt(100)
        assert np.all(np.abs(second.mean(axis=0) - 1.0) <= 4 * se2)


class TestDriver:
    def test_deterministic(self):
        data = small_data()
        cfg = ChainConfig(2, 2, iters=30, burn_in=10, seed=4)
        a, b = run_chain(data, cfg), run_chain(data, cfg)
        np.testing.assert_array_equal(a.U, b.U)
        np.testing.assert_array_equal(a.B, b.B)

    def test_sample_counts_and_shapes(self):
        data = small_data()
        out = run_chain(data, ChainConfig(2, 3, iters=40, burn_in=10, thin=3, seed=0))
        assert out.n_samples == 10
        assert out.U.shape == (10, 6, 2) and out.V.shape == (10, 7, 3)
        assert out.B.shape == (10, 3, 2, 3)
        assert np.all(out.tau2[:, 1] == 1.0)
        assert out.linear_predictors().shape == (10, 6, 7, 3)

    def test_without_imputation(self):
        data = small_data()
        out = run_chain(data, ChainConfig(2, 2, iters=20, burn_in=5, impute=False, debug=True))
        assert np.all(np.isfinite(out.U))

    def test_recovery_on_normal_slice(self):
        data, truth = synthetic_tensor(L=20, G=25, likelihoods=("normal", "probit"), d=2, seed=3)
        out = run_chain(data, ChainConfig(2, 2, iters=400, burn_in=200, seed=1))
        eta = out.linear_predictors().mean(axis=0)
        assert np.corrcoef(eta[:, :, 0].ravel(), truth["eta"][:, :, 0].ravel())[0, 1] > 0.9
        held = ~data.observed[:, :, 1]
        assert probit_auc(eta[:, :, 1][held], truth["theta"][:, :, 1][held] > 0) > 0.75

    def test_linalg_failure_names_block(self, monkeypatch):
        import fabtest.tensor as tensor

        def boom(*a, **k):
            raise np.linalg.LinAlgError("not positive definite")

        monkeypatch.setattr(tensor, "sample_col_factors", boom)
        data = small_data()
        with pytest.raises(NumericalError) as err:
            run_chain(data, ChainConfig(2, 2, iters=5, burn_in=0))
        assert err.value.block == "V" and err.value.iteration == 0

    def test_check_state_catches_violation(self):
        data = small_data(missing=0.0)
        rng = np.random.default_rng(0)
        st = initialize(data, ChainConfig(2, 2, 10, 0), rng)
        live = data.observed
        update_latents(st, data.likelihoods, live, rng)
        st.theta[:, :, 1] = np.abs(st.theta[:, :, 1])
        with pytest.raises(NumericalError):
            check_state(st, data, live, iteration=3)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            ChainConfig(0, 2)
        with pytest.raises(ValidationError):
            ChainConfig(2, 2, iters=10, burn_in=10)


class TestDataset:
    def test_support_checks(self):
        obs = np.ones((1, 2, 1), bool)
        with pytest.raises(ValidationError):
            TensorDataset(np.array([[[0.5], [1.0]]]), obs, ("probit",))
        with pytest.raises(ValidationError):
            TensorDataset(np.array([[[-0.5], [1.0]]]), obs, ("tobit",))
        with pytest.raises(ValidationError):
            TensorDataset(np.zeros((1, 2, 1)), obs, ("poisson",))

    def test_from_entries(self):
        d = TensorDataset.from_entries([(0, 0, 0, 1.5), (0, 1, 0, None)], (1, 2, 1), ("normal",))
        assert d.observed.sum() == 1 and np.isnan(d.values[0, 1, 0])
        with pytest.raises(ValidationError):
            TensorDataset.from_entries([(0, 0, 0, 1.0), (0, 0, 0, 2.0)], (1, 1, 1), ("normal",))
