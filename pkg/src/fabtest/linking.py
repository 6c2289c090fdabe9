"""Empirical-Bayes linking model and the cross-fitted FAB analysis.

The linking model regresses effects on historical features::

    ybar | theta ~ N(theta, diag(sigma^2 / n))
    theta | beta ~ N(X beta, tau^2 I)
    beta         ~ N(0, psi^2 I)

``tau^2`` and ``psi^2`` are fitted by marginal likelihood on one fold,
and leave-one-out conditional moments of each effect give the prior
mean/variance that drive the FAB guide values for the other fold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize

from .errors import InsufficientDataError, NumericalError, ValidationError
from .ttest import GUIDE_CLAMP, bh_adjust, classical_p, fab_p

logger = logging.getLogger(__name__)

TAU2_FLOOR = 1e-12
LEVERAGE_GUARD = 1e-10


# ---------------------------------------------------------------------------
# data containers


@dataclass(frozen=True)
class EffectSummaries:
    """Per-hypothesis sample mean, standard deviation and replicate count."""

    ids: np.ndarray
    row_keys: np.ndarray
    col_keys: np.ndarray
    ybar: np.ndarray
    s: np.ndarray
    n: np.ndarray

    def __post_init__(self):
        for name in ("ids", "row_keys", "col_keys"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=str))
        object.__setattr__(self, "ybar", np.asarray(self.ybar, dtype=float))
        object.__setattr__(self, "s", np.asarray(self.s, dtype=float))
        object.__setattr__(self, "n", np.asarray(self.n, dtype=int))
        m = self.ids.size
        if any(a.shape != (m,) for a in (self.row_keys, self.col_keys, self.ybar, self.s, self.n)):
            raise ValidationError("summary columns must share length")
        if m < 2:
            raise InsufficientDataError("need at least 2 hypotheses")
        if np.unique(self.ids).size != m:
            raise ValidationError("hypothesis ids must be unique")
        if not (np.all(np.isfinite(self.ybar)) and np.all(np.isfinite(self.s))):
            raise ValidationError("ybar and s must be finite")
        if np.any(self.s < 0):
            raise ValidationError("standard deviations must be nonnegative")
        bad = self.ids[self.n < 2]
        if bad.size:
            raise ValidationError(f"hypotheses with n < 2: {', '.join(bad[:20])}")

    def __len__(self):
        return self.ids.size

    def subset(self, idx) -> "EffectSummaries":
        return EffectSummaries(
            self.ids[idx], self.row_keys[idx], self.col_keys[idx],
            self.ybar[idx], self.s[idx], self.n[idx],
        )


@dataclass(frozen=True)
class FeatureSource:
    """Historical features: an explicit matrix or a Kronecker pair.

    Explicit mode keys rows of ``X`` by hypothesis id. Kronecker mode keys
    rows of ``U`` by row entity and rows of ``V`` by column entity; the
    feature row for hypothesis (l, g) is ``kron(V[g], U[l])``, built only for
    the hypotheses actually requested.
    """

    X: np.ndarray | None = None
    keys: Sequence[str] | None = None
    U: np.ndarray | None = None
    V: np.ndarray | None = None
    row_keys: Sequence[str] | None = None
    col_keys: Sequence[str] | None = None
    intercept: bool = False

    @classmethod
    def explicit(cls, X, keys, intercept=False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        keys = [str(k) for k in keys]
        if X.shape[0] != len(keys):
            raise ValidationError("X rows and keys differ in length")
        return cls(X=X, keys=keys, intercept=intercept)

    @classmethod
    def kronecker(cls, U, V, row_keys, col_keys, intercept=False):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        V = np.atleast_2d(np.asarray(V, dtype=float))
        row_keys = [str(k) for k in row_keys]
        col_keys = [str(k) for k in col_keys]
        if U.shape[0] != len(row_keys) or V.shape[0] != len(col_keys):
            raise ValidationError("factor rows and keys differ in length")
        return cls(U=U, V=V, row_keys=row_keys, col_keys=col_keys, intercept=intercept)

    @property
    def is_kronecker(self) -> bool:
        return self.U is not None

    @property
    def q(self) -> int:
        base = self.U.shape[1] * self.V.shape[1] if self.is_kronecker else self.X.shape[1]
        return base + int(self.intercept)

    def resolve(self, summaries: EffectSummaries):
        """Feature rows for the hypotheses in ``summaries``.

        Returns ``(X, included, excluded_ids)`` where ``included`` indexes
        the hypotheses whose keys resolved and ``X`` holds their rows.
        """
        if self.is_kronecker:
            rpos = {k: i for i, k in enumerate(self.row_keys)}
            cpos = {k: i for i, k in enumerate(self.col_keys)}
            li = np.array([rpos.get(k, -1) for k in summaries.row_keys])
            gi = np.array([cpos.get(k, -1) for k in summaries.col_keys])
            ok = (li >= 0) & (gi >= 0)
            included = np.flatnonzero(ok)
            # kron(V_g, U_l) == outer(V_g, U_l).ravel()
            X = np.einsum("ja,ji->jai", self.V[gi[ok]], self.U[li[ok]]).reshape(included.size, -1)
        else:
            pos = {k: i for i, k in enumerate(self.keys)}
            ri = np.array([pos.get(k, -1) for k in summaries.ids])
            included = np.flatnonzero(ri >= 0)
            X = self.X[ri[included]]
        if self.intercept:
            X = np.hstack([X, np.ones((X.shape[0], 1))])
        excluded = [str(k) for k in np.delete(summaries.ids, included)]
        return X, included, excluded


@dataclass(frozen=True)
class VarianceEstimates:
    sigma2_tilde: float
    nu_tilde: float
    tau2: float
    psi2: float
    nbar: float


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: np.ndarray
    seed: int

    def members(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)


@dataclass(frozen=True)
class Spectrum:
    """Eigen-summary of ``X X^T`` against a response vector.

    ``lam`` and ``proj2`` hold the nonzero-rank part (at most ``min(size,
    q)`` entries); the remaining ``size - len(lam)`` directions have
    eigenvalue zero and carry ``total_ss - proj2.sum()`` of the response.
    """

    lam: np.ndarray
    proj2: np.ndarray
    total_ss: float
    size: int

    @property
    def residual_ss(self) -> float:
        return max(self.total_ss - float(self.proj2.sum()), 0.0)


@dataclass
class FabFit:
    """Complete result of a cross-fitted FAB analysis."""

    ids: np.ndarray
    fold: np.ndarray
    t: np.ndarray
    dof: np.ndarray
    b_fab: np.ndarray
    m_tilde: np.ndarray
    v_tilde: np.ndarray
    p_classical: np.ndarray
    p_fab: np.ndarray
    q_classical: np.ndarray
    q_fab: np.ndarray
    estimates: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)
    seed: int = 0

    def __len__(self):
        return self.ids.size


# ---------------------------------------------------------------------------
# fold partitioning and pooled variance


def partition(M: int, seed: int) -> FoldAssignment:
    """Random half split: floor(M/2) hypotheses in fold 1, the rest in fold 2."""
    if M < 4:
        raise InsufficientDataError(f"need at least 4 hypotheses to cross-fit, got {M}")
    perm = np.random.default_rng(seed).permutation(M)
    fold_of = np.full(M, 2, dtype=int)
    fold_of[perm[: M // 2]] = 1
    return FoldAssignment(fold_of, seed)


def pooled_sigma2(s, n, idx=None):
    """Pooled variance ``sum S^2 (n-1) / nu`` and its dof ``nu = sum (n-1)``."""
    s = np.asarray(s, dtype=float)
    n = np.asarray(n, dtype=float)
    if idx is not None:
        s, n = s[idx], n[idx]
    dof = float(np.sum(n - 1))
    if dof <= 0:
        raise InsufficientDataError("fold has no residual degrees of freedom")
    sigma2 = float(np.sum(s * s * (n - 1))) / dof
    if not sigma2 > 0:
        raise InsufficientDataError("pooled variance is zero")
    return sigma2, dof


# ---------------------------------------------------------------------------
# marginal likelihood


def spectral_decompose(X, ybar) -> Spectrum:
    """Eigenvalues of ``X X^T`` and squared projections of ``ybar`` from the SVD of X."""
    X = np.asarray(X, dtype=float)
    ybar = np.asarray(ybar, dtype=float)
    size = ybar.size
    if X.shape[1] == 0:
        return Spectrum(np.zeros(0), np.zeros(0), float(ybar @ ybar), size)
    Q, sv, _ = linalg.svd(X, full_matrices=False, lapack_driver="gesdd")
    proj = Q.T @ ybar
    return Spectrum(sv * sv, proj * proj, float(ybar @ ybar), size)


def spectral_decompose_kron(U, V, Y) -> Spectrum:
    """Spectrum of ``(V kron U)(V kron U)^T`` for a complete L x G grid.

    ``Y`` is the L x G matrix whose column-stacked vectorization is the
    response. Singular values of ``V kron U`` are all products of those of
    U and V, and the projections are ``vec(P_U^T Y P_V)``.
    """
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    Y = np.asarray(Y, dtype=float)
    Pu, su, _ = linalg.svd(U, full_matrices=False)
    Pv, sv, _ = linalg.svd(V, full_matrices=False)
    proj = (Pu.T @ Y @ Pv).ravel(order="F")
    lam = np.kron(sv * sv, su * su)
    return Spectrum(lam, proj * proj, float(np.sum(Y * Y)), Y.size)


def marginal_loglik(tau2, psi2, noise, spectrum: Spectrum) -> float:
    """Marginal log-likelihood of the fold means, without the 2*pi constant.

    Equals ``-(log|A| + y^T A^-1 y) / 2`` with
    ``A = psi2 X X^T + (tau2 + noise) I`` and ``noise = sigma2 / nbar``.
    """
    base = tau2 + noise
    if not base > 0:
        raise ValidationError("tau2 + sigma2/nbar must be positive")
    if tau2 < 0 or psi2 < 0:
        raise ValidationError("variance components must be nonnegative")
    d = base + psi2 * spectrum.lam
    n_null = spectrum.size - spectrum.lam.size
    total = np.sum(np.log(d) + spectrum.proj2 / d)
    total += n_null * np.log(base) + spectrum.residual_ss / base
    return -0.5 * float(total)


def search_box(spectrum: Spectrum, noise: float):
    """Bounds ``(lo, tau2_hi, psi2_hi)`` for the variance-component search."""
    scale = max(spectrum.total_ss / max(spectrum.size, 1), noise)
    pos = spectrum.lam[spectrum.lam > 0]
    lam_bar = float(pos.mean()) if pos.size else 1.0
    return 1e-6 * scale, 10.0 * scale, 10.0 * scale / min(1.0, lam_bar)


def fit_variance_components(spectrum: Spectrum, noise: float, max_iter: int = 500):
    """Maximize :func:`marginal_loglik` over ``tau2, psi2 >= 0``.

    Nelder-Mead on (log tau2, log psi2) from the four corners of the search
    box, followed by a refinement from the best point and bounded 1-D
    searches along the edges tau2 = 0 and psi2 = 0.
    """
    lo, tau_hi, psi_hi = search_box(spectrum, noise)

    def negll(x):
        return -marginal_loglik(np.exp(x[0]), np.exp(x[1]), noise, spectrum)

    bounds = [(np.log(lo), np.log(tau_hi)), (np.log(lo), np.log(psi_hi))]
    opts = {"maxiter": max_iter, "xatol": 1e-7, "fatol": 1e-9}
    best_x, best_f = None, np.inf
    for x0 in ((bounds[0][0], bounds[1][0]), (bounds[0][0], bounds[1][1]),
               (bounds[0][1], bounds[1][0]), (bounds[0][1], bounds[1][1])):
        res = optimize.minimize(negll, x0, method="Nelder-Mead", bounds=bounds, options=opts)
        if res.fun < best_f:
            best_x, best_f = res.x, res.fun
    res = optimize.minimize(negll, best_x, method="Nelder-Mead", bounds=bounds, options=opts)
    if res.fun < best_f:
        best_x, best_f = res.x, res.fun
    candidates = [(float(np.exp(best_x[0])), float(np.exp(best_x[1])), best_f)]

    # boundary solutions
    edge = optimize.minimize_scalar(
        lambda u: -marginal_loglik(0.0, np.exp(u), noise, spectrum),
        bounds=bounds[1], method="bounded", options={"xatol": 1e-8},
    )
    candidates.append((0.0, float(np.exp(edge.x)), edge.fun))
    edge = optimize.minimize_scalar(
        lambda u: -marginal_loglik(np.exp(u), 0.0, noise, spectrum),
        bounds=bounds[0], method="bounded", options={"xatol": 1e-8},
    )
    candidates.append((float(np.exp(edge.x)), 0.0, edge.fun))
    candidates.append((0.0, 0.0, -marginal_loglik(0.0, 0.0, noise, spectrum)))
    tau2, psi2, _ = min(candidates, key=lambda c: c[2])
    return tau2, psi2


# ---------------------------------------------------------------------------
# leave-one-out prior parameters


def _loo_direct(X, ybar, w, tau2, psi2, j):
    keep = np.ones(ybar.size, dtype=bool)
    keep[j] = False
    Xk = X[keep]
    h = 1.0 / (tau2 + w[keep])
    G = Xk.T @ (h[:, None] * Xk) + np.eye(X.shape[1]) / psi2
    rhs = np.column_stack([Xk.T @ (h * ybar[keep]), X[j]])
    sol = linalg.solve(G, rhs, assume_a="pos")
    return X[j] @ sol[:, 0], X[j] @ sol[:, 1]


def loo_prior_params(X, ybar, w, tau2, psi2, index=None, textbook_variance=False):
    """Leave-one-out prior mean and variance of each effect.

    For hypothesis j, ``m_j`` is the mean of ``x_j^T beta`` given all means
    except ``ybar_j``, and ``v_j = (w_j / (w_j + tau2))^2 x_j^T G_{-j}^{-1} x_j
    + tau2`` with ``G_{-j} = X_{-j}^T H_{-j}^{-1} X_{-j} + I / psi2`` and
    ``H = tau2 I + diag(w)``. All j share one factorization of the full G;
    each is a rank-one Woodbury downdate.

    Parameters
    ----------
    X : (M, q) array
    ybar : (M,) array
        Means for all hypotheses; entry j is excluded from its own moments.
    w : (M,) array
        Sampling variances ``sigma2 / n_j``.
    tau2, psi2 : float
    index : array of int, optional
        Hypotheses to evaluate (default all).
    textbook_variance : bool
        Drop the ``(w/(w+tau2))^2`` weight and return the plain conditional
        variance ``x^T G_{-j}^{-1} x + tau2``. For comparison only.

    Returns
    -------
    m_tilde, v_tilde : ndarrays
    """
    X = np.asarray(X, dtype=float)
    ybar = np.asarray(ybar, dtype=float)
    w = np.asarray(w, dtype=float)
    idx = np.arange(ybar.size) if index is None else np.asarray(index)
    t2 = max(float(tau2), TAU2_FLOOR)
    if psi2 <= 0 or X.shape[1] == 0:
        return np.zeros(idx.size), np.full(idx.size, t2)

    h = 1.0 / (t2 + w)
    G = X.T @ (h[:, None] * X) + np.eye(X.shape[1]) / psi2
    try:
        cf = linalg.cho_factor(G)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"linking precision matrix not positive definite: {exc}") from exc
    beta_hat = linalg.cho_solve(cf, X.T @ (h * ybar))
    Xi = X[idx]
    GiXi = linalg.cho_solve(cf, Xi.T)
    lev = np.einsum("jq,qj->j", Xi, GiXi)
    theta = Xi @ beta_hat
    hj = h[idx]
    denom = 1.0 - hj * lev
    ratio = hj * lev / np.where(denom > 0, denom, 1.0)
    m = theta - ratio * (ybar[idx] - theta)
    quad = lev / np.where(denom > 0, denom, 1.0)

    for pos in np.flatnonzero(denom < LEVERAGE_GUARD):
        logger.warning("leverage guard hit for hypothesis %d; refitting directly", idx[pos])
        m[pos], quad[pos] = _loo_direct(X, ybar, w, t2, psi2, idx[pos])

    if textbook_variance:
        v = quad + t2
    else:
        wj = w[idx]
        v = (wj / (wj + t2)) ** 2 * quad + t2
    return m, v


def guide_value(m_tilde, v_tilde, sigma2_tilde, n):
    """FAB guide ``2 m sigma / (sqrt(n) v)``, clamped to ``+-GUIDE_CLAMP``."""
    v_tilde = np.asarray(v_tilde, dtype=float)
    if np.any(~(v_tilde > 0)):
        raise ValidationError("prior variance must be positive")
    if not sigma2_tilde > 0:
        raise ValidationError("sigma2_tilde must be positive")
    with np.errstate(over="ignore"):
        b = 2.0 * np.asarray(m_tilde, dtype=float) * np.sqrt(sigma2_tilde) / (
            np.sqrt(np.asarray(n, dtype=float)) * v_tilde
        )
    b = np.clip(b, -GUIDE_CLAMP, GUIDE_CLAMP)
    return b[()] if b.ndim == 0 else b


# ---------------------------------------------------------------------------
# full pipeline


def fit_fold(X, summaries: EffectSummaries, idx) -> VarianceEstimates:
    """Variance estimates using only the hypotheses in ``idx``."""
    sigma2, nu = pooled_sigma2(summaries.s, summaries.n, idx)
    nbar = float(np.mean(summaries.n[idx]))
    spectrum = spectral_decompose(X[idx], summaries.ybar[idx])
    tau2, psi2 = fit_variance_components(spectrum, sigma2 / nbar)
    return VarianceEstimates(sigma2, nu, tau2, psi2, nbar)


def run_fab_analysis(summaries: EffectSummaries, features: FeatureSource,
                     seed: int = 0, zero_guide: bool = False) -> FabFit:
    """Cross-fitted FAB analysis.

    For each testing fold, sigma2/tau2/psi2 come from the other fold only;
    prior moments for hypothesis j use every mean except ``ybar_j``; the
    t-statistic for j uses ``ybar_j`` and the pooled variance of its own
    fold. Hypotheses whose keys are missing from ``features`` are listed in
    ``FabFit.excluded``. q-values are BH-adjusted over all hypotheses.
    """
    X, included, excluded = features.resolve(summaries)
    if excluded:
        logger.warning("%d hypotheses have no feature row and were excluded", len(excluded))
    data = summaries.subset(included)
    M = len(included)
    folds = partition(M, seed)

    n = data.n.astype(float)
    out = {k: np.empty(M) for k in ("t", "dof", "b", "m", "v", "pc", "pf")}
    estimates = {}
    for test_fold, fit_fold_id in ((1, 2), (2, 1)):
        test_idx = folds.members(test_fold)
        est = fit_fold(X, data, folds.members(fit_fold_id))
        estimates[test_fold] = est
        w = est.sigma2_tilde / n
        m, v = loo_prior_params(X, data.ybar, w, est.tau2, est.psi2, index=test_idx)
        b = np.zeros(test_idx.size) if zero_guide else guide_value(m, v, est.sigma2_tilde, n[test_idx])

        sigma2_hat, nu_hat = pooled_sigma2(data.s, data.n, test_idx)
        t = data.ybar[test_idx] / np.sqrt(sigma2_hat / n[test_idx])
        out["t"][test_idx] = t
        out["dof"][test_idx] = nu_hat
        out["b"][test_idx] = b
        out["m"][test_idx] = m
        out["v"][test_idx] = v
        out["pc"][test_idx] = classical_p(t, nu_hat)
        out["pf"][test_idx] = fab_p(t, b, nu_hat)

    return FabFit(
        ids=data.ids, fold=folds.fold_of, t=out["t"], dof=out["dof"],
        b_fab=out["b"], m_tilde=out["m"], v_tilde=out["v"],
        p_classical=out["pc"], p_fab=out["pf"],
        q_classical=bh_adjust(out["pc"]), q_fab=bh_adjust(out["pf"]),
        estimates=estimates, excluded=excluded, seed=seed,
    )
