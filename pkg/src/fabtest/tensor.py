"""Gibbs sampler for the low-rank multimodal tensor model.

Each modality slice k of an L x G x K tensor is modelled through latent
effects ``theta_lgk ~ N(mu_k + U_l^T B_k V_g, tau2_k)``. Normal slices
observe theta directly, probit slices observe its sign (tau2_k fixed at 1)
and tobit slices observe ``max(theta, 0)``. Missing cells are imputed from
the sampling model on every sweep.

Priors: ``U_l ~ N(0, I)``, ``V_g ~ N(0, I)``, flat on ``vec(B_k)``,
``mu_k ~ N(0, 1)`` and ``1/tau2_k ~ Gamma(shape=1/2, rate=1/2)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import ndtr, ndtri

from .errors import NumericalError, ValidationError
from .truncnorm import sample_truncated_normal

logger = logging.getLogger(__name__)

LIKELIHOODS = ("normal", "probit", "tobit")
RIDGE = 1e-8


@dataclass
class TensorDataset:
    """Dense L x G x K tensor with per-slice likelihood tags.

    ``values`` holds NaN wherever ``observed`` is False.
    """

    values: np.ndarray
    observed: np.ndarray
    likelihoods: tuple
    row_keys: Sequence[str] = ()
    col_keys: Sequence[str] = ()
    modalities: Sequence[str] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.observed = np.asarray(self.observed, dtype=bool)
        self.likelihoods = tuple(self.likelihoods)
        L, G, K = self.values.shape
        if self.observed.shape != self.values.shape:
            raise ValidationError("mask and values differ in shape")
        if len(self.likelihoods) != K:
            raise ValidationError("one likelihood tag per modality slice required")
        if not self.row_keys:
            self.row_keys = [str(i) for i in range(L)]
        if not self.col_keys:
            self.col_keys = [str(i) for i in range(G)]
        if not self.modalities:
            self.modalities = [str(i) for i in range(K)]
        self.row_keys, self.col_keys = list(self.row_keys), list(self.col_keys)
        self.modalities = list(self.modalities)
        self.values = np.where(self.observed, self.values, np.nan)
        for k, lik in enumerate(self.likelihoods):
            if lik not in LIKELIHOODS:
                raise ValidationError(f"unknown likelihood {lik!r}")
            y = self.values[:, :, k][self.observed[:, :, k]]
            if not np.all(np.isfinite(y)):
                raise ValidationError(f"slice {self.modalities[k]} has non-finite values")
            if lik == "probit" and not np.all((y == 0) | (y == 1)):
                raise ValidationError(f"probit slice {self.modalities[k]} must be 0/1")
            if lik == "tobit" and np.any(y < 0):
                raise ValidationError(f"tobit slice {self.modalities[k]} must be nonnegative")

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def from_entries(cls, entries, shape, likelihoods, **keys):
        """Build from ``(l, g, k, value)`` tuples; ``value=None`` marks a missing cell."""
        values = np.full(shape, np.nan)
        observed = np.zeros(shape, dtype=bool)
        seen = set()
        for l, g, k, value in entries:
            if (l, g, k) in seen:
                raise ValidationError(f"duplicate cell {(l, g, k)}")
            seen.add((l, g, k))
            if value is not None:
                values[l, g, k] = value
                observed[l, g, k] = True
        return cls(values, observed, likelihoods, **keys)

    def entries(self):
        for l, g, k in zip(*np.nonzero(self.observed)):
            yield int(l), int(g), int(k), float(self.values[l, g, k])


@dataclass
class ModelState:
    U: np.ndarray
    V: np.ndarray
    B: np.ndarray  # (K, d_U, d_V)
    mu: np.ndarray
    tau2: np.ndarray
    theta: np.ndarray  # (L, G, K) latent effects
    Y: np.ndarray  # working data: observations plus current imputations

    def copy(self):
        return ModelState(*(getattr(self, f).copy() for f in
                            ("U", "V", "B", "mu", "tau2", "theta", "Y")))


@dataclass(frozen=True)
class ChainConfig:
    d_u: int = 3
    d_v: int = 3
    iters: int = 1000
    burn_in: int = 500
    thin: int = 1
    seed: int = 0
    impute: bool = True
    debug: bool = False

    def __post_init__(self):
        if min(self.d_u, self.d_v, self.iters, self.thin) < 1:
            raise ValidationError("ranks, iters and thin must be positive")
        if not 0 <= self.burn_in < self.iters:
            raise ValidationError("burn_in must lie in [0, iters)")


@dataclass
class ChainOutput:
    U: np.ndarray  # (S, L, d_U)
    V: np.ndarray  # (S, G, d_V)
    B: np.ndarray  # (S, K, d_U, d_V)
    mu: np.ndarray  # (S, K)
    tau2: np.ndarray  # (S, K)
    row_keys: list = field(default_factory=list)
    col_keys: list = field(default_factory=list)
    modalities: list = field(default_factory=list)
    likelihoods: tuple = ()

    @property
    def n_samples(self):
        return self.U.shape[0]

    def linear_predictors(self):
        """Per-sample ``mu_k + U B_k V^T`` with shape (S, L, G, K)."""
        return (np.einsum("sli,skij,sgj->slgk", self.U, self.B, self.V, optimize=True)
                + self.mu[:, None, None, :])


def linear_predictor(state: ModelState) -> np.ndarray:
    return np.einsum("li,kij,gj->lgk", state.U, state.B, state.V, optimize=True) + state.mu


# ---------------------------------------------------------------------------
# full conditionals


def _sample_factor_block(other, loads, resid, weight, prec, rng):
    """Draw every row of one factor matrix from its Gaussian full conditional.

    Row i has precision ``I + sum_{j,k} w_ijk prec_k z_jk z_jk^T`` and mean
    ``Lambda^-1 sum_{j,k} w_ijk prec_k r_ijk z_jk`` where
    ``z_jk = loads[k] @ other[j]``.
    """
    n, d = resid.shape[0], loads.shape[1]
    Z = np.einsum("jb,kab->jka", other, loads)
    wp = weight * prec
    num = np.einsum("ijk,jka->ia", wp * resid, Z, optimize=True)
    noise = rng.standard_normal((n, d))
    if np.all(weight == 1.0):
        Lam = np.eye(d) + np.einsum("k,jka,jkc->ac", prec, Z, Z, optimize=True)
        C = linalg.cholesky(Lam, lower=True)
        mean = linalg.cho_solve((C, True), num.T).T
        return mean + linalg.solve_triangular(C.T, noise.T, lower=False).T
    Lam = np.eye(d) + np.einsum("ijk,jka,jkc->iac", wp, Z, Z, optimize=True)
    C = np.linalg.cholesky(Lam)
    mean = np.linalg.solve(Lam, num[..., None])[..., 0]
    return mean + np.linalg.solve(np.swapaxes(C, 1, 2), noise[..., None])[..., 0]


def _precisions(state):
    return 1.0 / state.tau2


def sample_row_factors(state: ModelState, live, rng):
    """New U from ``N(eta_l, Lambda_l^-1)`` for every row l."""
    resid = state.theta - state.mu
    return _sample_factor_block(state.V, state.B, resid, live.astype(float),
                                _precisions(state), rng)


def sample_col_factors(state: ModelState, live, rng):
    """New V; the row update with U and V exchanged and each B_k transposed."""
    resid = np.transpose(state.theta - state.mu, (1, 0, 2))
    return _sample_factor_block(state.U, np.transpose(state.B, (0, 2, 1)), resid,
                                np.transpose(live, (1, 0, 2)).astype(float),
                                _precisions(state), rng)


def loading_moments(U, V, resid, weight, prec):
    """Precision ``Psi`` and mean ``xi`` of ``vec(B_k)`` under the flat prior.

    ``vec`` stacks columns, so coefficient ``B[i, a]`` sits at ``i + d_U a``
    and pairs with ``kron(V_g, U_l)``.
    """
    dU, dV = U.shape[1], V.shape[1]
    if np.all(weight == 1.0):
        Psi = prec * np.kron(V.T @ V, U.T @ U)
    else:
        UU = np.einsum("lg,li,lj->gij", weight, U, U)
        Psi = prec * np.einsum("ga,gb,gij->aibj", V, V, UU).reshape(dU * dV, dU * dV)
    rhs = prec * (U.T @ (weight * resid) @ V).ravel(order="F")
    try:
        cf = linalg.cho_factor(Psi, lower=True)
    except linalg.LinAlgError:
        logger.warning("singular loading precision; adding ridge %g", RIDGE)
        Psi = Psi + RIDGE * np.eye(dU * dV)
        cf = linalg.cho_factor(Psi, lower=True)
    return Psi, linalg.cho_solve(cf, rhs), cf


def sample_slice_loadings(state: ModelState, live, rng):
    """New B_k for every slice from ``N(xi_k, Psi_k^-1)``."""
    K, dU, dV = state.B.shape
    out = np.empty_like(state.B)
    for k in range(K):
        resid = state.theta[:, :, k] - state.mu[k]
        _, xi, (C, _) = loading_moments(state.U, state.V, resid,
                                        live[:, :, k].astype(float), 1.0 / state.tau2[k])
        draw = xi + linalg.solve_triangular(C.T, rng.standard_normal(dU * dV), lower=False)
        out[k] = draw.reshape(dV, dU).T
    return out


def sample_intercepts(state: ModelState, live, rng):
    """New mu_k from ``N(gamma_k, 1/phi_k)`` with ``phi_k = N_k / tau2_k + 1``."""
    core = np.einsum("li,kij,gj->lgk", state.U, state.B, state.V, optimize=True)
    prec = 1.0 / state.tau2
    n_live = live.sum(axis=(0, 1))
    phi = n_live * prec + 1.0
    gamma = prec * np.sum(live * (state.theta - core), axis=(0, 1)) / phi
    return gamma + rng.standard_normal(gamma.size) / np.sqrt(phi)


def precision_posterior(sum_sq, n_live):
    """Shape and rate of the Gamma full conditional of ``1/tau2``."""
    return 0.5 * (n_live + 1.0), 0.5 * (sum_sq + 1.0)


def sample_precisions(state: ModelState, live, likelihoods, rng):
    """New tau2_k; probit slices stay at 1."""
    resid = state.theta - linear_predictor(state)
    sum_sq = np.sum(live * resid * resid, axis=(0, 1))
    shape, rate = precision_posterior(sum_sq, live.sum(axis=(0, 1)))
    tau2 = 1.0 / rng.gamma(shape, 1.0 / rate)
    probit = np.array([lik == "probit" for lik in likelihoods])
    return np.where(probit, 1.0, tau2)


def impute_missing(state: ModelState, data: TensorDataset, rng):
    """Redraw every unobserved cell of ``state.Y`` from its sampling model."""
    missing = ~data.observed
    if not missing.any():
        return
    pred = linear_predictor(state)
    sd = np.sqrt(state.tau2)
    for k, lik in enumerate(data.likelihoods):
        cells = missing[:, :, k]
        if not cells.any():
            continue
        m = pred[:, :, k][cells]
        if lik == "normal":
            draw = m + sd[k] * rng.standard_normal(m.size)
        elif lik == "probit":
            draw = (rng.random(m.size) < ndtr(m)).astype(float)
        else:
            draw = sample_truncated_normal(m, sd[k], "positive", rng)
        state.Y[:, :, k][cells] = draw


def update_latents(state: ModelState, likelihoods, live, rng):
    """Refresh theta on live cells given the (possibly imputed) data."""
    pred = linear_predictor(state)
    for k, lik in enumerate(likelihoods):
        cells = live[:, :, k]
        y = state.Y[:, :, k][cells]
        if lik == "normal":
            state.theta[:, :, k][cells] = y
        elif lik == "probit":
            side = np.where(y > 0.5, 1, -1)
            state.theta[:, :, k][cells] = sample_truncated_normal(
                pred[:, :, k][cells], 1.0, side, rng)
        else:
            new = y.copy()
            zero = y <= 0
            new[zero] = sample_truncated_normal(
                pred[:, :, k][cells][zero], np.sqrt(state.tau2[k]), "negative", rng)
            state.theta[:, :, k][cells] = new


def check_state(state: ModelState, data: TensorDataset, live, iteration=None):
    """Support invariants of the sampler state; raises NumericalError on violation."""
    def fail(msg):
        raise NumericalError(msg, iteration=iteration, block="invariants")

    if not np.all(state.tau2 > 0):
        fail("nonpositive tau2")
    for k, lik in enumerate(data.likelihoods):
        cells = live[:, :, k]
        th = state.theta[:, :, k][cells]
        y = state.Y[:, :, k][cells]
        if lik == "probit":
            if state.tau2[k] != 1.0:
                fail("probit slice must keep tau2 = 1")
            if np.any((y == 1) & (th <= 0)) or np.any((y == 0) & (th > 0)):
                fail("probit latent sign disagrees with data")
        elif lik == "tobit":
            if np.any((y > 0) & (th != y)) or np.any((y == 0) & (th > 0)):
                fail("tobit latent inconsistent with data")
    for name in ("U", "V", "B", "mu"):
        if not np.all(np.isfinite(getattr(state, name))):
            fail(f"non-finite {name}")
    if not np.all(np.isfinite(state.theta[live])):
        fail("non-finite theta")


# ---------------------------------------------------------------------------
# driver


def initialize(data: TensorDataset, config: ChainConfig, rng) -> ModelState:
    L, G, K = data.shape
    mu = np.zeros(K)
    tau2 = np.ones(K)
    for k, lik in enumerate(data.likelihoods):
        y = data.values[:, :, k][data.observed[:, :, k]]
        if y.size == 0:
            continue
        if lik == "probit":
            mu[k] = ndtri(np.clip(y.mean(), 1e-3, 1 - 1e-3))
        else:
            mu[k] = y.mean()
            tau2[k] = y.var() if y.size > 1 and y.var() > 0 else 1.0
    Y = np.where(data.observed, data.values, 0.0)
    theta = np.where(data.observed, Y, mu)
    return ModelState(
        U=rng.standard_normal((L, config.d_u)),
        V=rng.standard_normal((G, config.d_v)),
        B=np.zeros((K, config.d_u, config.d_v)),
        mu=mu, tau2=tau2, theta=theta, Y=Y,
    )


def sweep(state: ModelState, data: TensorDataset, live, rng, impute=True,
          update_loadings=True, iteration=None):
    """One Gibbs sweep: latents, U, V, B, mu, tau2 (in that order)."""
    blocks = ["latents", "U", "V", "B", "mu", "tau2"]
    if not update_loadings:
        blocks.remove("B")
    for name in blocks:
        try:
            if name == "latents":
                if impute:
                    impute_missing(state, data, rng)
                update_latents(state, data.likelihoods, live, rng)
            elif name == "U":
                state.U = sample_row_factors(state, live, rng)
            elif name == "V":
                state.V = sample_col_factors(state, live, rng)
            elif name == "B":
                state.B = sample_slice_loadings(state, live, rng)
            elif name == "mu":
                state.mu = sample_intercepts(state, live, rng)
            else:
                state.tau2 = sample_precisions(state, live, data.likelihoods, rng)
        except (np.linalg.LinAlgError, linalg.LinAlgError, FloatingPointError) as exc:
            raise NumericalError(str(exc), iteration=iteration, block=name) from exc


def run_chain(data: TensorDataset, config: ChainConfig, callback=None) -> ChainOutput:
    """Run the Gibbs sampler and keep thinned post-burn-in samples.

    Deterministic given ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    state = initialize(data, config, rng)
    live = np.ones(data.shape, dtype=bool) if config.impute else data.observed.copy()
    keep = {name: [] for name in ("U", "V", "B", "mu", "tau2")}
    for it in range(config.iters):
        sweep(state, data, live, rng, impute=config.impute, iteration=it)
        if config.debug or it % 100 == 0:
            check_state(state, data, live, iteration=it)
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            for name in keep:
                keep[name].append(getattr(state, name).copy())
        if callback is not None:
            callback(it, state)
    return ChainOutput(
        **{name: np.stack(v) for name, v in keep.items()},
        row_keys=list(data.row_keys), col_keys=list(data.col_keys),
        modalities=list(data.modalities), likelihoods=tuple(data.likelihoods),
    )
