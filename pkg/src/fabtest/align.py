"""Procrustes alignment of factor samples and posterior point estimates.

``U B_k V^T`` is unchanged by ``U -> U T``, ``B_k -> T^-1 B_k S^-T``,
``V -> V S`` for invertible T and S, so raw Gibbs samples of U and V wander
through rotations and rescalings. Each sample is rotated toward a common
reference and its columns rescaled to unit norm, the inverse transforms
are pushed into every B_k.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .tensor import ChainOutput

logger = logging.getLogger(__name__)


@dataclass
class AlignedSamples:
    U: np.ndarray  # (S, L, d_U), unit columns
    V: np.ndarray  # (S, G, d_V), unit columns
    B: np.ndarray  # (S, K, d_U, d_V)
    mu: np.ndarray
    tau2: np.ndarray
    reference: int
    T_U: np.ndarray  # U_aligned = U @ T_U
    T_V: np.ndarray
    zero_columns: list  # (sample, factor, column) triples whose scale was set to 1
    row_keys: list
    col_keys: list
    modalities: list


@dataclass
class PointEstimates:
    U: np.ndarray
    V: np.ndarray
    B: np.ndarray
    mu: np.ndarray
    tau2: np.ndarray
    row_keys: list
    col_keys: list
    modalities: list


def _canonical_signs(P, Qt):
    # flip singular pairs so that the first nonzero entry of each left vector is positive
    for i in range(P.shape[1]):
        nz = np.flatnonzero(np.abs(P[:, i]) > 1e-14)
        if nz.size and P[nz[0], i] < 0:
            P[:, i] *= -1
            Qt[i] *= -1
    return P, Qt


def procrustes_rotation(sample, reference):
    """Orthogonal R minimizing ``||sample @ R - reference||_F``."""
    sample = np.asarray(sample, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if sample.shape != reference.shape:
        raise ValueError(f"shape mismatch {sample.shape} vs {reference.shape}")
    P, sv, Qt = linalg.svd(sample.T @ reference)
    if sv.size and sv[-1] <= 1e-12 * max(sv[0], 1e-300):
        logger.warning("rank-deficient Procrustes cross-product; using sign convention")
        P, Qt = _canonical_signs(P, Qt)
    return P @ Qt


def _unit_columns(A):
    norms = np.linalg.norm(A, axis=0)
    zero = norms == 0
    return np.where(zero, 1.0, norms), np.flatnonzero(zero)


def align_factor(F, reference, raw_reference=None, max_iter=5000, tol=1e-13):
    """Rotate-then-rescale ``F`` toward a unit-column ``reference``.

    The first rotation targets ``raw_reference`` (the reference before its
    columns were normalized, default ``reference``), so a rotated copy of
    the raw reference lands exactly on ``reference``. Rotation and rescaling
    then alternate until the rotation step is the identity, which makes
    re-aligning the output a no-op. Returns ``(aligned, T, T_inv,
    zero_cols)`` with ``aligned = F @ T``.
    """
    d = F.shape[1]
    target = reference if raw_reference is None else raw_reference
    T = np.eye(d)
    T_inv = np.eye(d)
    A = F
    zero_cols = np.array([], dtype=int)
    for _ in range(max_iter):
        R = procrustes_rotation(A, target)
        target = reference
        norms, zero_cols = _unit_columns(A @ R)
        if np.max(np.abs(R - np.eye(d))) < tol and np.max(np.abs(norms - 1.0)) < tol:
            # already a fixed point: leave it bit-for-bit unchanged
            break
        A = (A @ R) / norms
        T = (T @ R) / norms
        T_inv = (norms[:, None] * R.T) @ T_inv
    else:
        logger.info("alignment stopped at max_iter=%d", max_iter)
    return A, T, T_inv, zero_cols


def align_chain(chain: ChainOutput, max_iter=5000) -> AlignedSamples:
    """Align every retained sample to the last one.

    The reference is the final sample with unit-norm columns; the first
    rotation of every sample targets the final sample as drawn. U and V are
    aligned independently and each ``B_k`` receives the inverse transforms,
    so ``U* B_k* V*^T`` equals ``U B_k V^T`` sample by sample.
    """
    S = chain.n_samples
    if S < 1:
        raise ValueError("chain has no retained samples")
    ref = S - 1
    ref_U = chain.U[ref] / _unit_columns(chain.U[ref])[0]
    ref_V = chain.V[ref] / _unit_columns(chain.V[ref])[0]
    U, V, B = np.empty_like(chain.U), np.empty_like(chain.V), np.empty_like(chain.B)
    T_U = np.empty((S,) + (chain.U.shape[2],) * 2)
    T_V = np.empty((S,) + (chain.V.shape[2],) * 2)
    zero = []
    for s in range(S):
        U[s], T_U[s], _, zu = align_factor(chain.U[s], ref_U, chain.U[ref], max_iter)
        V[s], T_V[s], _, zv = align_factor(chain.V[s], ref_V, chain.V[ref], max_iter)
        # the accumulated inverse loses accuracy when T is ill conditioned; solving
        # U* X = U directly keeps U* X B (V* Y)^T on top of U B V^T
        iu = np.linalg.lstsq(U[s], chain.U[s], rcond=None)[0]
        iv = np.linalg.lstsq(V[s], chain.V[s], rcond=None)[0]
        B[s] = iu @ chain.B[s] @ iv.T
        zero += [(s, "U", int(c)) for c in zu] + [(s, "V", int(c)) for c in zv]
    if zero:
        logger.warning("%d zero-norm factor columns left unscaled", len(zero))
    return AlignedSamples(
        U=U, V=V, B=B, mu=chain.mu.copy(), tau2=chain.tau2.copy(), reference=ref,
        T_U=T_U, T_V=T_V, zero_columns=zero, row_keys=list(chain.row_keys),
        col_keys=list(chain.col_keys), modalities=list(chain.modalities),
    )


def posterior_point_estimates(aligned: AlignedSamples) -> PointEstimates:
    """Entrywise posterior means of the aligned samples."""
    return PointEstimates(
        U=aligned.U.mean(axis=0), V=aligned.V.mean(axis=0), B=aligned.B.mean(axis=0),
        mu=aligned.mu.mean(axis=0), tau2=aligned.tau2.mean(axis=0),
        row_keys=aligned.row_keys, col_keys=aligned.col_keys, modalities=aligned.modalities,
    )


def as_chain(aligned: AlignedSamples, likelihoods=()) -> ChainOutput:
    """View aligned samples as a ChainOutput, e.g. to align them again."""
    return ChainOutput(aligned.U, aligned.V, aligned.B, aligned.mu, aligned.tau2,
                       aligned.row_keys, aligned.col_keys, aligned.modalities, likelihoods)
