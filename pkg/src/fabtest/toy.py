"""Small synthetic problems drawn from the tensor and linking models.

Used for the end-to-end smoke run and for trying the command line tools.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .linking import EffectSummaries
from .tensor import TensorDataset


def synthetic_tensor(L=30, G=40, likelihoods=("normal", "probit", "tobit"), d=3,
                     missing=0.2, noise=0.5, seed=0):
    """Draw a tensor from the low-rank model.

    Returns ``(data, truth)`` where ``truth`` holds ``U, V, B, mu, eta``
    (the noise-free linear predictor) and ``theta``.
    """
    rng = np.random.default_rng(seed)
    K = len(likelihoods)
    U = rng.standard_normal((L, d))
    V = rng.standard_normal((G, d))
    B = rng.standard_normal((K, d, d)) / np.sqrt(d)
    mu = rng.normal(0.0, 0.5, K)
    eta = np.einsum("li,kij,gj->lgk", U, B, V) + mu
    tau = np.array([1.0 if lik == "probit" else noise for lik in likelihoods])
    theta = eta + tau * rng.standard_normal(eta.shape)
    values = theta.copy()
    for k, lik in enumerate(likelihoods):
        if lik == "probit":
            values[:, :, k] = theta[:, :, k] > 0
        elif lik == "tobit":
            values[:, :, k] = np.maximum(theta[:, :, k], 0.0)
    observed = rng.random(values.shape) >= missing
    data = TensorDataset(
        values, observed, likelihoods,
        row_keys=[f"line{l}" for l in range(L)], col_keys=[f"gene{g}" for g in range(G)],
        modalities=[f"{lik}{k}" for k, lik in enumerate(likelihoods)],
    )
    return data, dict(U=U, V=V, B=B, mu=mu, eta=eta, theta=theta)


def synthetic_summaries(truth, row_keys, col_keys, n=4, relevance=0.7, seed=0):
    """Effect summaries for every (row, col) pair, linked to the tensor factors.

    True effects mix a bilinear function of the generating factors with
    independent noise; ``relevance`` is the share of variance explained.
    """
    rng = np.random.default_rng(seed)
    U, V = truth["U"], truth["V"]
    W = rng.standard_normal((U.shape[1], V.shape[1]))
    signal = (U @ W @ V.T).T.ravel()  # hypothesis j = l + L g
    signal = signal / signal.std()
    eff = np.sqrt(relevance) * signal + np.sqrt(1 - relevance) * rng.standard_normal(signal.size)
    reps = eff[:, None] + rng.standard_normal((eff.size, n))
    L, G = U.shape[0], V.shape[0]
    rows = np.tile(np.asarray(row_keys, dtype=str), G)
    cols = np.repeat(np.asarray(col_keys, dtype=str), L)
    ids = np.char.add(np.char.add(rows, ":"), cols)
    return EffectSummaries(ids, rows, cols, reps.mean(axis=1), reps.std(axis=1, ddof=1),
                           np.full(eff.size, n)), eff


def probit_auc(score, label):
    """Area under the ROC curve via the rank-sum identity (ties count half)."""
    score = np.asarray(score, dtype=float)
    label = np.asarray(label, dtype=bool)
    n1, n0 = label.sum(), (~label).sum()
    ranks = rankdata(score)
    return float((ranks[label].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def write_toy_problem(directory, seed=0, L=12, G=15):
    """Write ``tensor.csv``, ``tensor.cfg`` and ``summaries.csv`` into ``directory``."""
    from .io import save_summaries, save_tensor, write_likelihood_config

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    data, truth = synthetic_tensor(L=L, G=G, seed=seed)
    summaries, _ = synthetic_summaries(truth, data.row_keys, data.col_keys, seed=seed + 1)
    save_tensor(data, d / "tensor.csv")
    write_likelihood_config(data, d / "tensor.cfg")
    save_summaries(summaries, d / "summaries.csv")
    return d


if __name__ == "__main__":
    write_toy_problem(sys.argv[1] if len(sys.argv) > 1 else "toy")
