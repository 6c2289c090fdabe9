"""Simulation studies: null calibration and power interpolation."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .linking import EffectSummaries, FeatureSource, run_fab_analysis
from .ttest import bh_adjust, classical_p, t_cdf

PIPELINES = ("classical", "fab", "oracle")
FDR_GRID = np.round(np.arange(1, 26) * 0.01, 2)
HIST_BINS = 20


@dataclass(frozen=True)
class SimDesign:
    L: int = 10
    G: int = 25
    d: int = 5
    n_reps: int = 5
    n_datasets: int = 2000
    tau2_grid: tuple = (1.0, 0.8, 0.6, 0.4, 0.2, 0.0)
    seed: int = 0
    target_fdr: float = 0.1

    def __post_init__(self):
        if min(self.L, self.G, self.d, self.n_datasets) < 1 or self.n_reps < 2:
            raise ValueError("design counts must be positive and n_reps >= 2")
        if any(not 0.0 <= t <= 1.0 for t in self.tau2_grid):
            raise ValueError("tau2 grid values must lie in [0, 1]")
        if not 0.0 < self.target_fdr < 1.0:
            raise ValueError("target FDR must lie in (0, 1)")

    @property
    def M(self) -> int:
        return self.L * self.G

    @classmethod
    def null_default(cls, paper_scale=False, **kw):
        kw.setdefault("n_datasets", 10_000 if paper_scale else 2000)
        return cls(L=10, G=25, d=5, n_reps=5, **kw)

    @classmethod
    def power_default(cls, paper_scale=False, **kw):
        kw.setdefault("n_datasets", 200 if paper_scale else 50)
        return cls(L=5, G=100, d=10, n_reps=5, **kw)


@dataclass(frozen=True)
class NonnullStructure:
    U: np.ndarray
    V: np.ndarray
    signal: np.ndarray  # X beta, unit empirical variance
    noise: np.ndarray  # epsilon, unit variance, empirically uncorrelated with signal


@dataclass
class SimReport:
    kind: str
    n_datasets: int
    target_fdr: float
    # null experiment
    fdr: dict = field(default_factory=dict)  # pipeline -> (estimate, standard error)
    hist_edges: np.ndarray | None = None
    hist_counts: dict = field(default_factory=dict)  # pipeline -> counts
    ks: dict = field(default_factory=dict)  # pipeline -> (statistic, p-value)
    # power experiment
    thresholds: np.ndarray | None = None
    tau2_grid: tuple = ()
    curves: np.ndarray | None = None  # (tau2, threshold, pipeline) cumulative discoveries
    counts: np.ndarray | None = None  # (tau2, dataset, pipeline) discoveries at target_fdr


def _keys(design):
    rows = [f"L{l}" for l in range(design.L)]
    cols = [f"G{g}" for g in range(design.G)]
    # hypothesis j = l + L g, matching the column-stacked order of V kron U
    row_of = np.tile(rows, design.G)
    col_of = np.repeat(cols, design.L)
    ids = np.char.add(np.char.add(row_of, ":"), col_of)
    return ids, row_of, col_of, rows, cols


def _summaries(design, theta, rng):
    reps = theta[:, None] + rng.standard_normal((theta.size, design.n_reps))
    ids, row_of, col_of, _, _ = _keys(design)
    return EffectSummaries(
        ids, row_of, col_of, reps.mean(axis=1), reps.std(axis=1, ddof=1),
        np.full(theta.size, design.n_reps),
    )


def simulate_null_study(design: SimDesign, seed=None):
    """One null dataset: all effects zero, unit sampling variance, random U, V."""
    rng = np.random.default_rng(design.seed if seed is None else seed)
    summaries = _summaries(design, np.zeros(design.M), rng)
    _, _, _, rows, cols = _keys(design)
    U = rng.standard_normal((design.L, design.d))
    V = rng.standard_normal((design.G, design.d))
    return summaries, FeatureSource.kronecker(U, V, rows, cols)


def draw_nonnull_structure(design: SimDesign, seed=None) -> NonnullStructure:
    """Feature matrices, normalized signal ``X beta`` and normalized noise."""
    rng = np.random.default_rng(design.seed if seed is None else seed)
    U = rng.standard_normal((design.L, design.d))
    V = rng.standard_normal((design.G, design.d))
    beta = rng.standard_normal(design.d * design.d)
    eps = rng.standard_normal(design.M)
    signal = np.kron(V, U) @ beta
    signal = signal / signal.std()
    centered = signal - signal.mean()
    eps = eps - eps.mean()
    eps = eps - (eps @ centered) / (centered @ centered) * centered
    return NonnullStructure(U, V, signal, eps / eps.std())


def simulate_nonnull_study(design: SimDesign, tau2: float, seed=None, structure=None):
    """One dataset with ``theta = sqrt(1 - tau2) X beta + sqrt(tau2) eps``.

    Returns ``(summaries, features, theta)``. Pass a fixed ``structure`` to
    reuse the same features and effects across replicate datasets.
    """
    if not 0.0 <= tau2 <= 1.0:
        raise ValueError("tau2 must lie in [0, 1]")
    rng = np.random.default_rng(design.seed if seed is None else seed)
    if structure is None:
        structure = draw_nonnull_structure(design, rng)
    theta = np.sqrt(1.0 - tau2) * structure.signal + np.sqrt(tau2) * structure.noise
    summaries = _summaries(design, theta, rng)
    _, _, _, rows, cols = _keys(design)
    return summaries, FeatureSource.kronecker(structure.U, structure.V, rows, cols), theta


def oracle_one_sided_p(t, dof, true_theta_sign):
    """One-sided p-value in the direction of the true effect sign."""
    t = np.asarray(t, dtype=float)
    sign = np.asarray(true_theta_sign)
    out = np.where(sign > 0, t_cdf(-t, dof),
                   np.where(sign < 0, t_cdf(t, dof), classical_p(t, dof)))
    return out[()] if out.ndim == 0 else out


def _dataset_seed(master, *index):
    return np.random.SeedSequence([master, *index])


def _null_one(args):
    design, i = args
    ss = _dataset_seed(design.seed, i)
    data_seed, fold_seed = ss.generate_state(2)
    summaries, features = simulate_null_study(design, seed=int(data_seed))
    fit = run_fab_analysis(summaries, features, seed=int(fold_seed))
    return fit.p_classical, fit.p_fab, fit.q_classical, fit.q_fab


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=16))


def run_null_experiment(design: SimDesign, workers: int = 1) -> SimReport:
    """Monte Carlo FDR and pooled p-value distributions under the global null.

    All effects are null, so the FDR of a dataset is the indicator of any BH
    discovery at ``design.target_fdr``.
    """
    results = _map(_null_one, [(design, i) for i in range(design.n_datasets)], workers)
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    report = SimReport("null", design.n_datasets, design.target_fdr, hist_edges=edges)
    for name, p_pos, q_pos in (("classical", 0, 2), ("fab", 1, 3)):
        any_disc = np.array([np.any(r[q_pos] <= design.target_fdr) for r in results], dtype=float)
        est = float(any_disc.mean())
        report.fdr[name] = (est, float(np.sqrt(est * (1.0 - est) / design.n_datasets)))
        pooled = np.concatenate([r[p_pos] for r in results])
        report.hist_counts[name] = np.histogram(pooled, bins=edges)[0]
        ks = stats.kstest(pooled, "uniform")
        report.ks[name] = (float(ks.statistic), float(ks.pvalue))
    return report


def _discovery_counts(q, thresholds):
    q = np.sort(q)
    return np.searchsorted(q, thresholds, side="right")


def _power_one(args):
    design, structure, ti, tau2, i = args
    ss = _dataset_seed(design.seed, ti, i)
    data_seed, fold_seed = ss.generate_state(2)
    summaries, features, theta = simulate_nonnull_study(
        design, tau2, seed=int(data_seed), structure=structure)
    fit = run_fab_analysis(summaries, features, seed=int(fold_seed))
    p_oracle = oracle_one_sided_p(fit.t, fit.dof, np.sign(theta))
    q_oracle = bh_adjust(p_oracle)
    thresholds = np.append(FDR_GRID, design.target_fdr)
    return np.stack([
        _discovery_counts(fit.q_classical, thresholds),
        _discovery_counts(fit.q_fab, thresholds),
        _discovery_counts(q_oracle, thresholds),
    ], axis=-1)


def run_power_experiment(design: SimDesign, workers: int = 1) -> SimReport:
    """Cumulative discoveries of classical, FAB and one-sided oracle tests.

    One feature structure is drawn for the whole experiment; for each tau2
    the effect vector is fixed and ``design.n_datasets`` replicate datasets
    are analysed.
    """
    structure = draw_nonnull_structure(design, seed=_dataset_seed(design.seed))
    jobs = [(design, structure, ti, float(tau2), i)
            for ti, tau2 in enumerate(design.tau2_grid) for i in range(design.n_datasets)]
    per = np.array(_map(_power_one, jobs, workers)).reshape(
        len(design.tau2_grid), design.n_datasets, FDR_GRID.size + 1, len(PIPELINES))
    return SimReport(
        "power", design.n_datasets, design.target_fdr,
        thresholds=FDR_GRID.copy(), tau2_grid=tuple(design.tau2_grid),
        curves=per[:, :, :-1, :].sum(axis=1), counts=per[:, :, -1, :],
    )


def with_seed(design: SimDesign, seed: int) -> SimDesign:
    return replace(design, seed=seed)
