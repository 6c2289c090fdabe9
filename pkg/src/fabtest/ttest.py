"""Student-t tail probabilities, classical and FAB p-values, BH adjustment.

Everything here is a pure, vectorized function of its inputs.
"""

import numpy as np
from scipy.special import betainc

__all__ = [
    "GUIDE_CLAMP",
    "P_FLOOR",
    "t_cdf",
    "classical_p",
    "fab_p",
    "bh_adjust",
    "discoveries_at",
]

GUIDE_CLAMP = 1e8
P_FLOOR = 1e-300


def _check_dof(dof):
    dof = np.asarray(dof, dtype=float)
    if np.any(~(dof > 0)):
        raise ValueError("degrees of freedom must be positive")
    return dof


def _lower_tail(x, dof):
    """F_nu(-|x|), computed without cancellation.

    Uses P(T < -|x|) = I_{nu/(nu+x^2)}(nu/2, 1/2) / 2, which keeps full
    relative precision far into the tail.
    """
    ax = np.abs(x)
    with np.errstate(over="ignore", invalid="ignore"):
        z = dof / (dof + ax * ax)
    z = np.where(np.isinf(ax), 0.0, z)
    return 0.5 * betainc(0.5 * dof, 0.5, z)


def t_cdf(x, dof):
    """Cumulative distribution function of the t-distribution.

    Parameters
    ----------
    x : array_like
        Evaluation points; ``+-inf`` allowed.
    dof : array_like
        Positive degrees of freedom, broadcast against ``x``.

    Returns
    -------
    ndarray or float
        ``F_nu(x)``. Exactly symmetric: ``t_cdf(-x) == 1 - t_cdf(x)`` up
        to the rounding of one subtraction.
    """
    dof = _check_dof(dof)
    x = np.asarray(x, dtype=float)
    if np.any(np.isnan(x)):
        raise ValueError("t_cdf argument is NaN")
    tail = _lower_tail(x, dof)
    out = np.where(x < 0, tail, 1.0 - tail)
    return out[()] if out.ndim == 0 else out


def classical_p(t, dof):
    """Two-sided p-value ``1 - |F(t) - F(-t)|`` evaluated as ``2 F(-|t|)``."""
    dof = _check_dof(dof)
    t = np.asarray(t, dtype=float)
    out = np.minimum(2.0 * _lower_tail(t, dof), 1.0)
    return out[()] if out.ndim == 0 else out


def fab_p(t, guide, dof):
    """FAB p-value ``1 - |F(t + b) - F(-t)|``.

    Null-uniform for any guide ``b`` chosen independently of ``t``. The two
    branches of the absolute value are evaluated as sums of lower tails so
    that tiny p-values do not cancel to zero::

        b >= -2t :  F(-t - b) + F(-t)
        b <  -2t :  F(t + b)  + F(t)

    Parameters
    ----------
    t : array_like
        Test statistics.
    guide : array_like
        Finite guide values; clamp to ``+-GUIDE_CLAMP`` beforehand.
    dof : array_like
        Degrees of freedom.
    """
    dof = _check_dof(dof)
    t = np.asarray(t, dtype=float)
    guide = np.asarray(guide, dtype=float)
    if not np.all(np.isfinite(guide)):
        raise ValueError("guide values must be finite; clamp before calling fab_p")
    shifted = t + guide
    upper_branch = guide >= -2.0 * t
    # F(-t) and F(-t-b) when upper_branch, else F(t) and F(t+b)
    first = np.where(upper_branch, -t, t)
    second = np.where(upper_branch, -shifted, shifted)
    f1 = np.where(first < 0, _lower_tail(first, dof), 1.0 - _lower_tail(first, dof))
    f2 = np.where(second < 0, _lower_tail(second, dof), 1.0 - _lower_tail(second, dof))
    out = np.minimum(f1 + f2, 1.0)
    return out[()] if out.ndim == 0 else out


def bh_adjust(p):
    """Benjamini-Hochberg step-up adjusted p-values (q-values).

    ``q_(i) = min_{k >= i} min(1, p_(k) M / k)`` over the ascending order,
    mapped back to input order. Ties are ordered by input index (stable
    sort) and p-values are floored at ``P_FLOOR`` first.
    """
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        p = p.ravel()
    if p.size == 0:
        return p.copy()
    if np.any(~((p >= 0) & (p <= 1))):
        raise ValueError("p-values must lie in [0, 1]")
    p = np.maximum(p, P_FLOOR)
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    stepped = np.minimum.accumulate(scaled[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(stepped, 1.0)
    return q


def discoveries_at(q, alpha):
    """Indices of hypotheses with ``q <= alpha``."""
    q = np.asarray(q, dtype=float).ravel()
    return np.flatnonzero(q <= alpha)
