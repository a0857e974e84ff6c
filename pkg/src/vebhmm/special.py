"""Digamma/trigamma and the root solvers used by the hyperparameter updates.

The polygamma functions are evaluated by shifting the argument up to ``x >= 6``
with the recurrence relations and then summing the asymptotic series. Shift
terms are accumulated from the largest argument down so that
``psi(x) == psi(x + 1) - 1/x`` holds to a single rounding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import gammaln

from .errors import ConvergenceError, DomainError

__all__ = [
    "SolverConfig",
    "digamma",
    "trigamma",
    "digamma_minus_log",
    "inverse_digamma",
    "solve_gamma_shape",
    "match_dirichlet",
]

_SHIFT = 6.0


@dataclass(frozen=True)
class SolverConfig:
    """Stopping rules for the Newton solvers."""

    abs_tolerance: float = 1e-10
    max_iterations: int = 200

    def __post_init__(self):
        if not self.abs_tolerance > 0:
            raise DomainError("abs_tolerance must be positive")
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be at least 1")


@numba.njit(cache=True)
def _digamma_series_minus_log(z):
    # psi(z) - log(z) for z >= 6
    r = 1.0 / (z * z)
    s = r * (1.0 / 12 - r * (1.0 / 120 - r * (1.0 / 252 - r * (1.0 / 240 - r * (
        1.0 / 132 - r * (691.0 / 32760 - r * (1.0 / 12 - r * 3617.0 / 8160)))))))
    return -0.5 / z - s


@numba.njit(cache=True)
def _trigamma_series_minus_inv(z):
    # psi'(z) - 1/z for z >= 6
    r = 1.0 / (z * z)
    s = r * (1.0 / 6 - r * (1.0 / 30 - r * (1.0 / 42 - r * (1.0 / 30 - r * (
        5.0 / 66 - r * (691.0 / 2730 - r * (7.0 / 6 - r * 3617.0 / 510)))))))
    return 0.5 * r + s / z


@numba.njit(cache=True)
def _nshift(x):
    n = 0
    z = x
    while z < _SHIFT:
        z = z + 1.0
        n += 1
    return n, z


@numba.njit(cache=True)
def _shift_point(x, i):
    # i-th point of the chain x, fl(x+1), fl(fl(x+1)+1), ...
    z = x
    for _ in range(i):
        z = z + 1.0
    return z


@numba.njit(cache=True)
def _digamma_scalar(x):
    n, z = _nshift(x)
    out = math.log(z) + _digamma_series_minus_log(z)
    for i in range(n - 1, -1, -1):
        out -= 1.0 / _shift_point(x, i)
    return out


@numba.njit(cache=True)
def _trigamma_scalar(x):
    n, z = _nshift(x)
    out = 1.0 / z + _trigamma_series_minus_inv(z)
    for i in range(n - 1, -1, -1):
        w = _shift_point(x, i)
        out += 1.0 / (w * w)
    return out


@numba.njit(cache=True)
def _digamma_minus_log_scalar(x):
    if x >= _SHIFT:
        return _digamma_series_minus_log(x)
    return _digamma_scalar(x) - math.log(x)


@numba.njit(cache=True)
def _trigamma_minus_inv_scalar(x):
    if x >= _SHIFT:
        return _trigamma_series_minus_inv(x)
    return _trigamma_scalar(x) - 1.0 / x


_digamma_ufunc = numba.vectorize(["float64(float64)"], cache=True)(_digamma_scalar)
_trigamma_ufunc = numba.vectorize(["float64(float64)"], cache=True)(_trigamma_scalar)
_digamma_minus_log_ufunc = numba.vectorize(["float64(float64)"], cache=True)(
    _digamma_minus_log_scalar)
_trigamma_minus_inv_ufunc = numba.vectorize(["float64(float64)"], cache=True)(
    _trigamma_minus_inv_scalar)


def _positive(x, name):
    arr = np.asarray(x, dtype=float)
    if not np.all(arr > 0):
        raise DomainError(f"{name} requires x > 0")
    return arr


def _out(arr, value):
    return float(value) if arr.ndim == 0 else value


def digamma(x):
    """Logarithmic derivative of the gamma function.

    Parameters
    ----------
    x : float or array_like
        Strictly positive argument(s).

    Returns
    -------
    float or ndarray
        ``psi(x)``, with the same shape as `x`.
    """
    arr = _positive(x, "digamma")
    return _out(arr, _digamma_ufunc(arr))


def trigamma(x):
    """First derivative of :func:`digamma`."""
    arr = _positive(x, "trigamma")
    return _out(arr, _trigamma_ufunc(arr))


def digamma_minus_log(x):
    """``psi(x) - log(x)`` without cancellation for large `x`."""
    arr = _positive(x, "digamma_minus_log")
    return _out(arr, _digamma_minus_log_ufunc(arr))


def _trigamma_minus_inv(x):
    arr = np.asarray(x, dtype=float)
    return _out(arr, _trigamma_minus_inv_ufunc(arr))


def inverse_digamma(y, iterations=6):
    """Solve ``psi(x) = y`` for ``x > 0`` (elementwise Newton)."""
    y = np.asarray(y, dtype=float)
    x = np.where(y >= -2.22, np.exp(y) + 0.5, -1.0 / (y - _digamma_ufunc(1.0)))
    for _ in range(iterations):
        x = x - (_digamma_ufunc(x) - y) / _trigamma_ufunc(x)
        x = np.maximum(x, 1e-300)
    return _out(y, x)


def solve_gamma_shape(c, cfg=SolverConfig()):
    """Find the Gamma shape ``a`` with ``psi(a) - log(a) = c``.

    The left-hand side increases monotonically from -inf to 0, so a root
    exists for every ``c < 0``. Newton steps are kept inside a shrinking
    bracket and replaced by bisection whenever they leave it.

    Parameters
    ----------
    c : float
        Target value; must be negative.
    cfg : SolverConfig

    Returns
    -------
    float
    """
    c = float(c)
    if not c < 0:
        raise DomainError(f"solve_gamma_shape requires c < 0, got {c!r}")
    s = -c
    a = (3.0 - s + math.sqrt((s - 3.0) ** 2 + 24.0 * s)) / (12.0 * s)
    lo, hi = 0.0, math.inf
    polished = False
    for _ in range(cfg.max_iterations):
        r = _digamma_minus_log_scalar(a) - c
        if r < 0:
            lo = a
        elif r > 0:
            hi = a
        else:
            return a
        converged = abs(r) < cfg.abs_tolerance
        if converged and polished:
            return a
        step = r / _trigamma_minus_inv_scalar(a)
        nxt = a - step
        if not lo < nxt < hi:
            nxt = math.sqrt(lo * hi) if (lo > 0 and math.isfinite(hi)) else (
                2.0 * a if r < 0 else 0.5 * a)
        if converged:
            # one extra Newton step to reach the floating point limit
            if abs(_digamma_minus_log_scalar(nxt) - c) <= abs(r):
                a = nxt
            return a
        if nxt == a:
            polished = True
        a = nxt
    r = _digamma_minus_log_scalar(a) - c
    if abs(r) < cfg.abs_tolerance:
        return a
    raise ConvergenceError(f"solve_gamma_shape: residual {r:.3e} after {cfg.max_iterations} iterations")


def _dirichlet_objective(alpha, mean_log):
    return gammaln(alpha.sum()) - gammaln(alpha).sum() + alpha @ mean_log


def match_dirichlet(targets, cfg=SolverConfig(), alpha_init=None):
    """Find Dirichlet parameters from expected log-probability gaps.

    Solves ``psi(sum(alpha)) - psi(alpha[l]) = targets[l]`` for all ``l``.
    The system is the stationarity condition of a strictly concave
    function, so Newton steps (Hessian is diagonal plus rank one) with
    step halving converge from any positive starting point.

    Parameters
    ----------
    targets : array_like, shape (K,)
        Positive gaps, i.e. ``-E[log p_l]`` under the sought Dirichlet.
    cfg : SolverConfig
    alpha_init : array_like, optional
        Warm start. Defaults to a large-concentration approximation.

    Returns
    -------
    ndarray, shape (K,)
    """
    t = np.asarray(targets, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise DomainError("match_dirichlet needs a vector of at least two targets")
    if not np.all(t > 0) or not np.all(np.isfinite(t)):
        raise DomainError("match_dirichlet requires every target > 0")
    mean_log = -t
    log_total = np.logaddexp.reduce(mean_log)
    if not log_total < 0:
        raise DomainError("targets are not attainable by any Dirichlet (sum exp(-t) >= 1)")

    if alpha_init is None:
        # concentration from the large-alpha expansion, then one fixed-point
        # pass psi(alpha_l) = psi(alpha_0) + E[log p_l] (no underflow for tiny alpha_l)
        total = (t.size - 1) / (-2.0 * log_total)
        alpha = inverse_digamma(_digamma_scalar(total) + mean_log)
    else:
        alpha = np.array(alpha_init, dtype=float)
        if alpha.shape != t.shape or not np.all(alpha > 0):
            raise DomainError("alpha_init must be positive with the same shape as targets")

    def gradient(al):
        return _digamma_ufunc(al.sum()) - _digamma_ufunc(al) + mean_log

    f = _dirichlet_objective(alpha, mean_log)
    g = gradient(alpha)
    polished = False
    for _ in range(cfg.max_iterations):
        err = np.max(np.abs(g))
        if err < cfg.abs_tolerance and polished:
            return alpha
        q = _trigamma_ufunc(alpha)
        z = _trigamma_scalar(alpha.sum())
        b = np.sum(g / q) / (np.sum(1.0 / q) - 1.0 / z)
        step = (g - b) / q
        lam = 1.0
        while True:
            cand = alpha + lam * step
            # at most three decades of shrinkage per step keeps iterates normal
            if np.all(cand > 1e-3 * alpha):
                f_cand = _dirichlet_objective(cand, mean_log)
                g_cand = gradient(cand)
                # objective differences vanish below rounding near the optimum,
                # so a shrinking gradient is also accepted
                if np.all(np.isfinite(g_cand)) and (f_cand >= f or np.max(np.abs(g_cand)) < err):
                    break
            lam *= 0.5
            if lam < 1e-30:
                cand, f_cand, g_cand = alpha, f, g
                break
        if err < cfg.abs_tolerance:
            # polishing step: keep it only if it does not hurt
            if np.max(np.abs(g_cand)) <= err:
                alpha = cand
            return alpha
        if np.array_equal(cand, alpha):
            polished = True
        alpha, f, g = cand, f_cand, g_cand
    if np.max(np.abs(g)) < cfg.abs_tolerance:
        return alpha
    raise ConvergenceError(
        f"match_dirichlet: residual {np.max(np.abs(g)):.3e} after {cfg.max_iterations} iterations")
