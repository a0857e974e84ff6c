"""Variational Bayes for a single HMM trace with Normal emissions.

``q(z) q(theta)`` is fitted by coordinate ascent. The E-step runs
forward-backward under the expected log parameters of ``q(theta)``; the
M-step is the conjugate Normal-Gamma / Dirichlet update from expected
sufficient statistics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln, xlogy

from ._kernels import scaled_forward_backward, vb_trace, viterbi
from .data import Hyperparameters, Trace, TracePosterior
from .errors import DomainError, NumericError
from .special import digamma

__all__ = [
    "FitConfig",
    "SufficientStats",
    "expected_log_emission",
    "forward_backward",
    "collect_stats",
    "vb_mstep",
    "elbo",
    "fit_trace",
    "viterbi_path",
    "kl_normal_gamma",
    "kl_dirichlet",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FitConfig:
    elbo_rel_tolerance: float = 1e-8
    max_vb_iterations: int = 100

    def __post_init__(self):
        if not (self.elbo_rel_tolerance > 0 and self.max_vb_iterations > 0):
            raise DomainError("FitConfig fields must be positive")


class SufficientStats(NamedTuple):
    """Expected sufficient statistics of one trace.

    Nk : state occupancies; xbar, S : weighted mean and weighted sum of
    squared deviations per state (0 for empty states); C : expected
    transition counts; g0 : initial state marginal.
    """

    Nk: np.ndarray
    xbar: np.ndarray
    S: np.ndarray
    C: np.ndarray
    g0: np.ndarray


def _log_emission(m, beta, a, b, x):
    w = a / b
    d = x[:, None] - m[None, :]
    return 0.5 * (digamma(a) - np.log(b) - LOG_2PI - 1.0 / beta - w * d * d)


def expected_log_emission(post, x):
    """``E_q[log Normal(x_t | mu_k, lambda_k)]`` as a ``(T, K)`` matrix.

    `post` may be a TracePosterior or a Hyperparameters instance (the
    latter is read as the parameters of ``q(theta)``).
    """
    p = post.as_hyperparameters() if isinstance(post, TracePosterior) else post
    return _log_emission(p.m, p.beta, p.a, p.b, np.asarray(x, dtype=float))


def forward_backward(log_em, log_A_star, log_pi_star):
    """Marginals of the chain ``p(z) ∝ pi*(z_0) prod A*(z_t, z_t+1) prod e(t, z_t)``.

    Parameters
    ----------
    log_em : ndarray, shape (T, K)
    log_A_star : ndarray, shape (K, K)
    log_pi_star : ndarray, shape (K,)
        Log weights; they need not be normalised.

    Returns
    -------
    gamma : ndarray, shape (T, K)
    xi_pair : ndarray, shape (T-1, K, K)
    log_Z : float
        Log of the sum over all paths of the unnormalised weights.
    """
    log_em = np.ascontiguousarray(log_em, dtype=float)
    log_A_star = np.ascontiguousarray(log_A_star, dtype=float)
    log_pi_star = np.ascontiguousarray(log_pi_star, dtype=float)
    if not (np.all(np.isfinite(log_em)) and np.all(np.isfinite(log_A_star))
            and np.all(np.isfinite(log_pi_star))):
        raise NumericError("forward_backward: non-finite input")
    gamma, xi, log_z, ok = scaled_forward_backward(log_em, log_A_star, log_pi_star)
    if not ok:
        raise NumericError("forward_backward: scale factor underflowed to zero")
    return gamma, xi, log_z


def viterbi_path(log_em, log_A_star, log_pi_star):
    """Most probable path; ties go to the lower state index."""
    return viterbi(np.ascontiguousarray(log_em, dtype=float),
                   np.ascontiguousarray(log_A_star, dtype=float),
                   np.ascontiguousarray(log_pi_star, dtype=float))


def collect_stats(gamma, xi_pair, x) -> SufficientStats:
    gamma = np.asarray(gamma, dtype=float)
    x = np.asarray(x, dtype=float)
    Nk = gamma.sum(axis=0)
    occupied = Nk > 0
    safe = np.where(occupied, Nk, 1.0)
    xbar = np.where(occupied, (gamma * x[:, None]).sum(axis=0) / safe, 0.0)
    d = x[:, None] - xbar[None, :]
    S = np.where(occupied, (gamma * d * d).sum(axis=0), 0.0)
    C = np.asarray(xi_pair, dtype=float).sum(axis=0)
    return SufficientStats(Nk, xbar, S, C, gamma[0].copy())


def vb_mstep(stats: SufficientStats, psi: Hyperparameters) -> Hyperparameters:
    """Conjugate update of ``q(theta)``; returned in Hyperparameters form."""
    N = stats.Nk
    beta = psi.beta + N
    m = (psi.beta * psi.m + N * stats.xbar) / beta
    a = psi.a + 0.5 * N
    dm = stats.xbar - psi.m
    b = psi.b + 0.5 * (stats.S + psi.beta * N * dm * dm / beta)
    return Hyperparameters(m, beta, a, b, psi.alpha + stats.C, psi.rho + stats.g0)


def kl_normal_gamma(q: Hyperparameters, p: Hyperparameters) -> np.ndarray:
    """Per-state ``KL(NG(q) || NG(p))``."""
    kl_gamma = ((q.a - p.a) * digamma(q.a) - gammaln(q.a) + gammaln(p.a)
                + p.a * (np.log(q.b) - np.log(p.b)) + q.a * (p.b - q.b) / q.b)
    r = p.beta / q.beta
    dm = q.m - p.m
    kl_mu = 0.5 * (r - 1.0 - np.log(r) + p.beta * (q.a / q.b) * dm * dm)
    return kl_gamma + kl_mu


def kl_dirichlet(q_alpha, p_alpha) -> np.ndarray:
    """``KL(Dir(q) || Dir(p))`` along the last axis."""
    q_alpha = np.asarray(q_alpha, dtype=float)
    p_alpha = np.asarray(p_alpha, dtype=float)
    q0 = q_alpha.sum(axis=-1)
    e_log = digamma(q_alpha) - np.expand_dims(digamma(q0), -1)
    return (gammaln(q0) - gammaln(q_alpha).sum(axis=-1) - gammaln(p_alpha.sum(axis=-1))
            + gammaln(p_alpha).sum(axis=-1) + ((q_alpha - p_alpha) * e_log).sum(axis=-1))


def _kl_terms(q, psi):
    return {
        "neg_kl_normal_gamma": -float(kl_normal_gamma(q, psi).sum()),
        "neg_kl_transitions": -float(kl_dirichlet(q.alpha, psi.alpha).sum()),
        "neg_kl_initial": -float(kl_dirichlet(q.rho, psi.rho)),
    }


def _expected_complete(log_em, log_A, log_pi, gamma, C):
    return float((gamma * log_em).sum() + (C * log_A).sum() + gamma[0] @ log_pi)


def _chain_entropy(gamma, xi_pair):
    T = gamma.shape[0]
    h = -xlogy(xi_pair, xi_pair).sum()
    if T > 2:
        h += xlogy(gamma[1:T - 1], gamma[1:T - 1]).sum()
    return float(h)


def elbo(trace, post: TracePosterior, psi: Hyperparameters):
    """Evidence lower bound of a trace at ``q(z) q(theta)``.

    Evaluated directly from the marginals (chain entropy plus expected
    complete-data log likelihood) and the closed-form KL divergences.

    Returns
    -------
    value : float
    breakdown : dict
        ``trajectory`` (expected log likelihood plus entropy of ``q(z)``),
        ``neg_kl_normal_gamma``, ``neg_kl_transitions``, ``neg_kl_initial``.
    """
    x = trace.x if isinstance(trace, Trace) else np.asarray(trace, dtype=float)
    q = post.as_hyperparameters()
    log_em = expected_log_emission(q, x)
    C = post.xi_pair.sum(axis=0)
    traj = (_expected_complete(log_em, q.expected_log_A(), q.expected_log_pi(), post.gamma, C)
            + _chain_entropy(post.gamma, post.xi_pair))
    br = {"trajectory": traj, **_kl_terms(q, psi)}
    return float(sum(br.values())), br


def _initial_marginals(x, psi):
    # responsibilities under the prior-mean emission parameters
    lam = psi.a / psi.b
    d = x[:, None] - psi.m[None, :]
    logr = 0.5 * np.log(lam) - 0.5 * lam * d * d
    logr -= logr.max(axis=1, keepdims=True)
    g = np.exp(logr)
    g /= g.sum(axis=1, keepdims=True)
    xi = g[:-1, :, None] * g[1:, None, :]
    return g, xi


def fit_trace(trace, psi: Hyperparameters, cfg: FitConfig = FitConfig(), init=None) -> TracePosterior:
    """Coordinate-ascent VB for one trace under a fixed prior.

    Parameters
    ----------
    trace : Trace or array_like
    psi : Hyperparameters
        Prior; read only.
    cfg : FitConfig
    init : TracePosterior, ndarray or tuple, optional
        Starting marginals. A TracePosterior (warm start) or a
        ``(gamma, xi_pair)`` pair or a bare ``gamma`` matrix. Defaults to
        emission responsibilities under the prior means.

    Returns
    -------
    TracePosterior
        Hatted parameters come from the M-step on the final marginals, so
        ``hat_alpha - psi.alpha`` equals the summed ``xi_pair`` exactly.
    """
    x = trace.x if isinstance(trace, Trace) else np.asarray(trace, dtype=float)
    if x.shape[0] < 2:
        raise DomainError("fit_trace needs at least two observations")
    if init is None:
        gamma, xi = _initial_marginals(x, psi)
    elif isinstance(init, TracePosterior):
        gamma, xi = init.gamma, init.xi_pair
    elif isinstance(init, tuple):
        gamma, xi = init
    else:
        gamma = np.asarray(init, dtype=float)
        xi = gamma[:-1, :, None] * gamma[1:, None, :]

    m, beta, a, b, alpha, rho, gamma, xi, value, parts, history, ok = vb_trace(
        np.ascontiguousarray(x, dtype=float), psi.m, psi.beta, psi.a, psi.b, psi.alpha, psi.rho,
        np.ascontiguousarray(gamma, dtype=float), np.ascontiguousarray(xi, dtype=float),
        float(cfg.elbo_rel_tolerance), int(cfg.max_vb_iterations))
    if not ok:
        raise NumericError("forward_backward: scale factor underflowed to zero")
    br = dict(zip(("trajectory", "neg_kl_normal_gamma", "neg_kl_transitions", "neg_kl_initial"),
                  parts))
    return TracePosterior(m, beta, a, b, alpha, rho, gamma, xi,
                          elbo=value, breakdown=br, elbo_history=history)
