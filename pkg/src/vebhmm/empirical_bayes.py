"""Hyperparameter estimation by generalized EM over an ensemble of traces.

Each outer iteration runs VB on every trace against a fixed prior, then
moves the prior to the point where its expected sufficient statistics
match the ensemble average of the posterior ones.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Ensemble, EnsembleMoments, Hyperparameters, TracePosterior
from .errors import DegenerateMomentError, DomainError
from .special import SolverConfig, digamma, match_dirichlet, solve_gamma_shape
from .vbhmm import FitConfig, fit_trace

__all__ = [
    "VebConfig",
    "VebResult",
    "BETA_FLOOR",
    "BETA_CAP",
    "OCCUPANCY_FREEZE_FRACTION",
    "ensemble_moments",
    "update_normal_gamma",
    "update_dirichlet_rows",
    "hyperparameter_mstep",
    "initial_hyperparameters",
    "veb_fit",
]

BETA_FLOOR = 1e-6
BETA_CAP = 1e9
OCCUPANCY_FREEZE_FRACTION = 1e-3


@dataclass(frozen=True)
class VebConfig:
    K: int
    outer_rel_tolerance: float = 1e-6
    max_outer_iterations: int = 100
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise DomainError("K must be at least 1")
        if not self.outer_rel_tolerance > 0:
            raise DomainError("outer_rel_tolerance must be positive")
        if self.max_outer_iterations < 1 or self.restarts < 1:
            raise DomainError("iteration and restart counts must be positive")


@dataclass
class VebResult:
    """Outcome of :func:`veb_fit` (best restart).

    Attributes
    ----------
    psi_star : Hyperparameters
    posteriors : list of TracePosterior
        Fitted under `psi_star`.
    elbo_history : ndarray
        Summed trace ELBO after each outer E-step.
    restart_elbos : list of float
        Final summed ELBO of every restart.
    mstep_info : list of dict
        Per M-step record of frozen and clipped states.
    """

    psi_star: Hyperparameters
    posteriors: list
    elbo_history: np.ndarray
    restart_elbos: list = field(default_factory=list)
    best_restart: int = 0
    mstep_info: list = field(default_factory=list)

    @property
    def elbo(self) -> float:
        return float(self.elbo_history[-1])


def ensemble_moments(posteriors: Sequence[TracePosterior]) -> EnsembleMoments:
    """Average the posterior expectations that enter the prior update."""
    if len(posteriors) == 0:
        raise DomainError("ensemble_moments needs at least one posterior")
    K = posteriors[0].K
    if any(p.K != K for p in posteriors):
        raise DomainError("posteriors disagree on K")
    a = np.stack([p.hat_a for p in posteriors])
    b = np.stack([p.hat_b for p in posteriors])
    m = np.stack([p.hat_m for p in posteriors])
    beta = np.stack([p.hat_beta for p in posteriors])
    alpha = np.stack([p.hat_alpha for p in posteriors])
    rho = np.stack([p.hat_rho for p in posteriors])
    w = a / b
    return EnsembleMoments(
        E_lambda=w.mean(axis=0),
        E_log_lambda=(digamma(a) - np.log(b)).mean(axis=0),
        E_mu_lambda=(m * w).mean(axis=0),
        E_mu2_lambda=(1.0 / beta + m * m * w).mean(axis=0),
        E_log_A=(digamma(alpha) - digamma(alpha.sum(axis=2))[:, :, None]).mean(axis=0),
        E_log_pi=(digamma(rho) - digamma(rho.sum(axis=1))[:, None]).mean(axis=0),
    )


def _normal_gamma_states(mom, cfg):
    K = mom.K
    m = np.full(K, np.nan)
    beta = np.full(K, np.nan)
    a = np.full(K, np.nan)
    b = np.full(K, np.nan)
    bad = []
    for k in range(K):
        El, Ell = mom.E_lambda[k], mom.E_log_lambda[k]
        Eml, Em2l = mom.E_mu_lambda[k], mom.E_mu2_lambda[k]
        inv_beta = Em2l - Eml * Eml / El
        gap = Ell - math.log(El)
        if not (El > 0 and inv_beta > 64 * np.finfo(float).eps * abs(Em2l) and gap < 0):
            bad.append(k)
            continue
        m[k] = Eml / El
        beta[k] = 1.0 / inv_beta
        a[k] = solve_gamma_shape(gap, cfg)
        b[k] = a[k] / El
    return m, beta, a, b, bad


def update_normal_gamma(mom: EnsembleMoments, cfg: SolverConfig = SolverConfig()):
    """Normal-Gamma hyperparameters matching the ensemble moments.

    Returns
    -------
    m, beta, a, b : ndarray, shape (K,)

    Raises
    ------
    DegenerateMomentError
        If a state has no spread of means across the ensemble
        (``1/beta <= 0``) or no Jensen gap in its precision.
    """
    m, beta, a, b, bad = _normal_gamma_states(mom, cfg)
    if bad:
        raise DegenerateMomentError(f"degenerate moments for states {bad}", bad)
    return m, beta, a, b


def update_dirichlet_rows(mom: EnsembleMoments, alpha_init, rho_init=None,
                          cfg: SolverConfig = SolverConfig(), rows=None):
    """Dirichlet parameters whose expected logs equal the ensemble averages.

    Each transition row and the initial-state vector are solved
    independently with :func:`match_dirichlet`, warm-started from the
    previous values. With ``K == 1`` there is nothing to match and the
    inputs are returned unchanged.

    Parameters
    ----------
    mom : EnsembleMoments
    alpha_init : ndarray, shape (K, K)
    rho_init : ndarray, shape (K,), optional
    cfg : SolverConfig
    rows : iterable of int, optional
        Rows to update; the rest are copied from `alpha_init`.

    Returns
    -------
    alpha : ndarray, shape (K, K)
    rho : ndarray, shape (K,)
    """
    alpha = np.array(alpha_init, dtype=float)
    rho = np.ones(mom.K) if rho_init is None else np.array(rho_init, dtype=float)
    if mom.K == 1:
        return alpha, rho
    for k in (range(mom.K) if rows is None else rows):
        alpha[k] = match_dirichlet(-mom.E_log_A[k], cfg, alpha_init=alpha[k])
    rho = match_dirichlet(-mom.E_log_pi, cfg, alpha_init=rho)
    return alpha, rho


def hyperparameter_mstep(posteriors, psi: Hyperparameters, cfg: SolverConfig = SolverConfig()):
    """One prior update, leaving collapsed or unpopulated states untouched.

    A state is frozen when its total ensemble occupancy falls below
    ``OCCUPANCY_FREEZE_FRACTION`` of all time points or when its moments
    are degenerate. ``beta`` is clipped to ``[BETA_FLOOR, BETA_CAP]``.

    Returns
    -------
    psi_new : Hyperparameters
    info : dict
        ``frozen`` and ``clipped`` state lists and the moments used.
    """
    mom = ensemble_moments(posteriors)
    occupancy = np.sum([p.occupancy() for p in posteriors], axis=0)
    total = sum(p.T for p in posteriors)
    frozen = set(np.flatnonzero(occupancy < OCCUPANCY_FREEZE_FRACTION * total).tolist())

    m, beta, a, b, bad = _normal_gamma_states(mom, cfg)
    frozen |= set(bad)
    if len(frozen) == psi.K:
        raise DegenerateMomentError("all states collapsed", sorted(frozen))
    keep = np.array([k in frozen for k in range(psi.K)])
    m = np.where(keep, psi.m, m)
    a = np.where(keep, psi.a, a)
    b = np.where(keep, psi.b, b)
    beta = np.where(keep, psi.beta, beta)
    clipped = [k for k in range(psi.K) if not keep[k]
               and not BETA_FLOOR <= beta[k] <= BETA_CAP]
    beta = np.clip(beta, BETA_FLOOR, BETA_CAP)

    rows = [k for k in range(psi.K) if not keep[k]]
    alpha, rho = update_dirichlet_rows(mom, psi.alpha, psi.rho, cfg, rows=rows)
    psi_new = Hyperparameters(m, beta, a, b, alpha, rho)
    return psi_new, {"frozen": sorted(frozen), "clipped": clipped, "moments": mom}


def initial_hyperparameters(ensemble: Ensemble, K: int, n_tail: int = 0) -> Hyperparameters:
    """Data-driven starting prior.

    ``K - n_tail`` means sit at the ``(k + 1/2)/(K - n_tail)`` quantiles of
    the pooled observations; the other `n_tail` means are placed
    alternately at the pooled minimum and maximum (moving one standard
    deviation further out each time). The prior noise level is half the
    pooled standard deviation and the transition prior favours
    self-transitions.
    """
    if not 0 <= n_tail < K:
        raise DomainError("n_tail must lie in [0, K)")
    x = ensemble.pooled()
    var = float(np.var(x))
    if not var > 0:
        var = 1.0
    k_in = K - n_tail
    sd = math.sqrt(var)
    tails = [x.min() - (j // 2) * sd if j % 2 == 0 else x.max() + (j // 2) * sd
             for j in range(n_tail)]
    m = np.sort(np.r_[np.quantile(x, (np.arange(k_in) + 0.5) / k_in), tails])
    a = np.full(K, 2.5)
    return Hyperparameters(
        m=m,
        beta=np.ones(K),
        a=a,
        b=a * var * 0.25,
        alpha=1.0 + 5.0 * np.eye(K),
        rho=np.ones(K),
    )


def _estep(ensemble, psi, fit_cfg, previous, threads):
    def one(n):
        return fit_trace(ensemble[n], psi, fit_cfg, init=previous[n])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, range(len(ensemble))))
    return [one(n) for n in range(len(ensemble))]


def _run(ensemble, psi, cfg, fit_cfg, solver_cfg, threads, update, callback):
    posts = [None] * len(ensemble)
    history = []
    info_log = []
    for it in range(cfg.max_outer_iterations):
        posts = _estep(ensemble, psi, fit_cfg, posts, threads)
        history.append(math.fsum(p.elbo for p in posts))
        if not update:
            break
        if it > 0 and abs(history[-1] - history[-2]) <= cfg.outer_rel_tolerance * abs(history[-1]):
            break
        if it == cfg.max_outer_iterations - 1:
            break
        psi, info = hyperparameter_mstep(posts, psi, solver_cfg)
        info_log.append({"iteration": it, "frozen": info["frozen"], "clipped": info["clipped"]})
        if callback is not None:
            callback(it, posts, psi, info)
    return psi, posts, np.array(history), info_log


def veb_fit(ensemble: Ensemble, cfg: VebConfig, fit_cfg: FitConfig = FitConfig(),
            psi_init: Hyperparameters | None = None, threads: int = 1,
            update_hyperparameters: bool = True,
            solver_cfg: SolverConfig = SolverConfig(),
            callback: Callable | None = None) -> VebResult:
    """Variational empirical Bayes over an ensemble.

    Parameters
    ----------
    ensemble : Ensemble
    cfg : VebConfig
    fit_cfg : FitConfig
        Per-trace VB stopping rule.
    psi_init : Hyperparameters, optional
        Starting prior for the first restart. Later restarts jitter its
        means. By default restart ``r`` starts from
        ``initial_hyperparameters(ensemble, K, n_tail=r % K)``, jittered for
        ``r > 0``, so that some starts begin with states parked in the
        tails of the data and can stay unpopulated.
    threads : int
        Worker threads for the per-trace E-step. Results do not depend on it.
    update_hyperparameters : bool
        If False a single E-step is run under `psi_init` (no M-step).
    callback : callable, optional
        ``callback(iteration, posteriors, psi_new, info)`` after each M-step.

    Returns
    -------
    VebResult
        The restart with the highest final summed ELBO (earliest on ties).
    """
    if len(ensemble) < 1:
        raise DomainError("empty ensemble")
    if psi_init is not None and psi_init.K != cfg.K:
        raise DomainError("psi_init.K does not match cfg.K")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
    sd = float(np.std(ensemble.pooled())) or 1.0
    best = None
    restart_elbos = []
    for r in range(cfg.restarts if update_hyperparameters else 1):
        if psi_init is not None:
            base = psi_init
        else:
            base = initial_hyperparameters(ensemble, cfg.K, n_tail=r % cfg.K)
        psi0 = base
        if r > 0:
            rng = np.random.default_rng(seeds[r])
            psi0 = base.replace(m=base.m + 0.1 * sd * rng.standard_normal(cfg.K))
        psi, posts, hist, info = _run(ensemble, psi0, cfg, fit_cfg, solver_cfg, threads,
                                      update_hyperparameters, callback)
        restart_elbos.append(float(hist[-1]))
        if best is None or hist[-1] > best.elbo_history[-1]:
            best = VebResult(psi, posts, hist, best_restart=r, mstep_info=info)
    best.restart_elbos = restart_elbos
    return best
