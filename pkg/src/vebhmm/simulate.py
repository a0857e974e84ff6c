"""Sampling ensembles from the hierarchical HMM."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import gammaln

from .data import Ensemble, GroundTruth, Hyperparameters, Trace
from .empirical_bayes import BETA_CAP
from .errors import DomainError

__all__ = ["PRECISION_SHAPE", "SimScenario", "SimOutput", "scenario_to_psi", "sample_ensemble",
           "transition_counts"]

# Gamma shape of the per-trace precision; CV of lambda is 1/sqrt(10)
PRECISION_SHAPE = 10.0


@dataclass(frozen=True)
class SimScenario:
    """Parameters of a simulated experiment.

    ``sigma_rel`` is the typical noise level ``lambda^-1/2`` in units of the
    state spacing ``delta_mu``; ``mu_var_ratio`` is the spread of state
    means across traces relative to the within-state noise variance.
    """

    K: int
    N: int
    mean_length: float
    delta_mu: float = 0.2
    sigma_rel: float = 0.5
    mu_var_ratio: float = 0.4
    alpha_self: float = 20.0
    seed: int = 0
    fixed_length: bool = False

    def __post_init__(self):
        if self.K < 1 or self.N < 1 or not self.mean_length >= 1:
            raise DomainError("K, N and mean_length must be at least 1")
        if not self.sigma_rel > 0:
            raise DomainError("sigma_rel must be positive")
        if not self.mu_var_ratio >= 0 or not self.alpha_self >= 0:
            raise DomainError("mu_var_ratio and alpha_self must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SimOutput:
    ensemble: Ensemble
    truth: GroundTruth
    psi_true: Hyperparameters


def scenario_to_psi(s: SimScenario) -> Hyperparameters:
    """Hyperparameters realising a scenario.

    With ``lambda ~ Gamma(a, rate=b)``:

    * ``E[lambda^-1/2] = sqrt(b) Gamma(a - 1/2) / Gamma(a)`` is set to
      ``sigma_rel * delta_mu``, which fixes ``b`` for ``a = PRECISION_SHAPE``;
    * ``Var[mu] = E[1/(beta lambda)] = E[1/lambda] / beta`` while the
      within-state variance is ``E[1/lambda]``, so ``beta = 1/mu_var_ratio``
      (capped when the ratio is zero).
    """
    K = s.K
    a = PRECISION_SHAPE
    sigma = s.sigma_rel * s.delta_mu
    b = (sigma * math.exp(gammaln(a) - gammaln(a - 0.5))) ** 2
    beta = BETA_CAP if s.mu_var_ratio == 0 else min(1.0 / s.mu_var_ratio, BETA_CAP)
    return Hyperparameters(
        m=s.delta_mu * np.arange(K),
        beta=np.full(K, beta),
        a=np.full(K, a),
        b=np.full(K, b),
        alpha=1.0 + s.alpha_self * np.eye(K),
        rho=np.ones(K),
    )


def transition_counts(z, K):
    """``K x K`` matrix of ``i -> j`` transition counts along a path."""
    z = np.asarray(z)
    c = np.zeros((K, K))
    np.add.at(c, (z[:-1], z[1:]), 1.0)
    return c


def _length(rng, s):
    if s.fixed_length:
        return int(round(s.mean_length))
    p = 1.0 / s.mean_length
    upper = 10 * s.mean_length
    while True:
        T = int(rng.geometric(p))
        if 2 <= T <= upper:
            return T


def _sample_trace(rng, psi, s):
    K = psi.K
    lam = rng.gamma(psi.a, 1.0 / psi.b)
    mu = rng.normal(psi.m, 1.0 / np.sqrt(psi.beta * lam))
    A = np.vstack([rng.dirichlet(row) for row in psi.alpha])
    pi = rng.dirichlet(psi.rho)
    T = _length(rng, s)
    u = rng.random(T)
    z = np.empty(T, dtype=int)
    cum_pi = np.cumsum(pi)
    cum_A = np.cumsum(A, axis=1)
    z[0] = min(np.searchsorted(cum_pi, u[0], side="right"), K - 1)
    for t in range(1, T):
        z[t] = min(np.searchsorted(cum_A[z[t - 1]], u[t], side="right"), K - 1)
    x = mu[z] + rng.standard_normal(T) / np.sqrt(lam[z])
    return x, z, {"mu": mu, "lam": lam, "A": A, "pi": pi}


def sample_ensemble(s: SimScenario) -> SimOutput:
    """Draw ``N`` traces: parameters from the prior, then a path, then data.

    Every trace has its own generator spawned from ``s.seed``, so output
    is reproducible bit for bit and independent of evaluation order.
    """
    psi = scenario_to_psi(s)
    traces, zs, thetas, counts = [], [], [], []
    for n, seq in enumerate(np.random.SeedSequence(s.seed).spawn(s.N)):
        x, z, theta = _sample_trace(np.random.default_rng(seq), psi, s)
        traces.append(Trace(str(n), x))
        zs.append(z)
        thetas.append(theta)
        counts.append(transition_counts(z, s.K))
    return SimOutput(Ensemble(tuple(traces)), GroundTruth(tuple(zs), tuple(thetas), tuple(counts)),
                     psi)
