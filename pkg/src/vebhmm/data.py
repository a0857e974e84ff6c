"""Value types for observation ensembles, hyperparameters and posteriors.

States are indexed ``0..K-1``. Consensus state ``k`` is whatever row ``k``
of the hyperparameters describes; there is no other label.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np

from .errors import DomainError
from .special import digamma

__all__ = [
    "MIN_TRACE_LENGTH",
    "Trace",
    "Ensemble",
    "Hyperparameters",
    "TracePosterior",
    "GroundTruth",
    "EnsembleMoments",
    "validate",
]

MIN_TRACE_LENGTH = 2


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _fields_equal(a, b, names):
    return all(np.array_equal(getattr(a, n), getattr(b, n)) for n in names)


@dataclass(frozen=True)
class Trace:
    """A single scalar time series."""

    id: str
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "x", _frozen(self.x).reshape(-1))

    def __len__(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class Ensemble:
    traces: tuple

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(self.traces))

    @classmethod
    def from_arrays(cls, arrays: Sequence, ids: Sequence[str] | None = None) -> "Ensemble":
        if ids is None:
            ids = [str(i) for i in range(len(arrays))]
        return cls(tuple(Trace(i, x) for i, x in zip(ids, arrays)))

    def __len__(self):
        return len(self.traces)

    def __iter__(self) -> Iterator[Trace]:
        return iter(self.traces)

    def __getitem__(self, i):
        return self.traces[i]

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(t) for t in self.traces], dtype=int)

    def pooled(self) -> np.ndarray:
        return np.concatenate([t.x for t in self.traces]) if self.traces else np.empty(0)

    def subset(self, indices) -> "Ensemble":
        return Ensemble(tuple(self.traces[i] for i in indices))


def validate(ensemble: Ensemble) -> list[dict]:
    """List every violated Trace/Ensemble invariant.

    Returns an empty list for a well-formed ensemble; otherwise one
    ``{"trace": id, "reason": ...}`` entry per violation (``trace`` is
    ``None`` for ensemble-level problems).
    """
    out = []
    if len(ensemble) < 1:
        out.append({"trace": None, "reason": "ensemble is empty"})
    seen = set()
    for tr in ensemble:
        if tr.id in seen:
            out.append({"trace": tr.id, "reason": "duplicate trace id"})
        seen.add(tr.id)
        if len(tr) < MIN_TRACE_LENGTH:
            out.append({"trace": tr.id, "reason": "length below minimum"})
        if not np.all(np.isfinite(tr.x)):
            out.append({"trace": tr.id, "reason": "non-finite value"})
    return out


@dataclass(frozen=True)
class Hyperparameters:
    """Per-consensus-state Normal-Gamma and Dirichlet hyperparameters.

    Attributes
    ----------
    m, beta, a, b : ndarray, shape (K,)
        Normal-Gamma prior: ``mu ~ Normal(m, beta * lambda)``,
        ``lambda ~ Gamma(a, rate=b)``.
    alpha : ndarray, shape (K, K)
        Dirichlet parameters of the transition matrix rows.
    rho : ndarray, shape (K,)
        Dirichlet parameters of the initial state distribution.
    """

    m: np.ndarray
    beta: np.ndarray
    a: np.ndarray
    b: np.ndarray
    alpha: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _frozen(getattr(self, f.name)))
        K = self.m.shape[0]
        for name in ("beta", "a", "b", "rho"):
            if getattr(self, name).shape != (K,):
                raise DomainError(f"{name} must have shape ({K},)")
        if self.alpha.shape != (K, K):
            raise DomainError(f"alpha must have shape ({K}, {K})")
        for name in ("beta", "a", "b", "alpha", "rho"):
            if not np.all(getattr(self, name) > 0):
                raise DomainError(f"{name} must be strictly positive")
        if not np.all(np.isfinite(self.m)):
            raise DomainError("m must be finite")

    def __eq__(self, other):
        if not isinstance(other, Hyperparameters):
            return NotImplemented
        return _fields_equal(self, other, [f.name for f in fields(self)])

    __hash__ = None

    @property
    def K(self) -> int:
        return self.m.shape[0]

    @property
    def n_free(self) -> int:
        return sum(getattr(self, f.name).size for f in fields(self))

    def replace(self, **changes) -> "Hyperparameters":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return Hyperparameters(**kw)

    def permute(self, perm) -> "Hyperparameters":
        """Relabel states so that new state ``i`` is old state ``perm[i]``."""
        p = np.asarray(perm)
        return Hyperparameters(self.m[p], self.beta[p], self.a[p], self.b[p],
                               self.alpha[np.ix_(p, p)], self.rho[p])

    def expected_log_A(self) -> np.ndarray:
        return digamma(self.alpha) - digamma(self.alpha.sum(axis=1))[:, None]

    def expected_log_pi(self) -> np.ndarray:
        return digamma(self.rho) - digamma(self.rho.sum())

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "Hyperparameters":
        return cls(**{f.name: d[f.name] for f in fields(cls)})


@dataclass(frozen=True)
class TracePosterior:
    """Variational posterior of one trace.

    ``q(theta)`` has the same Normal-Gamma/Dirichlet form as the prior with
    the hatted parameters; ``gamma[t, k] = q(z_t = k)`` and
    ``xi_pair[t, i, j] = q(z_t = i, z_{t+1} = j)``.
    """

    hat_m: np.ndarray
    hat_beta: np.ndarray
    hat_a: np.ndarray
    hat_b: np.ndarray
    hat_alpha: np.ndarray
    hat_rho: np.ndarray
    gamma: np.ndarray
    xi_pair: np.ndarray
    elbo: float = float("nan")
    breakdown: dict = field(default_factory=dict, compare=False)
    elbo_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        for name in ("hat_m", "hat_beta", "hat_a", "hat_b", "hat_alpha", "hat_rho",
                     "gamma", "xi_pair"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "elbo", float(self.elbo))
        object.__setattr__(self, "elbo_history", tuple(self.elbo_history))

    def __eq__(self, other):
        # exact, bitwise comparison of all arrays and the ELBO
        if not isinstance(other, TracePosterior):
            return NotImplemented
        return _fields_equal(self, other, ("hat_m", "hat_beta", "hat_a", "hat_b", "hat_alpha",
                                           "hat_rho", "gamma", "xi_pair", "elbo"))

    __hash__ = None

    @property
    def K(self) -> int:
        return self.hat_m.shape[0]

    @property
    def T(self) -> int:
        return self.gamma.shape[0]

    def as_hyperparameters(self) -> Hyperparameters:
        return Hyperparameters(self.hat_m, self.hat_beta, self.hat_a, self.hat_b,
                               self.hat_alpha, self.hat_rho)

    def occupancy(self) -> np.ndarray:
        return self.gamma.sum(axis=0)


@dataclass(frozen=True)
class GroundTruth:
    """Latent quantities drawn by the simulator.

    ``theta[n]`` is a dict with keys ``mu``, ``lam``, ``A``, ``pi``;
    ``xi0[n][i, j]`` counts true ``i -> j`` transitions in trace ``n``.
    """

    z: tuple
    theta: tuple
    xi0: tuple

    def __post_init__(self):
        object.__setattr__(self, "z", tuple(_frozen(z, int) for z in self.z))
        object.__setattr__(self, "xi0", tuple(_frozen(c) for c in self.xi0))
        object.__setattr__(self, "theta", tuple(
            {k: _frozen(v) for k, v in th.items()} for th in self.theta))


@dataclass(frozen=True)
class EnsembleMoments:
    """Ensemble averages of posterior expectations (one entry per state)."""

    E_lambda: np.ndarray
    E_log_lambda: np.ndarray
    E_mu_lambda: np.ndarray
    E_mu2_lambda: np.ndarray
    E_log_A: np.ndarray
    E_log_pi: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _frozen(getattr(self, f.name)))

    @property
    def K(self) -> int:
        return self.E_lambda.shape[0]
