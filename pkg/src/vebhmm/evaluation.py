"""Accuracy metrics, model-order heuristics, free-energy posteriors and
cross-validation.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import Ensemble, Hyperparameters, TracePosterior
from .empirical_bayes import VebConfig, veb_fit
from .errors import DomainError
from .vbhmm import FitConfig, fit_trace

__all__ = [
    "EXHAUSTIVE_ALIGNMENT_MAX_K",
    "ErrorReport",
    "DeltaGPosterior",
    "pseudocounts",
    "count_errors",
    "effective_states",
    "true_effective_states",
    "ensemble_bic",
    "delta_g",
    "delta_g_posterior",
    "delta_g_ensemble",
    "histogram",
    "crossval_heldout",
]

EXHAUSTIVE_ALIGNMENT_MAX_K = 6


def pseudocounts(post: TracePosterior, psi: Hyperparameters) -> np.ndarray:
    """Expected transition counts ``hat_alpha - alpha``."""
    return np.asarray(post.hat_alpha) - np.asarray(psi.alpha)


@dataclass
class ErrorReport:
    """Normalised L1 transition-count errors after label alignment.

    ``label_alignment[k]`` is the inferred label matched to true state k.
    Raw absolute deviations and totals are kept so other normalisations
    can be recomputed. ``per_trace_*`` hold the same ratios per trace
    (``nan`` where a trace has no mass in the relevant entries).
    """

    occupancy_error: float
    transition_error: float
    label_alignment: list
    alignment_method: str
    diag_abs: float
    diag_total: float
    offdiag_abs: float
    offdiag_total: float
    per_trace_occupancy_error: list = field(default_factory=list)
    per_trace_transition_error: list = field(default_factory=list)

    def to_dict(self):
        return {
            "occupancy_error": self.occupancy_error,
            "transition_error": self.transition_error,
            "label_alignment": list(self.label_alignment),
            "alignment_method": self.alignment_method,
            "raw": {"diag_abs": self.diag_abs, "diag_total": self.diag_total,
                    "offdiag_abs": self.offdiag_abs, "offdiag_total": self.offdiag_total},
            # undefined per-trace ratios become null
            "per_trace_occupancy_error": [None if math.isnan(v) else v
                                          for v in self.per_trace_occupancy_error],
            "per_trace_transition_error": [None if math.isnan(v) else v
                                           for v in self.per_trace_transition_error],
        }


def _ratio(num, den):
    return float(num / den) if den > 0 else 0.0


def count_errors(xi, xi0, means=None, true_means=None) -> ErrorReport:
    """Occupancy (diagonal) and transition (off-diagonal) count errors.

    Parameters
    ----------
    xi, xi0 : sequence of ndarray, shape (K, K)
        Inferred and true transition counts per trace.
    means, true_means : ndarray, shape (K,), optional
        Consensus state means; only used by the greedy fallback for
        ``K > 6``. Without them the fallback matches total occupancies.

    Notes
    -----
    For ``K <= 6`` the alignment minimises ``sum_n |xi_n[p, p] - xi0_n|``
    over all permutations ``p``; ties keep the lexicographically first.
    """
    X = np.asarray(xi, dtype=float)
    X0 = np.asarray(xi0, dtype=float)
    if X.ndim == 2:
        X, X0 = X[None], X0[None]
    if X.shape != X0.shape or X.shape[1] != X.shape[2]:
        raise DomainError("count_errors: xi and xi0 must be matching stacks of K x K matrices")
    K = X.shape[1]
    if K <= EXHAUSTIVE_ALIGNMENT_MAX_K:
        method = "exhaustive"
        best, perm = np.inf, None
        for p in itertools.permutations(range(K)):
            ip = np.array(p)
            cost = np.abs(X[:, ip[:, None], ip[None, :]] - X0).sum()
            if cost < best:
                best, perm = cost, ip
    else:
        method = "greedy"
        if means is not None and true_means is not None:
            cost = np.abs(np.asarray(true_means, float)[:, None] - np.asarray(means, float)[None, :])
        else:
            occ = np.einsum("nkk->k", X)
            occ0 = np.einsum("nkk->k", X0)
            cost = np.abs(occ0[:, None] - occ[None, :])
        _, perm = linear_sum_assignment(cost)
    Y = X[:, perm[:, None], perm[None, :]]
    diag = np.eye(K, dtype=bool)
    D = np.abs(Y - X0)
    S = Y + X0
    per_occ = [_ratio(D[n][diag].sum(), S[n][diag].sum()) if S[n][diag].sum() > 0 else float("nan")
               for n in range(X.shape[0])]
    per_tr = [_ratio(D[n][~diag].sum(), S[n][~diag].sum()) if S[n][~diag].sum() > 0 else float("nan")
              for n in range(X.shape[0])]
    da, dt = float(D[:, diag].sum()), float(S[:, diag].sum())
    oa, ot = float(D[:, ~diag].sum()), float(S[:, ~diag].sum())
    return ErrorReport(_ratio(da, dt), _ratio(oa, ot), [int(k) for k in perm], method,
                       da, dt, oa, ot, per_occ, per_tr)


def effective_states(gamma) -> float:
    """``exp`` of the entropy of the time-averaged state marginal."""
    q = np.asarray(gamma, dtype=float).mean(axis=0)
    q = q[q > 0]
    q = q / q.sum()
    k = float(np.exp(-(q * np.log(q)).sum()))
    return min(max(k, 1.0), float(np.asarray(gamma).shape[1]))


def true_effective_states(z, K) -> float:
    """K_eff of a known state path."""
    return effective_states(np.eye(K)[np.asarray(z, dtype=int)])


def ensemble_bic(L_veb, K, N) -> float:
    """``-2 L + K (K + 5) log N``."""
    if N < 1:
        raise DomainError("ensemble_bic needs N >= 1")
    return -2.0 * float(L_veb) + K * (K + 5) * math.log(N)


def delta_g(A) -> np.ndarray:
    """Free energy ``log(outflow / inflow)`` per state, in units of kT.

    Computed as a difference of logs, so for ``K = 2`` the two entries are
    exact negatives.
    """
    A = np.asarray(A, dtype=float)
    off = A * (1.0 - np.eye(A.shape[0]))
    out = off.sum(axis=1)
    inflow = off.sum(axis=0)
    if np.any(out <= 0):
        raise DomainError(f"delta_g: absorbing state(s) {np.flatnonzero(out <= 0).tolist()}")
    if np.any(inflow <= 0):
        raise DomainError(f"delta_g: unreachable state(s) {np.flatnonzero(inflow <= 0).tolist()}")
    return np.log(out) - np.log(inflow)


def _delta_g_rows(A):
    # vectorised delta_g over a stack (S, K, K); rows with zero flow give +-inf
    K = A.shape[-1]
    off = A * (1.0 - np.eye(K))
    with np.errstate(divide="ignore"):
        return np.log(off.sum(axis=-1)) - np.log(off.sum(axis=-2))


def histogram(samples, edges):
    """Density histogram on fixed edges; samples outside are clipped in."""
    s = np.clip(np.asarray(samples, dtype=float), edges[0], edges[-1])
    counts, _ = np.histogram(s, bins=edges)
    return counts / (counts.sum() * np.diff(edges))


@dataclass
class DeltaGPosterior:
    """Monte Carlo samples of the free-energy posterior.

    ``samples[:, k]`` are draws of ``delta_g(A)_k``; ``density[k]`` is a
    histogram on ``edges`` integrating to one.
    """

    samples: np.ndarray
    edges: np.ndarray
    density: np.ndarray

    def mean(self):
        return self.samples.mean(axis=0)

    def stderr(self):
        return self.samples.std(axis=0, ddof=1) / math.sqrt(self.samples.shape[0])

    def to_dict(self):
        return {"edges": self.edges.tolist(), "density": self.density.tolist(),
                "mean": self.mean().tolist(), "n_samples": int(self.samples.shape[0])}


def _default_edges(samples, bins):
    lo, hi = float(np.min(samples)), float(np.max(samples))
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def delta_g_posterior(hat_alpha, n_samples=10_000, seed=0, bins=50, edges=None) -> DeltaGPosterior:
    """Push Dirichlet row posteriors through :func:`delta_g`.

    Each draw samples every row ``A_k ~ Dirichlet(hat_alpha_k)``. Draws
    whose ΔG is not finite (a row with all its mass on the diagonal in
    floating point) are redrawn.
    """
    if n_samples < 1:
        raise DomainError("n_samples must be at least 1")
    alpha = np.asarray(hat_alpha, dtype=float)
    if alpha.ndim != 2 or alpha.shape[0] != alpha.shape[1] or np.any(alpha <= 0):
        raise DomainError("hat_alpha must be a square matrix of positive entries")
    K = alpha.shape[0]
    rng = np.random.default_rng(seed)
    out = np.empty((0, K))
    while out.shape[0] < n_samples:
        A = np.stack([rng.dirichlet(alpha[k], size=n_samples) for k in range(K)], axis=1)
        g = _delta_g_rows(A)
        out = np.concatenate([out, g[np.all(np.isfinite(g), axis=1)]])
    out = out[:n_samples]
    e = np.asarray(edges, dtype=float) if edges is not None else _default_edges(out, bins)
    dens = np.stack([histogram(out[:, k], e) for k in range(K)])
    return DeltaGPosterior(out, e, dens)


def delta_g_ensemble(hat_alphas, n_samples=10_000, seed=0, bins=50, edges=None):
    """Average of per-trace ΔG posterior histograms on common edges.

    Returns
    -------
    edges : ndarray
    density : ndarray, shape (K, bins)
    per_trace : list of DeltaGPosterior
    """
    seeds = np.random.SeedSequence(seed).spawn(len(hat_alphas))
    post = [delta_g_posterior(a, n_samples, s, bins) for a, s in zip(hat_alphas, seeds)]
    if edges is None:
        lo = min(float(p.samples.min()) for p in post)
        hi = max(float(p.samples.max()) for p in post)
        edges = _default_edges(np.array([lo, hi]), bins)
    edges = np.asarray(edges, dtype=float)
    K = post[0].samples.shape[1]
    dens = np.mean([[histogram(p.samples[:, k], edges) for k in range(K)] for p in post], axis=0)
    return edges, dens, post


def crossval_heldout(ensemble: Ensemble, K, folds=10, cfg: VebConfig | None = None,
                     fit_cfg: FitConfig = FitConfig(), threads=1, seed=None):
    """Held-out ELBO per fold with hyperparameters frozen after training.

    Traces are shuffled with `seed` (default ``cfg.seed``) and split into
    `folds` near-equal groups. For each fold, VEB runs on the remaining
    traces and every held-out trace is fitted by VB under the resulting
    hyperparameters.

    Returns
    -------
    list of float
        Summed held-out ELBO, one entry per fold.
    """
    N = len(ensemble)
    if folds < 2 or N < folds:
        raise DomainError("crossval needs 2 <= folds <= number of traces")
    cfg = cfg if cfg is not None else VebConfig(K=K)
    if cfg.K != K:
        raise DomainError("cfg.K disagrees with K")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    parts = np.array_split(rng.permutation(N), folds)

    def one(test):
        test_set = set(test.tolist())
        train = ensemble.subset([i for i in range(N) if i not in test_set])
        res = veb_fit(train, cfg, fit_cfg)
        return float(sum(fit_trace(ensemble[i], res.psi_star, fit_cfg).elbo for i in sorted(test)))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, parts))
    return [one(p) for p in parts]
