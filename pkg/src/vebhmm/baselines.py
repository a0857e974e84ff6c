"""Per-trace comparison estimators and consensus remapping.

Two independent-trace pipelines are provided: maximum likelihood
(Baum-Welch, model order by BIC) and VB under a fixed vague prior (model
order by ELBO). Their per-trace states are tied to consensus states by
clustering the fitted state means with a one-dimensional Gaussian mixture.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Ensemble, Hyperparameters, Trace
from .errors import DomainError
from .vbhmm import FitConfig, fit_trace, forward_backward

__all__ = [
    "VARIANCE_FLOOR",
    "CollapseWarning",
    "MLFit",
    "TraceSelection",
    "BaselineFit",
    "uninformative_prior",
    "ml_fit_trace",
    "hmm_log_likelihood",
    "ml_free_parameters",
    "select_model_per_trace",
    "gmm_fit",
    "gmm_remap",
    "remap_counts",
    "run_baseline",
]

VARIANCE_FLOOR = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


class CollapseWarning(RuntimeWarning):
    """A Baum-Welch state variance reached the floor."""


@dataclass
class MLFit:
    means: np.ndarray
    variances: np.ndarray
    A: np.ndarray
    pi: np.ndarray
    loglik: float
    gamma: np.ndarray
    counts: np.ndarray
    loglik_history: list = field(default_factory=list)
    collapsed: bool = False

    @property
    def K(self):
        return self.means.shape[0]


def _log_normal(x, means, variances):
    d = x[:, None] - means[None, :]
    return -0.5 * (LOG_2PI + np.log(variances)[None, :] + d * d / variances[None, :])


def hmm_log_likelihood(x, means, variances, A, pi):
    """Exact log-likelihood of a Gaussian HMM by scaled forward recursion."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        _, _, log_z = forward_backward(_log_normal(x, means, variances),
                                       np.log(np.maximum(A, 1e-300)), np.log(np.maximum(pi, 1e-300)))
    return log_z


def ml_free_parameters(K):
    """Initial (K-1) + transitions K(K-1) + emission mean and variance 2K."""
    return (K - 1) + K * (K - 1) + 2 * K


def _quantile_start(x, K):
    means = np.quantile(x, (np.arange(K) + 0.5) / K)
    var = max(float(np.var(x)), VARIANCE_FLOOR)
    variances = np.full(K, var / K ** 2 if K > 1 else var)
    return means, variances


def _responsibilities(x, means, variances):
    lr = _log_normal(x, means, variances)
    lr -= lr.max(axis=1, keepdims=True)
    g = np.exp(lr)
    return g / g.sum(axis=1, keepdims=True)


def ml_fit_trace(trace, K, max_iterations=500, rel_tolerance=1e-10, init=None) -> MLFit:
    """Baum-Welch maximum likelihood for a K-state Gaussian HMM.

    Parameters
    ----------
    trace : Trace or array_like
    K : int
    max_iterations : int
    rel_tolerance : float
        Stop when the log-likelihood gain falls below this fraction.
    init : tuple (means, variances), optional
        Defaults to trace quantiles with variance ``var(x)/K^2``.

    Returns
    -------
    MLFit
        ``loglik`` is the likelihood at the returned parameters.

    Warns
    -----
    CollapseWarning
        When a state variance hits ``VARIANCE_FLOOR``.
    """
    x = trace.x if isinstance(trace, Trace) else np.asarray(trace, dtype=float)
    T = x.shape[0]
    if T < 2:
        raise DomainError("ml_fit_trace needs T >= 2")
    if K == 1:
        mean = np.array([x.mean()])
        var = np.array([max(float(x.var()), VARIANCE_FLOOR)])
        A = np.ones((1, 1))
        pi = np.ones(1)
        ll = float(_log_normal(x, mean, var).sum())
        return MLFit(mean, var, A, pi, ll, np.ones((T, 1)), np.array([[T - 1.0]]), [ll],
                     collapsed=bool(var[0] <= VARIANCE_FLOOR))

    means, variances = init if init is not None else _quantile_start(x, K)
    means = np.array(means, dtype=float)
    variances = np.array(variances, dtype=float)
    A = np.full((K, K), 0.1 / (K - 1))
    np.fill_diagonal(A, 0.9)
    pi = np.full(K, 1.0 / K)
    history = []
    collapsed = False
    with np.errstate(divide="ignore"):
        for it in range(max_iterations + 1):
            gamma, xi, ll = forward_backward(_log_normal(x, means, variances),
                                             np.log(np.maximum(A, 1e-300)),
                                             np.log(np.maximum(pi, 1e-300)))
            history.append(ll)
            converged = len(history) > 1 and history[-1] - history[-2] <= rel_tolerance * abs(history[-1])
            if converged or it == max_iterations:
                break
            counts = xi.sum(axis=0)
            Nk = gamma.sum(axis=0)
            safe = np.maximum(Nk, 1e-300)
            means = np.where(Nk > 0, gamma.T @ x / safe, means)
            d = x[:, None] - means[None, :]
            variances = np.where(Nk > 0, (gamma * d * d).sum(axis=0) / safe, variances)
            if np.any(variances <= VARIANCE_FLOOR):
                collapsed = True
            variances = np.maximum(variances, VARIANCE_FLOOR)
            rows = counts.sum(axis=1, keepdims=True)
            A = np.where(rows > 0, counts / np.maximum(rows, 1e-300), A)
            pi = gamma[0]
    counts = xi.sum(axis=0)
    if collapsed:
        warnings.warn("Baum-Welch state collapsed onto the variance floor", CollapseWarning,
                      stacklevel=2)
    return MLFit(means, variances, A, pi, history[-1], gamma, counts, history, collapsed)


def uninformative_prior(K, center=0.0) -> Hyperparameters:
    """Vague prior used by the independent-trace VB baseline."""
    return Hyperparameters(
        m=np.full(K, float(center)),
        beta=np.full(K, 1e-2),
        a=np.full(K, 1e-2),
        b=np.full(K, 1e-2),
        alpha=np.ones((K, K)),
        rho=np.ones(K),
    )


@dataclass
class TraceSelection:
    """Model chosen for one trace by a baseline pipeline."""

    K: int
    score: float
    scores: dict
    means: np.ndarray
    precisions: np.ndarray
    A: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray


def select_model_per_trace(trace, K_max, method="ml_bic", center=None,
                           fit_cfg: FitConfig = FitConfig()) -> TraceSelection:
    """Fit ``K = 1..K_max`` and keep the best by BIC or ELBO.

    ``ml_bic`` minimises ``-2 loglik + p log T``; ``vb_elbo`` maximises
    the ELBO under :func:`uninformative_prior` centred on `center`
    (defaults to the trace mean). Ties keep the smaller K.
    """
    if K_max < 1:
        raise DomainError("K_max must be at least 1")
    x = trace.x if isinstance(trace, Trace) else np.asarray(trace, dtype=float)
    T = x.shape[0]
    best = None
    scores = {}
    for K in range(1, K_max + 1):
        if method == "ml_bic":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", CollapseWarning)
                fit = ml_fit_trace(x, K)
            score = -2.0 * fit.loglik + ml_free_parameters(K) * math.log(T)
            cand = TraceSelection(K, score, scores, fit.means, 1.0 / fit.variances, fit.A,
                                  fit.gamma, fit.counts)
            better = best is None or score < best.score
        elif method == "vb_elbo":
            psi = uninformative_prior(K, x.mean() if center is None else center)
            means, variances = _quantile_start(x, K)
            post = fit_trace(x, psi, fit_cfg, init=_responsibilities(x, means, variances))
            score = post.elbo
            A = post.hat_alpha / post.hat_alpha.sum(axis=1, keepdims=True)
            cand = TraceSelection(K, score, scores, post.hat_m, post.hat_a / post.hat_b, A,
                                  post.gamma, post.hat_alpha - psi.alpha)
            better = best is None or score > best.score
        else:
            raise DomainError(f"unknown selection method {method!r}")
        scores[K] = float(score)
        if better:
            best = cand
    return best


def _gmm_em(v, w, means, variances, weights, iterations=500, tol=1e-12):
    floor = 1e-12 * max(float(np.var(v)), 1e-300)
    ll_old = -np.inf
    for _ in range(iterations):
        lp = (np.log(weights)[None, :] - 0.5 * (LOG_2PI + np.log(variances))[None, :]
              - 0.5 * (v[:, None] - means[None, :]) ** 2 / variances[None, :])
        mx = lp.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(lp - mx).sum(axis=1))
        ll = float(w @ lse)
        r = np.exp(lp - lse[:, None]) * w[:, None]
        Nk = r.sum(axis=0)
        if np.any(Nk <= 0):
            break
        weights = Nk / Nk.sum()
        means = r.T @ v / Nk
        variances = np.maximum((r * (v[:, None] - means[None, :]) ** 2).sum(axis=0) / Nk, floor)
        if ll - ll_old <= tol * abs(ll):
            break
        ll_old = ll
    return means, variances, weights, ll


def _kmeanspp(v, w, K, rng):
    # weighted k-means++ seeding on the 1-D pool
    centers = [v[rng.choice(v.size, p=w / w.sum())]]
    for _ in range(1, K):
        d2 = np.min((v[:, None] - np.array(centers)[None, :]) ** 2, axis=1) * w
        if d2.sum() <= 0:
            centers.append(v[rng.integers(v.size)])
        else:
            centers.append(v[rng.choice(v.size, p=d2 / d2.sum())])
    return np.array(centers)


def gmm_fit(values, weights, K, seed=0, restarts=10):
    """Weighted 1-D Gaussian mixture by EM, best of `restarts`.

    The first start places the means at weighted quantiles; later starts
    use weighted k-means++ seeding. Components are returned sorted by mean.

    Returns
    -------
    means, variances, mix_weights : ndarray, shape (K,)
    """
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    rng = np.random.default_rng(seed)
    var0 = max(float(np.average((v - np.average(v, weights=w)) ** 2, weights=w)), 1e-12)
    best = None
    for r in range(restarts):
        if r == 0:
            order = np.argsort(v, kind="stable")
            cdf = np.cumsum(w[order]) - 0.5 * w[order]
            means = np.interp((np.arange(K) + 0.5) / K, cdf, v[order])
        else:
            means = _kmeanspp(v, w, K, rng)
        fit = _gmm_em(v, w, means.astype(float), np.full(K, var0 / K ** 2), np.full(K, 1.0 / K))
        if best is None or fit[3] > best[3]:
            best = fit
    means, variances, mix, _ = best
    order = np.argsort(means, kind="stable")
    return means[order], variances[order], mix[order]


def gmm_remap(per_trace_means, K, seed=0, restarts=10):
    """Assign every per-trace state to a consensus state.

    Parameters
    ----------
    per_trace_means : list of tuple
        ``(trace, state, mean, weight)`` with weight the state occupancy.
    K : int
        Number of consensus states.

    Returns
    -------
    dict
        ``(trace, state) -> k`` with consensus labels ordered by mean.
    """
    keys = [(t, s) for t, s, _, _ in per_trace_means]
    v = np.array([m for _, _, m, _ in per_trace_means], dtype=float)
    w = np.array([wt for _, _, _, wt in per_trace_means], dtype=float)
    if K == 1:
        return {key: 0 for key in keys}
    if np.unique(v).size < K:
        raise DomainError(f"gmm_remap: fewer than {K} distinct means in the pool")
    # states with no occupancy still need a label but must not drive the fit
    w_fit = np.where(w > 0, w, 0.0)
    if not w_fit.sum() > 0:
        w_fit = np.ones_like(w)
    w_fit = np.maximum(w_fit, 1e-12 * w_fit.max())
    means, variances, mix = gmm_fit(v, w_fit, K, seed=seed, restarts=restarts)
    lp = (np.log(mix)[None, :] - 0.5 * np.log(variances)[None, :]
          - 0.5 * (v[:, None] - means[None, :]) ** 2 / variances[None, :])
    labels = np.argmax(lp, axis=1)
    return {key: int(k) for key, k in zip(keys, labels)}


def remap_counts(counts, mapping, K, trace=None):
    """Fold a trace's native transition counts into consensus coordinates.

    ``counts`` is a ``K_n x K_n`` matrix; ``mapping`` maps native state
    ``i`` (or ``(trace, i)`` when `trace` is given) to a consensus state.
    """
    counts = np.asarray(counts, dtype=float)
    idx = np.array([mapping[i if trace is None else (trace, i)] for i in range(counts.shape[0])],
                   dtype=int)
    out = np.zeros((K, K))
    np.add.at(out, (idx[:, None], idx[None, :]), counts)
    return out


@dataclass
class BaselineFit:
    """Result of an independent-trace pipeline on an ensemble.

    ``xi`` holds the remapped ``K x K`` transition counts per trace and
    ``occupancy`` the time-averaged marginals of the selected per-trace
    models (native state order).
    """

    method: str
    selections: list
    mapping: dict
    xi: list

    @property
    def selected_K(self):
        return [s.K for s in self.selections]

    @property
    def occupancy(self):
        return [s.gamma.mean(axis=0) for s in self.selections]


def run_baseline(ensemble: Ensemble, K, method="ml_bic", seed=0, threads=1,
                 fit_cfg: FitConfig = FitConfig()) -> BaselineFit:
    """Select a model per trace (``K_max = K``), then remap to K consensus states."""
    center = float(np.mean(ensemble.pooled()))

    def one(tr):
        return select_model_per_trace(tr, K, method, center=center, fit_cfg=fit_cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            selections = list(ex.map(one, ensemble.traces))
    else:
        selections = [one(tr) for tr in ensemble.traces]
    pool = [(n, i, float(s.means[i]), float(s.gamma[:, i].sum()))
            for n, s in enumerate(selections) for i in range(s.K)]
    mapping = gmm_remap(pool, K, seed=seed)
    xi = [remap_counts(s.counts, mapping, K, trace=n) for n, s in enumerate(selections)]
    return BaselineFit(method, selections, mapping, xi)
