import itertools

import numpy as np
import pytest
from scipy.special import logsumexp

from vebhmm.data import Hyperparameters, TracePosterior
from vebhmm.vbhmm import (collect_stats, elbo, expected_log_emission, forward_backward,
                          vb_mstep)


def enumerate_paths(log_em, log_A, log_pi):
    """Brute-force marginals over all K**T paths."""
    T, K = log_em.shape
    paths = np.array(list(itertools.product(range(K), repeat=T)))
    w = log_pi[paths[:, 0]] + log_em[np.arange(T), paths].sum(axis=1)
    if T > 1:
        w = w + log_A[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    log_z = logsumexp(w)
    p = np.exp(w - log_z)
    gamma = np.zeros((T, K))
    xi = np.zeros((max(T - 1, 0), K, K))
    for path, pr in zip(paths, p):
        gamma[np.arange(T), path] += pr
        for t in range(T - 1):
            xi[t, path[t], path[t + 1]] += pr
    return gamma, xi, log_z, paths, w


def random_instance(rng, T, K, scale=2.0):
    return (rng.normal(scale=scale, size=(T, K)), rng.normal(size=(K, K)),
            rng.normal(size=K))


def random_psi(rng, K, center=0.0, spread=1.0):
    return Hyperparameters(
        m=np.sort(center + spread * rng.normal(size=K)),
        beta=rng.uniform(0.5, 3.0, K),
        a=rng.uniform(1.5, 5.0, K),
        b=rng.uniform(0.05, 0.5, K),
        alpha=rng.uniform(0.5, 3.0, (K, K)) + 3.0 * np.eye(K),
        rho=rng.uniform(0.5, 2.0, K),
    )


def reference_fit(x, psi, gamma, xi, tol=1e-8, max_iter=100):
    """Plain Python coordinate ascent built from the public pieces.

    The ELBO is evaluated with :func:`vbhmm.elbo`, which uses the chain
    entropy rather than the forward normaliser.
    """
    q = vb_mstep(collect_stats(gamma, xi, x), psi)
    history = []
    post = None
    for _ in range(max_iter):
        gamma, xi, _ = forward_backward(expected_log_emission(q, x), q.expected_log_A(),
                                        q.expected_log_pi())
        q = vb_mstep(collect_stats(gamma, xi, x), psi)
        post = TracePosterior(q.m, q.beta, q.a, q.b, q.alpha, q.rho, gamma, xi)
        value, _ = elbo(x, post, psi)
        done = len(history) > 0 and abs(value - history[-1]) <= tol * abs(value)
        history.append(value)
        if done:
            break
    return post, np.array(history)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def independent_delta_g(hat_alpha, n, seed=0, chunk=1_000_000):
    """Mean and standard error of ΔG from Gamma-normalised Dirichlet draws.

    Uses the legacy Mersenne Twister generator so the stream is unrelated
    to the PCG64 draws inside the package.
    """
    alpha = np.asarray(hat_alpha, dtype=float)
    K = alpha.shape[0]
    rs = np.random.RandomState(seed)
    off = 1.0 - np.eye(K)
    s1 = np.zeros(K)
    s2 = np.zeros(K)
    done = 0
    while done < n:
        m = min(chunk, n - done)
        g = rs.standard_gamma(alpha[None, :, :], size=(m, K, K))
        A = g / g.sum(axis=2, keepdims=True)
        dg = np.log((A * off).sum(axis=2)) - np.log((A * off).sum(axis=1))
        s1 += dg.sum(axis=0)
        s2 += (dg * dg).sum(axis=0)
        done += m
    mean = s1 / n
    var = (s2 - n * mean ** 2) / (n - 1)
    return mean, np.sqrt(var / n)
