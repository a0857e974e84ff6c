"""Compiled inner loops for HMM message passing."""
import math

import numba
import numpy as np

from .special import _digamma_scalar


@numba.njit(cache=True, nogil=True)
def scaled_forward_backward(log_em, log_A, log_pi):
    """Forward-backward with per-step normalisation.

    Returns ``(gamma, xi, log_z, ok)``; ``ok`` is False when a scale factor
    vanishes or is not finite.
    """
    T, K = log_em.shape
    A = np.exp(log_A)
    pi = np.exp(log_pi)
    em = np.empty((T, K))
    log_z = 0.0
    for t in range(T):
        mx = log_em[t, 0]
        for k in range(1, K):
            if log_em[t, k] > mx:
                mx = log_em[t, k]
        log_z += mx
        for k in range(K):
            em[t, k] = math.exp(log_em[t, k] - mx)

    fwd = np.empty((T, K))
    c = np.empty(T)
    s = 0.0
    for k in range(K):
        fwd[0, k] = pi[k] * em[0, k]
        s += fwd[0, k]
    c[0] = s
    ok = s > 0.0 and math.isfinite(s)
    if not ok:
        return np.zeros((T, K)), np.zeros((max(T - 1, 0), K, K)), -np.inf, False
    for k in range(K):
        fwd[0, k] /= s
    for t in range(1, T):
        s = 0.0
        for j in range(K):
            acc = 0.0
            for i in range(K):
                acc += fwd[t - 1, i] * A[i, j]
            fwd[t, j] = acc * em[t, j]
            s += fwd[t, j]
        c[t] = s
        if not (s > 0.0 and math.isfinite(s)):
            return np.zeros((T, K)), np.zeros((T - 1, K, K)), -np.inf, False
        for j in range(K):
            fwd[t, j] /= s

    bwd = np.empty((T, K))
    for k in range(K):
        bwd[T - 1, k] = 1.0
    for t in range(T - 2, -1, -1):
        for i in range(K):
            acc = 0.0
            for j in range(K):
                acc += A[i, j] * em[t + 1, j] * bwd[t + 1, j]
            bwd[t, i] = acc / c[t + 1]

    gamma = np.empty((T, K))
    for t in range(T):
        s = 0.0
        for k in range(K):
            gamma[t, k] = fwd[t, k] * bwd[t, k]
            s += gamma[t, k]
        for k in range(K):
            gamma[t, k] /= s

    xi = np.empty((T - 1, K, K))
    for t in range(T - 1):
        s = 0.0
        for i in range(K):
            for j in range(K):
                v = fwd[t, i] * A[i, j] * em[t + 1, j] * bwd[t + 1, j]
                xi[t, i, j] = v
                s += v
        for i in range(K):
            for j in range(K):
                xi[t, i, j] /= s

    for t in range(T):
        log_z += math.log(c[t])
    return gamma, xi, log_z, True


@numba.njit(cache=True, nogil=True)
def viterbi(log_em, log_A, log_pi):
    T, K = log_em.shape
    delta = np.empty((T, K))
    back = np.zeros((T, K), dtype=np.int64)
    for k in range(K):
        delta[0, k] = log_pi[k] + log_em[0, k]
    for t in range(1, T):
        for j in range(K):
            best = delta[t - 1, 0] + log_A[0, j]
            arg = 0
            for i in range(1, K):
                v = delta[t - 1, i] + log_A[i, j]
                if v > best:
                    best = v
                    arg = i
            delta[t, j] = best + log_em[t, j]
            back[t, j] = arg
    path = np.empty(T, dtype=np.int64)
    best = delta[T - 1, 0]
    arg = 0
    for k in range(1, K):
        if delta[T - 1, k] > best:
            best = delta[T - 1, k]
            arg = k
    path[T - 1] = arg
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


# ---------------------------------------------------------------------------
# complete per-trace VB loop; mirrors vbhmm.collect_stats / vb_mstep /
# expected_log_emission / fit_trace

_LOG_2PI = math.log(2.0 * math.pi)


@numba.njit(cache=True, nogil=True)
def _stats(gamma, xi, x):
    T, K = gamma.shape
    Nk = np.zeros(K)
    xbar = np.zeros(K)
    S = np.zeros(K)
    for t in range(T):
        for k in range(K):
            Nk[k] += gamma[t, k]
            xbar[k] += gamma[t, k] * x[t]
    for k in range(K):
        if Nk[k] > 0:
            xbar[k] /= Nk[k]
        else:
            xbar[k] = 0.0
    for t in range(T):
        for k in range(K):
            d = x[t] - xbar[k]
            S[k] += gamma[t, k] * d * d
    for k in range(K):
        if not Nk[k] > 0:
            S[k] = 0.0
    C = np.zeros((K, K))
    for t in range(T - 1):
        for i in range(K):
            for j in range(K):
                C[i, j] += xi[t, i, j]
    g0 = gamma[0].copy()
    return Nk, xbar, S, C, g0


@numba.njit(cache=True, nogil=True)
def _mstep(Nk, xbar, S, C, g0, pm, pbeta, pa, pb, palpha, prho):
    beta = pbeta + Nk
    m = (pbeta * pm + Nk * xbar) / beta
    a = pa + 0.5 * Nk
    dm = xbar - pm
    b = pb + 0.5 * (S + pbeta * Nk * dm * dm / beta)
    return m, beta, a, b, palpha + C, prho + g0


@numba.njit(cache=True, nogil=True)
def _expected_logs(m, beta, a, b, alpha, rho, x):
    T = x.shape[0]
    K = m.shape[0]
    log_em = np.empty((T, K))
    for k in range(K):
        c = 0.5 * (_digamma_scalar(a[k]) - math.log(b[k]) - _LOG_2PI - 1.0 / beta[k])
        w = 0.5 * a[k] / b[k]
        for t in range(T):
            d = x[t] - m[k]
            log_em[t, k] = c - w * d * d
    log_A = np.empty((K, K))
    for i in range(K):
        s = 0.0
        for j in range(K):
            s += alpha[i, j]
        ds = _digamma_scalar(s)
        for j in range(K):
            log_A[i, j] = _digamma_scalar(alpha[i, j]) - ds
    s = 0.0
    for k in range(K):
        s += rho[k]
    ds = _digamma_scalar(s)
    log_pi = np.empty(K)
    for k in range(K):
        log_pi[k] = _digamma_scalar(rho[k]) - ds
    return log_em, log_A, log_pi


@numba.njit(cache=True, nogil=True)
def _expected_complete(log_em, log_A, log_pi, gamma, C):
    T, K = gamma.shape
    s = 0.0
    for t in range(T):
        for k in range(K):
            s += gamma[t, k] * log_em[t, k]
    for i in range(K):
        for j in range(K):
            s += C[i, j] * log_A[i, j]
    for k in range(K):
        s += gamma[0, k] * log_pi[k]
    return s


@numba.njit(cache=True, nogil=True)
def _kl_dirichlet_vec(q, p):
    q0 = 0.0
    p0 = 0.0
    for k in range(q.shape[0]):
        q0 += q[k]
        p0 += p[k]
    dq0 = _digamma_scalar(q0)
    out = math.lgamma(q0) - math.lgamma(p0)
    for k in range(q.shape[0]):
        out += math.lgamma(p[k]) - math.lgamma(q[k]) + (q[k] - p[k]) * (_digamma_scalar(q[k]) - dq0)
    return out


@numba.njit(cache=True, nogil=True)
def _kl_terms(m, beta, a, b, alpha, rho, pm, pbeta, pa, pb, palpha, prho):
    K = m.shape[0]
    ng = 0.0
    for k in range(K):
        ng += ((a[k] - pa[k]) * _digamma_scalar(a[k]) - math.lgamma(a[k]) + math.lgamma(pa[k])
               + pa[k] * (math.log(b[k]) - math.log(pb[k])) + a[k] * (pb[k] - b[k]) / b[k])
        r = pbeta[k] / beta[k]
        dm = m[k] - pm[k]
        ng += 0.5 * (r - 1.0 - math.log(r) + pbeta[k] * (a[k] / b[k]) * dm * dm)
    tr = 0.0
    for k in range(K):
        tr += _kl_dirichlet_vec(alpha[k], palpha[k])
    return ng, tr, _kl_dirichlet_vec(rho, prho)


@numba.njit(cache=True, nogil=True)
def vb_trace(x, pm, pbeta, pa, pb, palpha, prho, gamma, xi, tol, max_iter):
    """Coordinate-ascent VB for one trace; see ``vbhmm.fit_trace``.

    Returns the posterior parameters, final marginals, ELBO, its breakdown
    ``(trajectory, kl_ng, kl_transitions, kl_initial)``, the ELBO history
    and an ok flag (False on forward-backward underflow).
    """
    Nk, xbar, S, C, g0 = _stats(gamma, xi, x)
    m, beta, a, b, alpha, rho = _mstep(Nk, xbar, S, C, g0, pm, pbeta, pa, pb, palpha, prho)
    log_em, log_A, log_pi = _expected_logs(m, beta, a, b, alpha, rho, x)
    hist = np.empty(max_iter)
    value = -np.inf
    traj = 0.0
    kl = (0.0, 0.0, 0.0)
    n = 0
    ok = True
    for it in range(max_iter):
        gamma, xi, log_z, ok = scaled_forward_backward(log_em, log_A, log_pi)
        if not ok:
            break
        Nk, xbar, S, C, g0 = _stats(gamma, xi, x)
        m, beta, a, b, alpha, rho = _mstep(Nk, xbar, S, C, g0, pm, pbeta, pa, pb, palpha, prho)
        log_em2, log_A2, log_pi2 = _expected_logs(m, beta, a, b, alpha, rho, x)
        traj = log_z + (_expected_complete(log_em2, log_A2, log_pi2, gamma, C)
                        - _expected_complete(log_em, log_A, log_pi, gamma, C))
        kl = _kl_terms(m, beta, a, b, alpha, rho, pm, pbeta, pa, pb, palpha, prho)
        new_value = traj - kl[0] - kl[1] - kl[2]
        hist[it] = new_value
        n = it + 1
        log_em, log_A, log_pi = log_em2, log_A2, log_pi2
        done = abs(new_value - value) <= tol * abs(new_value)
        value = new_value
        if done:
            break
    return (m, beta, a, b, alpha, rho, gamma, xi, value,
            (traj, -kl[0], -kl[1], -kl[2]), hist[:n].copy(), ok)
