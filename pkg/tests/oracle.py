"""Naive, loop-based reference implementation of the variational updates.

Written directly from the update formulas with explicit sums and
``np.linalg.inv`` so that it shares no code path with the library beyond
reading posterior parameters off a state.
"""

import math

import numpy as np
from scipy.special import digamma, gammaln


def kernel_matrix(X, cfg):
    n = X.shape[0]
    K = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if cfg.kind == "linear":
                K[i, j] = sum(X[i, d] * X[j, d] for d in range(X.shape[1]))
            elif cfg.kind == "polynomial":
                K[i, j] = (sum(X[i, d] * X[j, d] for d in range(X.shape[1])) + cfg.coef0) ** cfg.degree
            elif cfg.kind == "rbf":
                K[i, j] = math.exp(-cfg.gamma * sum((X[i, d] - X[j, d]) ** 2 for d in range(X.shape[1])))
            elif cfg.kind == "ard_rbf":
                K[i, j] = math.exp(-sum(cfg.lam[d] * (X[i, d] - X[j, d]) ** 2 for d in range(X.shape[1])))
            else:
                raise ValueError(cfg.kind)
    if cfg.center:
        C = np.zeros_like(K)
        g = sum(K[a, b] for a in range(n) for b in range(n)) / n ** 2
        for i in range(n):
            for j in range(n):
                C[i, j] = K[i, j] - sum(K[i, :]) / n - sum(K[:, j]) / n + g
        K = C
    return K


def target(view):
    """Observation matrix of a view with unobserved rows zeroed."""
    if view.spec.kernelized:
        return kernel_matrix(view.data.X, view.kernel)[:, view.rv]
    Y = view.data.X.copy()
    Y[~view.data.observed_mask] = 0.0
    return Y


def z_cov(state, n):
    return state.z.covs[state.z.groups[n]]


def ezz(state, n):
    mu = state.z.mean[n]
    return np.outer(mu, mu) + z_cov(state, n)


def row_cov(view, r):
    d = view.dual
    if d.cov_shared is not None:
        return d.cov_shared
    K = d.basis.shape[0]
    S = np.zeros((K, K))
    for k in range(K):
        for l in range(K):
            S[k, l] = sum(d.basis[k, i] * d.row_scales[r, i] * d.basis[l, i] for i in range(K))
    return S


def eww(view, r):
    mu = view.dual.mean[r]
    return np.outer(mu, mu) + row_cov(view, r)


def ztz(state, view):
    K = state.z.mean.shape[1]
    S = np.zeros((K, K))
    for n in range(state.z.mean.shape[0]):
        if view.data.observed_mask[n]:
            S += ezz(state, n)
    return S


def update_dual(state, view):
    """Means and per-row covariances of q(W) / q(A)."""
    Y = target(view)
    Z = state.z.mean
    tau = view.tau.a / view.tau.b
    alpha = view.alpha.a / view.alpha.b
    S = ztz(state, view)
    R, K = view.dual.mean.shape
    means = np.zeros((R, K))
    covs = np.zeros((R, K, K))
    for r in range(R):
        g = 1.0 if view.gamma is None else view.gamma.a[r] / view.gamma.b[r]
        P = np.diag(alpha * g) + tau * S
        C = np.linalg.inv(P)
        rhs = np.zeros(K)
        for n in range(Z.shape[0]):
            if view.data.observed_mask[n]:
                rhs += tau * Y[n, r] * Z[n]
        means[r] = C @ rhs
        covs[r] = C
    return means, covs


def update_alpha(state, view):
    h = state.hyper
    R, K = view.dual.mean.shape
    a = np.full(K, h.a_alpha + R / 2)
    b = np.full(K, h.b_alpha)
    for k in range(K):
        for r in range(R):
            g = 1.0 if view.gamma is None else view.gamma.a[r] / view.gamma.b[r]
            b[k] += 0.5 * g * eww(view, r)[k, k]
    return a, b


def update_gamma(state, view):
    h = state.hyper
    R, K = view.dual.mean.shape
    alpha = view.alpha.a / view.alpha.b
    a = np.full(R, h.a_gamma + K / 2)
    b = np.array([h.b_gamma + 0.5 * sum(alpha[k] * eww(view, r)[k, k] for k in range(K)) for r in range(R)])
    return a, b


def expected_sq_error(state, view):
    Y = target(view)
    total = 0.0
    for n in range(Y.shape[0]):
        if not view.data.observed_mask[n]:
            continue
        zz = ezz(state, n)
        for r in range(Y.shape[1]):
            pred = float(state.z.mean[n] @ view.dual.mean[r])
            total += Y[n, r] ** 2 - 2 * Y[n, r] * pred + float(np.sum(zz * eww(view, r)))
    return total


def update_tau(state, view):
    h = state.hyper
    Y = target(view)
    n_obs = int(view.data.observed_mask.sum())
    return h.a_tau + n_obs * Y.shape[1] / 2, h.b_tau + 0.5 * expected_sq_error(state, view)


def update_z(state):
    """Per-row means and covariances of q(Z)."""
    N, K = state.z.mean.shape
    means = np.zeros((N, K))
    covs = np.zeros((N, K, K))
    targets = [target(v) for v in state.views]
    for n in range(N):
        P = np.eye(K)
        rhs = np.zeros(K)
        for v, Y in zip(state.views, targets):
            if not v.data.observed_mask[n]:
                continue
            tau = v.tau.a / v.tau.b
            for r in range(Y.shape[1]):
                P += tau * eww(v, r)
                rhs += tau * Y[n, r] * v.dual.mean[r]
        C = np.linalg.inv(P)
        means[n] = C @ rhs
        covs[n] = C
    return means, covs


def _gauss_entropy(C):
    k = C.shape[0]
    return 0.5 * (k * (1 + math.log(2 * math.pi)) + np.linalg.slogdet(C)[1])


def _gamma_elbo(a, b, a0, b0):
    """E_q[log Gamma(x; a0, b0)] + H[Gamma(a, b)] elementwise, summed."""
    total = 0.0
    for ai, bi in zip(np.atleast_1d(a), np.atleast_1d(b)):
        elog = digamma(ai) - math.log(bi)
        total += a0 * math.log(b0) - gammaln(a0) + (a0 - 1) * elog - b0 * ai / bi
        total += ai - math.log(bi) + gammaln(ai) + (1 - ai) * digamma(ai)
    return total


def elbo(state):
    """Full bound: every expected log density minus every log q, term by term."""
    h = state.hyper
    N, K = state.z.mean.shape
    total = 0.0
    for n in range(N):
        zz = ezz(state, n)
        total += -0.5 * K * math.log(2 * math.pi) - 0.5 * np.trace(zz) + _gauss_entropy(z_cov(state, n))
    for v in state.views:
        tau_a, tau_b = float(v.tau.a), float(v.tau.b)
        elog_tau = digamma(tau_a) - math.log(tau_b)
        Y = target(v)
        n_obs = int(v.data.observed_mask.sum())
        total += 0.5 * n_obs * Y.shape[1] * (elog_tau - math.log(2 * math.pi))
        total -= 0.5 * tau_a / tau_b * expected_sq_error(state, v)
        R = v.dual.mean.shape[0]
        for r in range(R):
            if v.gamma is None:
                g, elog_g = 1.0, 0.0
            else:
                g = v.gamma.a[r] / v.gamma.b[r]
                elog_g = digamma(v.gamma.a[r]) - math.log(v.gamma.b[r])
            ww = eww(v, r)
            for k in range(K):
                elog_a = digamma(v.alpha.a[k]) - math.log(v.alpha.b[k])
                total += 0.5 * (elog_a + elog_g - math.log(2 * math.pi)) - 0.5 * g * v.alpha.a[k] / v.alpha.b[k] * ww[k, k]
            total += _gauss_entropy(row_cov(v, r))
        total += _gamma_elbo(v.alpha.a, v.alpha.b, h.a_alpha, h.b_alpha)
        total += _gamma_elbo([tau_a], [tau_b], h.a_tau, h.b_tau)
        if v.gamma is not None:
            total += _gamma_elbo(v.gamma.a, v.gamma.b, h.a_gamma, h.b_gamma)
    return total
