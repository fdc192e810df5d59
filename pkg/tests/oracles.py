"""Independent reference implementations used only by the tests.

Every routine here recomputes a quantity the library also produces, but by
a deliberately different route: textbook filtering/smoothing recursions
with plain matrix inverses, dense joint-Gaussian assembly straight from the
simulation equations, tensor-grid numerical quadrature, and Monte Carlo.
Agreement between the two routes is then evidence of correctness rather
than of shared code.  Nothing in this module imports from the package; the
model and potential objects are consumed as plain attribute bags.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import logsumexp
from scipy.stats import multivariate_normal


def dense_logpdf(x, mean, cov) -> float:
    """Gaussian log-density via scipy (no Cholesky sharing with the library)."""
    return float(multivariate_normal(mean=np.asarray(mean, dtype=float),
                                     cov=np.asarray(cov, dtype=float),
                                     allow_singular=False).logpdf(
                                         np.asarray(x, dtype=float)))


# ---------------------------------------------------------------------------
# Textbook Kalman filter / Rauch-Tung-Striebel smoother along a switch path
# ---------------------------------------------------------------------------

def _as_path(model, horizon, path):
    if path is None:
        if model.n_switch != 1:
            raise ValueError("a switch path is required when M > 1")
        return (0,) * horizon
    return tuple(int(s) for s in path)


def kalman_filter_reference(model, obs, path=None):
    """Filtered moments and log-density increments, plain-inverse textbook form.

    Uses explicit matrix inverses and the short-form covariance update
    (I - KC) P, unlike the library's Joseph-form route, so roundoff enters
    differently on purpose.  Returns (means, covs, increments) with
    increments[t] = log p(y_{t+1} | y_{1:t}, path).
    """
    path = _as_path(model, obs.horizon, path)
    horizon = obs.horizon
    n = model.latent_dim
    eye = np.eye(n)
    means = np.empty((horizon, n))
    covs = np.empty((horizon, n, n))
    increments = np.empty(horizon)
    for t in range(horizon):
        j = path[t]
        if t == 0:
            pred_mean = np.array(model.init_mean[j])
            pred_cov = np.array(model.init_cov[j])
        else:
            a = model.dynamics[path[t - 1], j]
            q = model.dyn_noise[path[t - 1], j]
            pred_mean = a @ means[t - 1]
            pred_cov = a @ covs[t - 1] @ a.T + q
        c = model.emission[j]
        r = model.obs_noise[j]
        innov_cov = c @ pred_cov @ c.T + r
        increments[t] = dense_logpdf(obs.values[t], c @ pred_mean, innov_cov)
        gain = pred_cov @ c.T @ np.linalg.inv(innov_cov)
        means[t] = pred_mean + gain @ (obs.values[t] - c @ pred_mean)
        covs[t] = (eye - gain @ c) @ pred_cov
        covs[t] = 0.5 * (covs[t] + covs[t].T)
    return means, covs, increments


def path_log_prior(model, path) -> float:
    """log P(path) under the switch chain."""
    total = float(np.log(model.switch_prior[path[0]]))
    for prev, cur in zip(path, path[1:]):
        total += float(np.log(model.switch_trans[prev, cur]))
    return total


def rts_smoother_reference(model, obs, path=None):
    """Smoothed moments and log P(y, path), textbook backward recursion."""
    path = _as_path(model, obs.horizon, path)
    means_f, covs_f, increments = kalman_filter_reference(model, obs, path)
    horizon = obs.horizon
    means = means_f.copy()
    covs = covs_f.copy()
    for t in range(horizon - 2, -1, -1):
        a = model.dynamics[path[t], path[t + 1]]
        q = model.dyn_noise[path[t], path[t + 1]]
        pred_mean = a @ means_f[t]
        pred_cov = a @ covs_f[t] @ a.T + q
        gain = covs_f[t] @ a.T @ np.linalg.inv(pred_cov)
        means[t] = means_f[t] + gain @ (means[t + 1] - pred_mean)
        covs[t] = covs_f[t] + gain @ (covs[t + 1] - pred_cov) @ gain.T
        covs[t] = 0.5 * (covs[t] + covs[t].T)
    log_joint = path_log_prior(model, path) + float(np.sum(increments))
    return means, covs, log_joint


# ---------------------------------------------------------------------------
# Dense joint-Gaussian assembly from the simulation equations
# ---------------------------------------------------------------------------

def path_joint_moments(model, path, horizon):
    """Moments of the stacked (z_{1:T}, y_{1:T}) given a switch path.

    Built by propagating the linear simulation equations, block by block:
    Cov(z_t, z_u) = A_t Cov(z_{t-1}, z_u) for u < t.  Returns
    (mean_z (T,N), mean_y (T,D), cov_zz, cov_zy, cov_yy) with the
    covariances as (T,T,...) block arrays.
    """
    path = tuple(int(s) for s in path)
    n = model.latent_dim
    d = model.obs_dim
    mean_z = np.zeros((horizon, n))
    cov_zz = np.zeros((horizon, horizon, n, n))
    mean_z[0] = model.init_mean[path[0]]
    cov_zz[0, 0] = model.init_cov[path[0]]
    for t in range(1, horizon):
        a = model.dynamics[path[t - 1], path[t]]
        q = model.dyn_noise[path[t - 1], path[t]]
        mean_z[t] = a @ mean_z[t - 1]
        for u in range(t):
            cov_zz[t, u] = a @ cov_zz[t - 1, u]
            cov_zz[u, t] = cov_zz[t, u].T
        cov_zz[t, t] = a @ cov_zz[t - 1, t - 1] @ a.T + q

    mean_y = np.zeros((horizon, d))
    cov_zy = np.zeros((horizon, horizon, n, d))
    cov_yy = np.zeros((horizon, horizon, d, d))
    for t in range(horizon):
        c_t = model.emission[path[t]]
        mean_y[t] = c_t @ mean_z[t]
        for u in range(horizon):
            c_u = model.emission[path[u]]
            cov_zy[t, u] = cov_zz[t, u] @ c_u.T
            cov_yy[t, u] = c_t @ cov_zz[t, u] @ c_u.T
        cov_yy[t, t] += model.obs_noise[path[t]]
    return mean_z, mean_y, cov_zz, cov_zy, cov_yy


def _flatten_blocks(blocks, rows, cols):
    horizon = blocks.shape[0]
    return np.concatenate(
        [np.concatenate([blocks[t, u] for u in range(horizon)], axis=1)
         for t in range(horizon)], axis=0).reshape(horizon * rows,
                                                   horizon * cols)


def path_log_joint_reference(model, obs, path) -> float:
    """log P(y_{1:T}, path) via one dense Gaussian evaluation of y_{1:T}."""
    path = tuple(int(s) for s in path)
    horizon = obs.horizon
    d = model.obs_dim
    _, mean_y, _, _, cov_yy = path_joint_moments(model, path, horizon)
    dense_cov = _flatten_blocks(cov_yy, d, d)
    return path_log_prior(model, path) + dense_logpdf(
        obs.values.ravel(), mean_y.ravel(), dense_cov)


def path_posterior_reference(model, obs, path):
    """Posterior of the stacked z_{1:T} given y_{1:T} and a switch path.

    One dense Gaussian conditioning step on the assembled joint; returns
    (mean (T N,), cov (T N, T N), log P(y, path)).
    """
    path = tuple(int(s) for s in path)
    horizon = obs.horizon
    n = model.latent_dim
    d = model.obs_dim
    mean_z, mean_y, cov_zz, cov_zy, cov_yy = path_joint_moments(
        model, path, horizon)
    big_zz = _flatten_blocks(cov_zz, n, n)
    big_zy = _flatten_blocks(cov_zy, n, d)
    big_yy = _flatten_blocks(cov_yy, d, d)
    resid = obs.values.ravel() - mean_y.ravel()
    solve = np.linalg.solve(big_yy, np.column_stack([resid, big_zy.T]))
    mean = mean_z.ravel() + big_zy @ solve[:, 0]
    cov = big_zz - big_zy @ solve[:, 1:]
    cov = 0.5 * (cov + cov.T)
    log_joint = path_log_prior(model, path) + dense_logpdf(
        obs.values.ravel(), mean_y.ravel(), big_yy)
    return mean, cov, log_joint


def exact_log_likelihood_reference(model, obs) -> float:
    """log P(y) by summing the dense path evaluations over all paths."""
    from itertools import product
    paths = list(product(range(model.n_switch), repeat=obs.horizon))
    return float(logsumexp([path_log_joint_reference(model, obs, p)
                            for p in paths]))


# ---------------------------------------------------------------------------
# Numerical quadrature
# ---------------------------------------------------------------------------

def _gl_nodes(lo: float, hi: float, n_nodes: int):
    x, w = leggauss(n_nodes)
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), w * half


def quadrature_moments(scale, shift, precision, n_nodes=200, width=10.0):
    """Mass, mean, covariance of exp(g + h'z - z'Kz/2) by tensor quadrature.

    Supports dimension 1 or 2; the integration box is the canonical mean
    plus/minus ``width`` marginal standard deviations per axis.  Returns
    (mass, mean, cov).
    """
    shift = np.asarray(shift, dtype=float).reshape(-1)
    precision = np.asarray(precision, dtype=float)
    n = shift.size
    center = np.linalg.solve(precision, shift)
    sigma = np.sqrt(np.diag(np.linalg.inv(precision)))
    if n == 1:
        z, w = _gl_nodes(center[0] - width * sigma[0],
                         center[0] + width * sigma[0], n_nodes)
        f = np.exp(scale + shift[0] * z - 0.5 * precision[0, 0] * z * z)
        mass = float(np.sum(w * f))
        mean = float(np.sum(w * z * f)) / mass
        second = float(np.sum(w * z * z * f)) / mass
        return mass, np.array([mean]), np.array([[second - mean * mean]])
    if n == 2:
        z0, w0 = _gl_nodes(center[0] - width * sigma[0],
                           center[0] + width * sigma[0], n_nodes)
        z1, w1 = _gl_nodes(center[1] - width * sigma[1],
                           center[1] + width * sigma[1], n_nodes)
        g0, g1 = np.meshgrid(z0, z1, indexing="ij")
        pts = np.stack([g0.ravel(), g1.ravel()], axis=1)
        ww = np.outer(w0, w1).ravel()
        expo = scale + pts @ shift - 0.5 * np.einsum(
            "gi,ij,gj->g", pts, precision, pts)
        f = np.exp(expo)
        mass = float(np.sum(ww * f))
        mean = (ww * f) @ pts / mass
        second = np.einsum("g,gi,gj->ij", ww * f, pts, pts) / mass
        return mass, mean, second - np.outer(mean, mean)
    raise ValueError("quadrature supports dimension 1 or 2 only")


def quadrature_two_step_beliefs(model, obs, n_nodes=160, width=10.0):
    """Slice beliefs and evidence for scalar-state, two-step models.

    Integrates the full unnormalized density over a tensor grid in
    (z_1, z_2) for every switch pair and aggregates exactly what the
    enumeration oracle reports: the log-evidence, and per slice the switch
    posterior with the conditional mean/variance of the state given each
    switch value.  Requires latent dimension 1 and horizon 2.
    """
    if model.latent_dim != 1 or obs.horizon != 2:
        raise ValueError("quadrature oracle needs N = 1 and T = 2")
    m = model.n_switch
    d = model.obs_dim
    y1, y2 = obs.values[0], obs.values[1]

    sig0 = np.sqrt(model.init_cov[:, 0, 0])
    lo1 = float(np.min(model.init_mean[:, 0] - width * sig0))
    hi1 = float(np.max(model.init_mean[:, 0] + width * sig0))
    lo2, hi2 = np.inf, -np.inf
    for i in range(m):
        for j in range(m):
            a = model.dynamics[i, j, 0, 0]
            sq = width * np.sqrt(model.dyn_noise[i, j, 0, 0])
            ends = (a * lo1, a * hi1)
            lo2 = min(lo2, min(ends) - sq)
            hi2 = max(hi2, max(ends) + sq)
    z1, w1 = _gl_nodes(lo1, hi1, n_nodes)
    z2, w2 = _gl_nodes(lo2, hi2, n_nodes)

    def em_logpdf(j, y, z):
        c = model.emission[j, :, 0]
        r = model.obs_noise[j]
        rinv = np.linalg.inv(r)
        _, logdet = np.linalg.slogdet(r)
        resid = y[None, :] - z[:, None] * c[None, :]
        quad = np.einsum("gd,de,ge->g", resid, rinv, resid)
        return -0.5 * (quad + d * np.log(2.0 * np.pi) + logdet)

    log_prior_z = np.stack([
        -0.5 * ((z1 - model.init_mean[j, 0]) ** 2 / model.init_cov[j, 0, 0]
                + np.log(2.0 * np.pi * model.init_cov[j, 0, 0]))
        for j in range(m)])
    log_em1 = np.stack([em_logpdf(j, y1, z1) for j in range(m)])
    log_em2 = np.stack([em_logpdf(j, y2, z2) for j in range(m)])

    log_block = np.empty((m, m, n_nodes, n_nodes))
    for i in range(m):
        for j in range(m):
            a = model.dynamics[i, j, 0, 0]
            q = model.dyn_noise[i, j, 0, 0]
            log_dyn = -0.5 * ((z2[None, :] - a * z1[:, None]) ** 2 / q
                              + np.log(2.0 * np.pi * q))
            log_block[i, j] = (np.log(model.switch_prior[i])
                               + log_prior_z[i][:, None]
                               + log_em1[i][:, None]
                               + np.log(model.switch_trans[i, j])
                               + log_dyn + log_em2[j][None, :])

    offset = float(np.max(log_block))
    f = np.exp(log_block - offset)
    mass = np.einsum("a,ijab,b->ij", w1, f, w2)
    num_z1 = np.einsum("a,ijab,b->ij", w1 * z1, f, w2)
    num_z1sq = np.einsum("a,ijab,b->ij", w1 * z1 * z1, f, w2)
    num_z2 = np.einsum("a,ijab,b->ij", w1, f, w2 * z2)
    num_z2sq = np.einsum("a,ijab,b->ij", w1, f, w2 * z2 * z2)

    log_evidence = offset + float(np.log(mass.sum()))
    slices = []
    for axis, num, numsq in ((1, num_z1, num_z1sq), (0, num_z2, num_z2sq)):
        state_mass = mass.sum(axis=axis)
        weights = state_mass / mass.sum()
        means = (num.sum(axis=axis) / state_mass)[:, None]
        second = numsq.sum(axis=axis) / state_mass
        covs = (second - means[:, 0] ** 2)[:, None, None]
        slices.append((weights, means, covs))
    return {"log_evidence": log_evidence, "slices": slices}


# ---------------------------------------------------------------------------
# Monte Carlo mixture moments
# ---------------------------------------------------------------------------

def mc_mixture_moments(log_w, means, covs, n_samples=1_000_000, seed=0):
    """Sample moments of a Gaussian mixture (normalized internally).

    Returns (mean, cov, standard error of the mean per coordinate); the
    caller should compare at a few standard errors.
    """
    log_w = np.asarray(log_w, dtype=float).reshape(-1)
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    rng = np.random.default_rng(seed)
    probs = np.exp(log_w - logsumexp(log_w))
    probs /= probs.sum()
    counts = rng.multinomial(n_samples, probs)
    draws = []
    for k, count in enumerate(counts):
        if count == 0:
            continue
        chol = np.linalg.cholesky(covs[k])
        draws.append(means[k] + rng.standard_normal((count, means.shape[1]))
                     @ chol.T)
    pool = np.concatenate(draws, axis=0)
    mean = pool.mean(axis=0)
    cov = np.cov(pool.T, bias=True).reshape(means.shape[1], means.shape[1])
    sem = pool.std(axis=0) / np.sqrt(n_samples)
    return mean, cov, sem


# ---------------------------------------------------------------------------
# Pointwise density evaluation
# ---------------------------------------------------------------------------

def canonical_log_density(scale, shift, precision, x) -> float:
    """log of exp(g + h'x - x'Kx/2) at one point."""
    x = np.asarray(x, dtype=float).reshape(-1)
    shift = np.asarray(shift, dtype=float).reshape(-1)
    precision = np.asarray(precision, dtype=float)
    return float(scale + shift @ x - 0.5 * x @ precision @ x)


def potential_block_log_density(pot, i, j, x) -> float:
    """Canonical evaluation of one switch-pair block of a step potential."""
    return canonical_log_density(pot.scales[i, j], pot.shifts[i, j],
                                 pot.precisions[i, j], x)


def step_log_density_reference(model, t, y_t, i, j, x) -> float:
    """Direct product-of-densities evaluation of a step potential block.

    For t >= 2 the point x stacks (z_{t-1}, z_t) and the value is
    log P(s_t=j | s_{t-1}=i) + log p(z_t | z_{t-1}, i, j) + log p(y_t | z_t, j);
    for t = 1 the point is z_1 and the prior over (s_1, z_1) replaces the
    transition and dynamics terms.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y_t = np.asarray(y_t, dtype=float).reshape(-1)
    n = model.latent_dim
    if t == 1:
        z = x
        return (float(np.log(model.switch_prior[j]))
                + dense_logpdf(z, model.init_mean[j], model.init_cov[j])
                + dense_logpdf(y_t, model.emission[j] @ z,
                               model.obs_noise[j]))
    u, v = x[:n], x[n:]
    return (float(np.log(model.switch_trans[i, j]))
            + dense_logpdf(v, model.dynamics[i, j] @ u,
                           model.dyn_noise[i, j])
            + dense_logpdf(y_t, model.emission[j] @ v, model.obs_noise[j]))
