"""Exact posterior quantities at desk scale by enumerating switch paths.

For each of the M^T switch sequences, a conditional linear-Gaussian model
remains; filtering/smoothing along the sequence gives its smoothed moments
and joint log-density with the observations.  Combining all sequences with
their posterior weights yields, per slice, the exact switch posterior and
the exact conditional mean/covariance given each switch value (the
labeled-mixture moments are exact even though the mixture itself is not
Gaussian), plus the exact log-evidence.

All weights live in the log domain; reductions use log-sum-exp with a
fixed enumeration order so results are reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.special import logsumexp

from .cg import CGMoments, cg_collapse, cg_kl
from .gaussian import LOG_2PI, chol_logdet, chol_spd, symmetrize
from .model import ObservationSequence, SLDSModel

PATH_GUARD = 10 ** 6


def enumerate_paths(n_switch: int, horizon: int):
    """All switch sequences of the given length, lexicographic order."""
    return [tuple(p) for p in product(range(n_switch), repeat=horizon)]


def _check_path(model: SLDSModel, obs: ObservationSequence, path):
    path = tuple(int(s) for s in path)
    if len(path) != obs.horizon:
        raise ValueError(
            f"path length {len(path)} does not match horizon {obs.horizon}")
    for s in path:
        if not 0 <= s < model.n_switch:
            raise ValueError(f"switch index {s} out of range")
    return path


def kalman_filter_path(model: SLDSModel, obs: ObservationSequence, path):
    """Filtering conditioned on a fixed switch sequence.

    Returns (means, covs, logliks): filtered moments per slice and the
    per-slice predictive log-density increments log p(y_t | y_{1:t-1}, path).
    Covariance updates use the Joseph form for symmetry and stability.
    """
    path = _check_path(model, obs, path)
    horizon = obs.horizon
    n = model.latent_dim
    d = model.obs_dim
    eye = np.eye(n)
    means = np.empty((horizon, n))
    covs = np.empty((horizon, n, n))
    logliks = np.empty(horizon)
    mean = np.zeros(n)
    cov = np.zeros((n, n))
    for t in range(horizon):
        j = path[t]
        if t == 0:
            pred_mean = model.init_mean[j]
            pred_cov = model.init_cov[j]
        else:
            a = model.dynamics[path[t - 1], j]
            q = model.dyn_noise[path[t - 1], j]
            pred_mean = a @ mean
            pred_cov = symmetrize(a @ cov @ a.T + q)
        c = model.emission[j]
        r = model.obs_noise[j]
        resid = obs.values[t] - c @ pred_mean
        innov = symmetrize(c @ pred_cov @ c.T + r)
        chol = chol_spd(innov, f"innovation covariance at slice {t + 1}")
        white = np.linalg.solve(chol, resid)
        logliks[t] = -0.5 * (white @ white + d * LOG_2PI
                             + chol_logdet(chol))
        gain = np.linalg.solve(innov, c @ pred_cov).T
        mean = pred_mean + gain @ resid
        shrink = eye - gain @ c
        cov = symmetrize(shrink @ pred_cov @ shrink.T + gain @ r @ gain.T)
        means[t] = mean
        covs[t] = cov
    return means, covs, logliks


def _path_log_prior(model: SLDSModel, path) -> float:
    with np.errstate(divide="ignore"):
        total = float(np.log(model.switch_prior[path[0]]))
        for prev, cur in zip(path, path[1:]):
            total += float(np.log(model.switch_trans[prev, cur]))
    return total


def kalman_smooth_path(model: SLDSModel, obs: ObservationSequence, path):
    """Smoothing conditioned on a fixed switch sequence.

    Returns (means, covs, log_joint) where log_joint = log P(y, path) is
    the path's log-prior plus the filtering log-density increments.
    """
    path = _check_path(model, obs, path)
    means_f, covs_f, logliks = kalman_filter_path(model, obs, path)
    horizon = obs.horizon
    means = means_f.copy()
    covs = covs_f.copy()
    for t in range(horizon - 2, -1, -1):
        a = model.dynamics[path[t], path[t + 1]]
        q = model.dyn_noise[path[t], path[t + 1]]
        pred_mean = a @ means_f[t]
        pred_cov = symmetrize(a @ covs_f[t] @ a.T + q)
        gain = np.linalg.solve(pred_cov, a @ covs_f[t]).T
        means[t] = means_f[t] + gain @ (means[t + 1] - pred_mean)
        covs[t] = symmetrize(covs_f[t]
                             + gain @ (covs[t + 1] - pred_cov) @ gain.T)
    log_joint = _path_log_prior(model, path) + float(np.sum(logliks))
    return means, covs, log_joint


@dataclass(frozen=True)
class ExactBeliefs:
    """Exact per-slice beliefs and log-evidence from full enumeration.

    beliefs[t] holds the exact switch posterior at slice t+1 together with
    the exact conditional mean and covariance of the continuous state given
    each switch value.  path_log_joints follows the order of paths.
    """

    beliefs: tuple[CGMoments, ...]
    log_likelihood: float
    paths: tuple[tuple[int, ...], ...]
    path_log_joints: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.beliefs)


def _guard(n_paths: int):
    if n_paths > PATH_GUARD:
        raise ValueError(
            f"enumeration guard: {n_paths} switch sequences exceed the "
            f"{PATH_GUARD} limit")


def exact_beliefs(model: SLDSModel, obs: ObservationSequence,
                  paths=None) -> ExactBeliefs:
    """Enumerate all switch sequences and moment-match per slice and switch.

    `paths` may supply the complete path set in a custom order (useful to
    confirm that results do not depend on summation order); it must be a
    permutation of the full enumeration.
    """
    m = model.n_switch
    horizon = obs.horizon
    _guard(m ** horizon)
    if paths is None:
        paths = enumerate_paths(m, horizon)
    else:
        paths = [_check_path(model, obs, p) for p in paths]
        if sorted(paths) != enumerate_paths(m, horizon):
            raise ValueError("paths must be a permutation of the full "
                             "enumeration")
    n_paths = len(paths)
    n = model.latent_dim

    sm_means = np.empty((n_paths, horizon, n))
    sm_covs = np.empty((n_paths, horizon, n, n))
    log_joints = np.empty(n_paths)
    for p, path in enumerate(paths):
        sm_means[p], sm_covs[p], log_joints[p] = kalman_smooth_path(
            model, obs, path)
    log_evidence = float(logsumexp(log_joints))

    path_array = np.array(paths)
    beliefs = []
    per_state = n_paths // m
    for t in range(horizon):
        log_w = np.empty((m, per_state))
        means = np.empty((m, per_state, n))
        covs = np.empty((m, per_state, n, n))
        for j in range(m):
            idx = np.flatnonzero(path_array[:, t] == j)
            if idx.size != per_state:
                raise ValueError("path set is not a full enumeration")
            log_w[j] = log_joints[idx] - log_evidence
            means[j] = sm_means[idx, t]
            covs[j] = sm_covs[idx, t]
        beliefs.append(cg_collapse(log_w, means, covs))
    return ExactBeliefs(tuple(beliefs), log_evidence, tuple(paths),
                        log_joints)


def exact_log_likelihood(model: SLDSModel, obs: ObservationSequence) -> float:
    """log P(y) by enumerating paths, filtering only (no smoothing)."""
    _guard(model.n_switch ** obs.horizon)
    paths = enumerate_paths(model.n_switch, obs.horizon)
    log_joints = np.empty(len(paths))
    for p, path in enumerate(paths):
        _, _, logliks = kalman_filter_path(model, obs, path)
        log_joints[p] = _path_log_prior(model, path) + float(np.sum(logliks))
    return float(logsumexp(log_joints))


def belief_kl_total(exact: ExactBeliefs, approx) -> float:
    """Sum over slices of the divergence from exact to approximate beliefs.

    The exact belief is the reference (first) argument at every slice.
    """
    approx = list(approx)
    if len(approx) != exact.horizon:
        raise ValueError(
            f"expected {exact.horizon} approximate beliefs, got {len(approx)}")
    return float(sum(cg_kl(p, q) for p, q in zip(exact.beliefs, approx)))
