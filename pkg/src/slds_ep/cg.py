"""The conditional Gaussian exponential family: a discrete switch state
paired with a continuous vector.

Canonical form stores one Gaussian potential per switch state j,

    q(s=j, z) = exp(scale_j + shift_j'z - z'P_j z / 2),

which is exp(theta'f(x)) for the sufficient statistics
f(s, z) = (1[s=j], 1[s=j] z, 1[s=j] zz').  Moment form stores normalized
state weights p_j, per-state means m_j and covariances V_j, plus the total
log-mass of the potential.  Because the indicators sum to one, the family
is one parameter fat: adding a constant to every scale_j changes the mass
but not the distribution.  Carrying the log-mass separately makes the pair
(mean parameters, log-mass) a bijection with the canonical parameters, so
the two directions of the link between parameterizations invert each other
exactly.

State weights are handled in log space throughout: two-slice mixtures have
M^2 components whose weights underflow quickly for unlikely switch paths.
Zero or underflowed weights are an error, never clamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ImproperPotential, StateVanished, WeightUnderflow
from .gaussian import (LOG_2PI, canonical_from_moments, chol_logdet, chol_spd,
                       log_sum_exp, moments_from_canonical, symmetrize, _lock)

# Below this, a state weight cannot be inverted back to canonical form
# without degrading the conditional moments: logs are exact down to the
# smallest normal double, but the mass-weighted first/second statistics of
# a lighter state would themselves go subnormal and lose relative
# precision.  See WeightUnderflow.
WEIGHT_FLOOR = 1e-300

WEIGHT_SUM_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class CGCanonical:
    """Canonical conditional Gaussian potential, one block per state."""

    scales: np.ndarray      # (M,)
    shifts: np.ndarray      # (M, N)
    precisions: np.ndarray  # (M, N, N), symmetrized on construction

    def __post_init__(self):
        scales = np.array(self.scales, dtype=float).reshape(-1)
        shifts = np.array(self.shifts, dtype=float)
        precisions = np.array(self.precisions, dtype=float)
        m = scales.size
        if shifts.ndim != 2 or shifts.shape[0] != m:
            raise ValueError(f"shifts must have shape ({m}, N), got {shifts.shape}")
        n = shifts.shape[1]
        if precisions.shape != (m, n, n):
            raise ValueError(
                f"precisions must have shape ({m}, {n}, {n}), got {precisions.shape}")
        object.__setattr__(self, "scales", _lock(scales))
        object.__setattr__(self, "shifts", _lock(shifts))
        object.__setattr__(self, "precisions", _lock(symmetrize(precisions)))

    @property
    def n_states(self) -> int:
        return self.scales.size

    @property
    def dim(self) -> int:
        return self.shifts.shape[1]

    @classmethod
    def zero(cls, n_states: int, dim: int) -> "CGCanonical":
        """The unit potential (all parameters zero)."""
        return cls(np.zeros(n_states), np.zeros((n_states, dim)),
                   np.zeros((n_states, dim, dim)))

    def flatten(self) -> np.ndarray:
        """All parameters as one vector (scales, shifts, precisions)."""
        return np.concatenate([self.scales, self.shifts.ravel(),
                               self.precisions.ravel()])


@dataclass(frozen=True, eq=False)
class CGMoments:
    """Normalized conditional Gaussian: weights sum to one, each V_j SPD.

    The total mass of the underlying potential is exp(log_mass); the
    weights/means/covariances describe the normalized distribution.
    """

    weights: np.ndarray  # (M,)
    means: np.ndarray    # (M, N)
    covs: np.ndarray     # (M, N, N)
    log_mass: float = 0.0

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float).reshape(-1)
        means = np.array(self.means, dtype=float)
        covs = np.array(self.covs, dtype=float)
        m = weights.size
        if means.ndim != 2 or means.shape[0] != m:
            raise ValueError(f"means must have shape ({m}, N), got {means.shape}")
        n = means.shape[1]
        if covs.shape != (m, n, n):
            raise ValueError(
                f"covs must have shape ({m}, {n}, {n}), got {covs.shape}")
        if np.any(weights < 0.0):
            raise ValueError("state weights must be nonnegative")
        total = float(weights.sum())
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"state weights sum to {total!r}, expected 1")
        covs = symmetrize(covs)
        chol_spd(covs, "state covariance")
        object.__setattr__(self, "weights", _lock(weights))
        object.__setattr__(self, "means", _lock(means))
        object.__setattr__(self, "covs", _lock(covs))
        object.__setattr__(self, "log_mass", float(self.log_mass))

    @property
    def n_states(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True, eq=False)
class CGMeanParams:
    """Expected sufficient statistics of the normalized distribution.

    mass_j = p_j, first_j = p_j m_j, second_j = p_j (V_j + m_j m_j').
    The total log-mass rides along so that mean parameters plus log-mass
    determine the canonical parameters uniquely.
    """

    mass: np.ndarray    # (M,)
    first: np.ndarray   # (M, N)
    second: np.ndarray  # (M, N, N)
    log_mass: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mass", _lock(np.array(self.mass, dtype=float)))
        object.__setattr__(self, "first", _lock(np.array(self.first, dtype=float)))
        object.__setattr__(self, "second",
                           _lock(symmetrize(np.array(self.second, dtype=float))))
        object.__setattr__(self, "log_mass", float(self.log_mass))

    @classmethod
    def from_moments(cls, q: CGMoments) -> "CGMeanParams":
        p = q.weights
        first = p[:, None] * q.means
        outer = np.einsum("jk,jl->jkl", q.means, q.means)
        second = p[:, None, None] * (q.covs + outer)
        return cls(p.copy(), first, second, q.log_mass)

    def to_moments(self) -> CGMoments:
        p = self.mass
        bad = np.where(~(p > WEIGHT_FLOOR))[0]
        if bad.size:
            j = int(bad[0])
            raise WeightUnderflow(
                f"state {j} weight {p[j]:.3g} is too small to recover "
                f"conditional moments")
        means = self.first / p[:, None]
        outer = np.einsum("jk,jl->jkl", means, means)
        covs = self.second / p[:, None, None] - outer
        return CGMoments(p, means, covs, self.log_mass)

    def as_vector(self) -> np.ndarray:
        """Normalized statistics as one flat vector (log-mass excluded)."""
        return np.concatenate([self.mass, self.first.ravel(),
                               self.second.ravel()])


def cg_multiply(a: CGCanonical, b: CGCanonical) -> CGCanonical:
    """Product of two potentials (canonical parameter addition)."""
    _check_shapes(a, b)
    return CGCanonical(a.scales + b.scales, a.shifts + b.shifts,
                       a.precisions + b.precisions)


def cg_divide(a: CGCanonical, b: CGCanonical) -> CGCanonical:
    """Ratio of two potentials; the result may be improper, which is legal."""
    _check_shapes(a, b)
    return CGCanonical(a.scales - b.scales, a.shifts - b.shifts,
                       a.precisions - b.precisions)


def cg_damped_mix(old: CGCanonical, new: CGCanonical, eps: float) -> CGCanonical:
    """old + eps (new - old) in canonical parameters."""
    _check_shapes(old, new)
    return CGCanonical(old.scales + eps * (new.scales - old.scales),
                       old.shifts + eps * (new.shifts - old.shifts),
                       old.precisions + eps * (new.precisions - old.precisions))


def _check_shapes(a, b):
    if a.n_states != b.n_states or a.dim != b.dim:
        raise ValueError(
            f"shape mismatch: ({a.n_states},{a.dim}) vs ({b.n_states},{b.dim})")


def canonical_to_moments(c: CGCanonical) -> CGMoments:
    """Normalize a proper canonical potential.

    Per-state masses are computed in log space; the normalized weights and
    the total log-mass are returned separately.
    """
    log_w, means, covs = moments_from_canonical(
        c.scales, c.shifts, c.precisions, what="state precision")
    log_mass = float(log_sum_exp(log_w))
    weights = np.exp(log_w - log_mass)
    weights /= weights.sum()
    return CGMoments(weights, means, covs, log_mass)


def moments_to_canonical(q: CGMoments) -> CGCanonical:
    """Canonical parameters whose normalization reproduces q exactly."""
    p = q.weights
    bad = np.where(~(p > WEIGHT_FLOOR))[0]
    if bad.size:
        j = int(bad[0])
        raise WeightUnderflow(
            f"state {j} weight {p[j]:.3g} is too small to take logs")
    log_w = np.log(p) + q.log_mass
    scales, shifts, precisions = canonical_from_moments(
        log_w, q.means, q.covs, what="state covariance")
    return CGCanonical(scales, shifts, precisions)


def mean_params(c: CGCanonical) -> CGMeanParams:
    """Expected sufficient statistics of the normalized potential."""
    return CGMeanParams.from_moments(canonical_to_moments(c))


def natural_params(stats: CGMeanParams) -> CGCanonical:
    """Canonical parameters matching the given mean parameters and log-mass.

    Exact inverse of mean_params; raises WeightUnderflow for vanishing
    state weights and ImproperPotential if the implied covariance of some
    state is not positive definite.
    """
    return moments_to_canonical(stats.to_moments())


def cg_collapse(log_w: np.ndarray, means: np.ndarray, covs: np.ndarray) -> CGMoments:
    """Moment-match a labeled Gaussian mixture to a single CG distribution.

    Component (j, i) has log-weight log_w[j, i], mean means[j, i] and
    covariance covs[j, i]; components sharing the state label j are
    merged:

        p_j  = sum_i w_ji
        m_j  = sum_i (w_ji / p_j) m_ji
        V_j  = sum_i (w_ji / p_j) (V_ji + (m_ji - m_j)(m_ji - m_j)')

    The spread term uses deviations from the freshly computed m_j (two-pass
    form) and the result is symmetrized.  Total mass is conserved exactly:
    the output log-mass is the log-sum of all component weights.
    """
    log_w = np.asarray(log_w, dtype=float)
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    if log_w.ndim != 2 or means.shape[:2] != log_w.shape or covs.shape[:2] != log_w.shape:
        raise ValueError("log_w, means, covs must share leading (state, component) shape")
    state_log_mass = log_sum_exp(log_w, axis=1)
    vanished = np.where(~np.isfinite(state_log_mass))[0]
    if vanished.size:
        raise StateVanished(
            f"state {int(vanished[0])} has no mass in the mixture")
    wbar = np.exp(log_w - state_log_mass[:, None])
    m = np.einsum("ji,jik->jk", wbar, means)
    dev = means - m[:, None, :]
    v = np.einsum("ji,jikl->jkl", wbar, covs) \
        + np.einsum("ji,jik,jil->jkl", wbar, dev, dev)
    total = float(log_sum_exp(state_log_mass))
    weights = np.exp(state_log_mass - total)
    weights /= weights.sum()
    return CGMoments(weights, m, symmetrize(v), log_mass=total)


def cg_kl(p: CGMoments, q: CGMoments) -> float:
    """KL divergence KL(p || q) between two conditional Gaussians.

    Decomposes over the shared state labels:

        sum_j p_j [ log(p_j / q_j)
                    + (tr(W_j^{-1} V_j) + (mu_j - m_j)'W_j^{-1}(mu_j - m_j)
                       - N + log|W_j| - log|V_j|) / 2 ]

    with (p_j, mu_j, V_j) from p and (q_j, m_j, W_j) from q.  Returns +inf
    when q assigns zero weight to a state p uses.  Tiny negative values
    from roundoff are clipped to zero.
    """
    if p.n_states != q.n_states or p.dim != q.dim:
        raise ValueError("distributions must share state count and dimension")
    n = p.dim
    total = 0.0
    for j in range(p.n_states):
        pj = float(p.weights[j])
        if pj == 0.0:
            continue
        qj = float(q.weights[j])
        if qj == 0.0:
            return float("inf")
        v = p.covs[j]
        w = q.covs[j]
        chol_w = chol_spd(w, "covariance of the second argument")
        chol_v = chol_spd(v, "covariance of the first argument")
        diff = p.means[j] - q.means[j]
        sol = np.linalg.solve(w, v)
        mahal = float(diff @ np.linalg.solve(w, diff))
        logdets = float(chol_logdet(chol_w) - chol_logdet(chol_v))
        gauss = 0.5 * (float(np.trace(sol)) + mahal - n + logdets)
        total += pj * (np.log(pj) - np.log(qj) + gauss)
    return max(total, 0.0)


def mean_param_distance(a, b) -> float:
    """Sup-norm distance between two belief states in moment coordinates.

    Accepts CGMoments or CGMeanParams; the comparison is over the
    normalized statistics vector (the log-mass is excluded).
    """
    va = _stats_vector(a)
    vb = _stats_vector(b)
    if va.size != vb.size:
        raise ValueError("mean parameter vectors have different sizes")
    return float(np.max(np.abs(va - vb)))


def _stats_vector(x) -> np.ndarray:
    if isinstance(x, CGMoments):
        x = CGMeanParams.from_moments(x)
    if isinstance(x, CGMeanParams):
        return x.as_vector()
    raise TypeError(f"expected CGMoments or CGMeanParams, got {type(x)!r}")
