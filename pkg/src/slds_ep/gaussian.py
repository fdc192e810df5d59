"""Exact algebra on (possibly unnormalizable) Gaussian potentials.

Canonical form used throughout the package:

    psi(z) = exp(g + h'z - z'Kz / 2)

with log-scale g, shift vector h (length n) and symmetric precision matrix
K (n x n).  K is symmetrized on construction and may be indefinite:
messages exchanged during approximate inference are ratios of proper
distributions and need not be normalizable themselves.  Only conversion to
moment form requires K to be positive definite, and that conversion fails
loudly rather than regularizing.

Moment form carries an explicit log_weight = log of the total mass

    integral psi(z) dz = exp(g + h'K^{-1}h / 2) (2 pi)^{n/2} |K|^{-1/2},

so normalization constants survive every operation and data likelihoods
can be read off the algebra instead of being tracked on the side.

The batched helpers accept arrays with arbitrary leading dimensions and
form the single numeric core; the dataclass operations wrap them with
batch shape ().  Positive definiteness is always decided by a Cholesky
factorization attempt; eigenvalues are computed only to build error
messages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ImproperPotential

LOG_2PI = math.log(2.0 * math.pi)


def symmetrize(mat: np.ndarray) -> np.ndarray:
    """Return (A + A') / 2 over the trailing two axes."""
    return 0.5 * (mat + np.swapaxes(mat, -1, -2))


def log_sum_exp(a: np.ndarray, axis: int | None = None):
    """Stable log(sum(exp(a))), scalar for axis=None, else reduced array.

    Equivalent to the scipy routine for dense float input, but without
    its dispatch overhead, which dominates on the tiny per-state arrays
    used throughout.  All-(-inf) slices reduce to -inf without warnings.
    """
    a = np.asarray(a, dtype=float)
    hi = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(hi), hi, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - safe), axis=axis, keepdims=True)) + safe
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def _lock(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def chol_spd(mats: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Batched Cholesky factor of symmetric positive definite matrices.

    Raises ImproperPotential naming the offending batch index and its
    smallest eigenvalue if any block fails to factorize.
    """
    mats = np.asarray(mats, dtype=float)
    if not np.all(np.isfinite(mats)):
        raise ImproperPotential(f"{what} contains non-finite entries")
    try:
        return np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        flat = mats.reshape((-1,) + mats.shape[-2:])
        for k in range(flat.shape[0]):
            try:
                np.linalg.cholesky(flat[k])
            except np.linalg.LinAlgError:
                eig = float(np.linalg.eigvalsh(flat[k])[0])
                if mats.ndim > 2:
                    idx = tuple(int(i) for i in np.unravel_index(k, mats.shape[:-2]))
                    where = f" at index {idx}"
                else:
                    idx = None
                    where = ""
                raise ImproperPotential(
                    f"{what} is not positive definite{where}: "
                    f"smallest eigenvalue {eig:.6g}",
                    smallest_eigenvalue=eig, index=idx) from None
        raise


def chol_logdet(chol: np.ndarray) -> np.ndarray:
    """log |A| from a Cholesky factor of A, batched."""
    diag = np.diagonal(chol, axis1=-2, axis2=-1)
    return 2.0 * np.sum(np.log(diag), axis=-1)


def moments_from_canonical(scales, shifts, precisions, what: str = "precision"):
    """Convert (g, h, K) to (log_weight, mean, covariance), batched.

    mean = K^{-1} h,  cov = K^{-1},
    log_weight = g + h'K^{-1}h/2 + (n log 2pi - log|K|) / 2.
    """
    scales = np.asarray(scales, dtype=float)
    shifts = np.asarray(shifts, dtype=float)
    precisions = np.asarray(precisions, dtype=float)
    n = shifts.shape[-1]
    chol = chol_spd(precisions, what)
    logdet = chol_logdet(chol)
    means = np.linalg.solve(precisions, shifts[..., None])[..., 0]
    covs = symmetrize(np.linalg.inv(precisions))
    quad = np.sum(shifts * means, axis=-1)
    log_w = scales + 0.5 * quad + 0.5 * (n * LOG_2PI - logdet)
    return log_w, means, covs


def canonical_from_moments(log_weights, means, covs, what: str = "covariance"):
    """Convert (log_weight, mean, covariance) to (g, h, K), batched.

    Exact inverse of moments_from_canonical up to linear-solve roundoff.
    """
    log_weights = np.asarray(log_weights, dtype=float)
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    n = means.shape[-1]
    chol = chol_spd(covs, what)
    logdet = chol_logdet(chol)
    precisions = symmetrize(np.linalg.inv(covs))
    shifts = np.linalg.solve(covs, means[..., None])[..., 0]
    quad = np.sum(means * shifts, axis=-1)
    scales = log_weights - 0.5 * quad - 0.5 * (n * LOG_2PI + logdet)
    return scales, shifts, precisions


@dataclass(frozen=True, eq=False)
class GaussCanonical:
    """Gaussian potential exp(g + h'z - z'Kz/2); K may be indefinite."""

    scale: float
    shift: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        shift = np.array(self.shift, dtype=float).reshape(-1)
        precision = np.array(self.precision, dtype=float)
        if precision.shape != (shift.size, shift.size):
            raise ValueError(
                f"precision shape {precision.shape} does not match "
                f"shift of length {shift.size}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "shift", _lock(shift))
        object.__setattr__(self, "precision", _lock(symmetrize(precision)))

    @property
    def dim(self) -> int:
        return self.shift.size

    @classmethod
    def zero(cls, n: int) -> "GaussCanonical":
        """The unit potential psi(z) = 1."""
        return cls(0.0, np.zeros(n), np.zeros((n, n)))


@dataclass(frozen=True, eq=False)
class GaussMoments:
    """Normalizable Gaussian potential as (log total mass, mean, covariance)."""

    log_weight: float
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.covariance, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"covariance shape {cov.shape} does not match "
                f"mean of length {mean.size}")
        cov = symmetrize(cov)
        chol_spd(cov, "covariance")
        object.__setattr__(self, "log_weight", float(self.log_weight))
        object.__setattr__(self, "mean", _lock(mean))
        object.__setattr__(self, "covariance", _lock(cov))

    @property
    def dim(self) -> int:
        return self.mean.size


def gauss_combine(a: GaussCanonical, b: GaussCanonical, sign: int = 1) -> GaussCanonical:
    """Multiply (sign=+1) or divide (sign=-1) two potentials.

    In canonical coordinates this is plain parameter addition/subtraction,
    so the result is exact and may be improper.
    """
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return GaussCanonical(a.scale + sign * b.scale,
                          a.shift + sign * b.shift,
                          a.precision + sign * b.precision)


def gauss_to_moments(p: GaussCanonical) -> GaussMoments:
    """Moment form of a proper potential; raises ImproperPotential otherwise."""
    log_w, mean, cov = moments_from_canonical(p.scale, p.shift, p.precision)
    return GaussMoments(float(log_w), mean, cov)


def gauss_to_canonical(p: GaussMoments) -> GaussCanonical:
    """Canonical form of a moment-parameterized potential."""
    scale, shift, precision = canonical_from_moments(
        p.log_weight, p.mean, p.covariance)
    return GaussCanonical(float(scale), shift, precision)


def gauss_marginalize(p: GaussCanonical, keep: Sequence[int]) -> GaussCanonical:
    """Integrate out all coordinates not listed in ``keep``.

    With z = (u, v), u kept and v integrated, the marginal of
    exp(g + h'z - z'Kz/2) over v is the potential with

        K' = K_uu - K_uv K_vv^{-1} K_vu
        h' = h_u - K_uv K_vv^{-1} h_v
        g' = g + h_v'K_vv^{-1}h_v/2 + (n_v log 2pi - log|K_vv|) / 2,

    which requires the dropped block K_vv to be positive definite (the
    integral diverges otherwise).  Total mass is conserved exactly.
    """
    keep = list(keep)
    n = p.dim
    if len(set(keep)) != len(keep):
        raise ValueError("keep indices must be distinct")
    if any(i < 0 or i >= n for i in keep):
        raise ValueError(f"keep indices out of range for dimension {n}")
    drop = [i for i in range(n) if i not in keep]
    if not drop:
        return GaussCanonical(p.scale, p.shift[keep], p.precision[np.ix_(keep, keep)])
    k_vv = p.precision[np.ix_(drop, drop)]
    chol = chol_spd(k_vv, "integrated-out precision block")
    logdet = float(chol_logdet(chol))
    h_v = p.shift[drop]
    sol = np.linalg.solve(k_vv, h_v)
    g_out = p.scale + 0.5 * float(h_v @ sol) \
        + 0.5 * (len(drop) * LOG_2PI - logdet)
    if not keep:
        return GaussCanonical(g_out, np.zeros(0), np.zeros((0, 0)))
    k_uv = p.precision[np.ix_(keep, drop)]
    cross = np.linalg.solve(k_vv, k_uv.T).T
    k_out = p.precision[np.ix_(keep, keep)] - cross @ k_uv.T
    h_out = p.shift[keep] - cross @ h_v
    return GaussCanonical(g_out, h_out, k_out)
