"""Message-passing inference on the two-slice chain of a switching linear
dynamical system.

Messages are conditional Gaussian potentials attached to the T-1 links of
the chain.  The belief at step t is the product of the incoming forward
message, the step potential, and the incoming backward message:

    belief_t(x_{t-1}, x_t) = fwd_{t-1}(x_{t-1}) pot_t(x_{t-1}, x_t) bwd_t(x_t)

(the first step has no head slice and the last has a unit backward
message).  Updates project a belief's single-slice marginal back through
the link it came from:

    fwd_t      = project(tail marginal of belief_t)       / bwd_t
    bwd_{t-1}  = project(head marginal of belief_t)       / fwd_{t-1}

The projection collapses each switch state's mixture to one Gaussian by
moment matching and normalizes the result, so message scales stay bounded;
the division is exact canonical-parameter subtraction and may leave a
message improper, which is legal as long as every belief product stays
normalizable.  New messages can be damped toward the old ones in canonical
parameters.

Because projections are normalized, the sum over t of the belief log-masses
along one fresh, undamped forward pass estimates the log-evidence; with a
single switch state the collapse is exact and the estimate telescopes to
the true marginal likelihood regardless of the stored backward messages.

A run stops when the normalized single-slice beliefs stop changing between
sweeps, when they revisit a value from two or more sweeps earlier (a limit
cycle), when the sweep budget runs out, or when some belief product stops
being normalizable.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .cg import (CGCanonical, CGMeanParams, CGMoments, cg_collapse,
                 cg_damped_mix, cg_divide, mean_param_distance,
                 moments_to_canonical)
from .errors import ImproperPotential, ImproperTwoSlice, InferenceFailure
from .gaussian import log_sum_exp, moments_from_canonical, symmetrize, _lock
from .model import TwoSlicePotential

STATUS_CONVERGED = "converged"
STATUS_LIMIT_CYCLE = "limit_cycle"
STATUS_MAX_ITERS = "max_iters"
STATUS_IMPROPER = "improper_failure"


@dataclass(frozen=True, eq=False)
class TwoSliceMarginal:
    """Normalized belief over one step: a labeled Gaussian mixture.

    Component (i, j) covers the stacked slice vector with head state i and
    tail state j; weights sum to one and exp(log_mass) is the mass of the
    unnormalized product that produced the belief.
    """

    t: int
    head_dim: int
    weights: np.ndarray  # (Mh, Mt)
    means: np.ndarray    # (Mh, Mt, d)
    covs: np.ndarray     # (Mh, Mt, d, d)
    log_mass: float

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float)
        means = np.array(self.means, dtype=float)
        covs = np.array(self.covs, dtype=float)
        if weights.ndim != 2:
            raise ValueError("weights must be (head states, tail states)")
        d = means.shape[-1]
        if means.shape != weights.shape + (d,) or covs.shape != weights.shape + (d, d):
            raise ValueError("inconsistent belief component shapes")
        if np.any(weights < 0.0):
            raise ValueError("belief weights must be nonnegative")
        if abs(float(weights.sum()) - 1.0) > 1e-10:
            raise ValueError(f"belief weights sum to {weights.sum()!r}, expected 1")
        object.__setattr__(self, "t", int(self.t))
        object.__setattr__(self, "head_dim", int(self.head_dim))
        object.__setattr__(self, "weights", _lock(weights))
        object.__setattr__(self, "means", _lock(means))
        object.__setattr__(self, "covs", _lock(symmetrize(covs)))
        object.__setattr__(self, "log_mass", float(self.log_mass))

    @property
    def n_head(self) -> int:
        return self.weights.shape[0]

    @property
    def n_tail(self) -> int:
        return self.weights.shape[1]

    @property
    def joint_dim(self) -> int:
        return self.means.shape[-1]

    @property
    def tail_dim(self) -> int:
        return self.joint_dim - self.head_dim


def two_slice_marginal(fwd_prev: CGCanonical | None, pot: TwoSlicePotential,
                       bwd: CGCanonical) -> TwoSliceMarginal:
    """Normalize fwd_prev * pot * bwd into a labeled Gaussian mixture.

    Raises ImproperTwoSlice naming the step and switch pair if any
    component of the product has a non-positive-definite precision.
    """
    mh, mt = pot.scales.shape
    hd = pot.head_dim
    d = pot.joint_dim
    if (fwd_prev is None) != (hd == 0):
        raise ValueError("a forward input is required exactly when the "
                         "potential has a head slice")
    if bwd.n_states != mt or bwd.dim != d - hd:
        raise ValueError("backward message does not match the tail slice")

    scales = pot.scales + bwd.scales[None, :]
    shifts = np.array(np.broadcast_to(pot.shifts, (mh, mt, d)))
    precisions = np.array(np.broadcast_to(pot.precisions, (mh, mt, d, d)))
    shifts[:, :, hd:] += bwd.shifts[None, :, :]
    precisions[:, :, hd:, hd:] += bwd.precisions[None, :, :, :]
    if fwd_prev is not None:
        if fwd_prev.n_states != mh or fwd_prev.dim != hd:
            raise ValueError("forward message does not match the head slice")
        scales = scales + fwd_prev.scales[:, None]
        shifts[:, :, :hd] += fwd_prev.shifts[:, None, :]
        precisions[:, :, :hd, :hd] += fwd_prev.precisions[:, None, :, :]

    try:
        log_w, means, covs = moments_from_canonical(
            scales, shifts, precisions, what="belief precision")
    except ImproperPotential as exc:
        i, j = exc.index if exc.index is not None else (None, None)
        raise ImproperTwoSlice(
            f"belief at step {pot.t} is not normalizable for switch pair "
            f"({i}, {j}): {exc}", t=pot.t, head_state=i, tail_state=j,
            smallest_eigenvalue=exc.smallest_eigenvalue) from None
    log_mass = float(log_sum_exp(log_w))
    if not np.isfinite(log_mass):
        raise ImproperTwoSlice(
            f"belief at step {pot.t} has no finite mass", t=pot.t)
    weights = np.exp(log_w - log_mass)
    weights /= weights.sum()
    return TwoSliceMarginal(pot.t, hd, weights, means, covs, log_mass)


def _component_log_weights(bel: TwoSliceMarginal) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(bel.weights) + bel.log_mass


def collapse_tail(bel: TwoSliceMarginal) -> CGMoments:
    """Marginal over the tail slice, labeled by the tail switch state.

    Mixture components sharing a tail state are moment-matched into one
    Gaussian; the belief's mass is conserved in the result's log-mass.
    """
    hd = bel.head_dim
    log_w = _component_log_weights(bel).T
    means = np.swapaxes(bel.means[:, :, hd:], 0, 1)
    covs = np.swapaxes(bel.covs[:, :, hd:, hd:], 0, 1)
    return cg_collapse(log_w, means, covs)


def collapse_head(bel: TwoSliceMarginal) -> CGMoments:
    """Marginal over the head slice, labeled by the head switch state."""
    hd = bel.head_dim
    if hd == 0:
        raise ValueError(f"belief at step {bel.t} has no head slice")
    return cg_collapse(_component_log_weights(bel), bel.means[:, :, :hd],
                       bel.covs[:, :, :hd, :hd])


def _normalized_canonical(q: CGMoments) -> CGCanonical:
    """Canonical form of q with the total mass divided out."""
    c = moments_to_canonical(q)
    return CGCanonical(c.scales - q.log_mass, c.shifts, c.precisions)


def _tail_zero(pot: TwoSlicePotential) -> CGCanonical:
    return CGCanonical.zero(pot.scales.shape[1], pot.tail_dim)


def forward_update(bel: TwoSliceMarginal, bwd: CGCanonical) -> CGCanonical:
    """Undamped new forward message out of a belief.

    The tail marginal is collapsed, normalized, and divided by the backward
    message that entered the belief.
    """
    return cg_divide(_normalized_canonical(collapse_tail(bel)), bwd)


def backward_update(bel: TwoSliceMarginal, fwd_prev: CGCanonical) -> CGCanonical:
    """Undamped new backward message out of a belief (mirror of forward)."""
    return cg_divide(_normalized_canonical(collapse_head(bel)), fwd_prev)


def _forward_half(fwd, bwd, pots, eps):
    """Forward half-sweep.

    Returns (updated forward messages, per-step tail collapses as computed
    during the pass, sum of belief log-masses).
    """
    horizon = len(pots)
    new_fwd = list(fwd)
    collapsed = []
    logz = 0.0
    for t in range(1, horizon + 1):
        pot = pots[t - 1]
        fwd_in = new_fwd[t - 2] if t >= 2 else None
        bwd_in = bwd[t - 1] if t <= horizon - 1 else _tail_zero(pot)
        bel = two_slice_marginal(fwd_in, pot, bwd_in)
        logz += bel.log_mass
        q = collapse_tail(bel)
        collapsed.append(q)
        if t <= horizon - 1:
            target = cg_divide(_normalized_canonical(q), bwd[t - 1])
            new_fwd[t - 1] = cg_damped_mix(new_fwd[t - 1], target, eps)
    return new_fwd, collapsed, logz


def _backward_half(fwd, bwd, pots, eps):
    """Backward half-sweep.

    Returns (updated backward messages, single-slice marginals for slices
    1..T as computed during the pass, sum of belief log-masses).
    """
    horizon = len(pots)
    new_bwd = list(bwd)
    snapshot: list[CGMoments | None] = [None] * horizon
    logz = 0.0
    for t in range(horizon, 1, -1):
        pot = pots[t - 1]
        bwd_in = new_bwd[t - 1] if t <= horizon - 1 else _tail_zero(pot)
        bel = two_slice_marginal(fwd[t - 2], pot, bwd_in)
        logz += bel.log_mass
        if t == horizon:
            snapshot[horizon - 1] = collapse_tail(bel)
        q = collapse_head(bel)
        snapshot[t - 2] = q
        target = cg_divide(_normalized_canonical(q), fwd[t - 2])
        new_bwd[t - 2] = cg_damped_mix(new_bwd[t - 2], target, eps)
    if horizon == 1:
        bel = two_slice_marginal(None, pots[0], _tail_zero(pots[0]))
        snapshot[0] = collapse_tail(bel)
        logz = bel.log_mass
    return new_bwd, snapshot, logz


def ep_sweep(fwd, bwd, pots, eps):
    """One full iteration: forward half-sweep then backward half-sweep.

    Messages move toward their undamped targets by a factor eps in
    canonical parameters; eps = 0 leaves the state unchanged and eps = 1 is
    the plain update.  Returns (new forward messages, new backward
    messages, single-slice marginals from the backward half, sum of belief
    log-masses along the forward half).
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"damping must be in [0, 1], got {eps}")
    new_fwd, _, logz = _forward_half(fwd, bwd, pots, eps)
    new_bwd, snapshot, _ = _backward_half(new_fwd, bwd, pots, eps)
    return new_fwd, new_bwd, snapshot, logz


def ep_marginals(fwd, bwd, pots) -> list[TwoSliceMarginal]:
    """All step beliefs implied by a fixed set of messages."""
    horizon = len(pots)
    out = []
    for t in range(1, horizon + 1):
        pot = pots[t - 1]
        fwd_in = fwd[t - 2] if t >= 2 else None
        bwd_in = bwd[t - 1] if t <= horizon - 1 else _tail_zero(pot)
        out.append(two_slice_marginal(fwd_in, pot, bwd_in))
    return out


def gpb2_filter(pots):
    """Collapse-after-every-step forward filtering.

    Identical code path to the first undamped forward half-sweep from zero
    messages: each step forms the mixture over switch pairs, moment-matches
    per current state, and carries the result forward.  Returns the list of
    filtered single-slice marginals and the evidence estimate.
    """
    horizon = len(pots)
    m = pots[0].scales.shape[1]
    zeros_f = [CGCanonical.zero(m, pots[t].head_dim) for t in range(1, horizon)]
    zeros_b = [CGCanonical.zero(m, pots[t - 1].tail_dim) for t in range(1, horizon)]
    _, collapsed, logz = _forward_half(zeros_f, zeros_b, pots, 1.0)
    return collapsed, logz


def log_likelihood_estimate(bwd, pots) -> float:
    """Evidence estimate from one fresh undamped forward pass.

    The stored backward messages stay fixed; forward messages are rebuilt
    from nothing.  Exact for a single switch state.
    """
    horizon = len(pots)
    zeros = [CGCanonical.zero(pots[t].scales.shape[0], pots[t].head_dim)
             for t in range(1, horizon)]
    _, _, logz = _forward_half(zeros, bwd, pots, 1.0)
    return logz


def constraint_residual(fwd, bwd, pots, link_beliefs=None) -> float:
    """Largest disagreement between the two collapses at any link.

    At a message fixed point, the tail collapse of belief t and the head
    collapse of belief t+1 describe the same slice and must agree; the
    returned sup-norm gap over normalized mean parameters measures how far
    the current messages are from that.  If ``link_beliefs`` is given (one
    distribution per link), their gaps to both collapses are included.
    """
    marginals = ep_marginals(fwd, bwd, pots)
    residual = 0.0
    for t in range(len(pots) - 1):
        left = collapse_tail(marginals[t])
        right = collapse_head(marginals[t + 1])
        residual = max(residual, mean_param_distance(left, right))
        if link_beliefs is not None:
            residual = max(residual,
                           mean_param_distance(left, link_beliefs[t]),
                           mean_param_distance(right, link_beliefs[t]))
    return residual


@dataclass
class EPConfig:
    """Knobs for a message-passing run.

    damping: step size toward the new message in canonical parameters
        (1 = undamped).
    tol: sup-norm threshold on the change of normalized single-slice
        belief statistics between sweeps.
    cycle_window: how many past sweeps are scanned for a revisited belief
        state (limit-cycle detection, lags 2..cycle_window).
    """

    damping: float = 1.0
    max_iters: int = 200
    tol: float = 1e-8
    cycle_window: int = 16

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must be in (0, 1], got {self.damping}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.tol <= 0.0:
            raise ValueError("tol must be positive")
        if self.cycle_window < 2:
            raise ValueError("cycle_window must be at least 2")


@dataclass
class EPRunRecord:
    """Everything a run produced.

    status is one of converged / limit_cycle / max_iters /
    improper_failure; period is the revisit lag for a limit cycle.  beliefs
    and marginals are the single- and two-slice marginals under the final
    messages; first_forward holds the filtered marginals of the very first
    forward half-sweep (the collapse-after-every-step filter when damping
    is 1).  log_likelihood comes from a fresh undamped forward pass against
    the final backward messages.  belief_history / message_history hold the
    per-sweep snapshots.
    """

    status: str
    n_iterations: int
    period: int | None = None
    detail: str | None = None
    log_likelihood: float | None = None
    beliefs: list[CGMoments] | None = None
    marginals: list[TwoSliceMarginal] | None = None
    fwd: list[CGCanonical] | None = None
    bwd: list[CGCanonical] | None = None
    first_forward: list[CGMoments] | None = None
    first_forward_logz: float | None = None
    max_changes: list[float] = field(default_factory=list)
    belief_history: list[list[CGMoments]] = field(default_factory=list)
    message_history: list[tuple[list[CGCanonical], list[CGCanonical]]] = \
        field(default_factory=list)


def _snapshot_matrix(snapshot) -> np.ndarray:
    return np.stack([CGMeanParams.from_moments(q).as_vector() for q in snapshot])


def run_ep(pots: list[TwoSlicePotential], config: EPConfig | None = None) -> EPRunRecord:
    """Run damped sweeps until the beliefs settle, cycle, or fail.

    One iteration is a forward half-sweep followed by a backward
    half-sweep.  Convergence and cycling are judged on the normalized
    single-slice belief statistics collected during the backward half.
    """
    if config is None:
        config = EPConfig()
    horizon = len(pots)
    if horizon < 1:
        raise ValueError("need at least one step potential")
    m = pots[0].scales.shape[1]
    fwd = [CGCanonical.zero(m, pots[t].head_dim) for t in range(1, horizon)]
    bwd = [CGCanonical.zero(m, pots[t - 1].tail_dim) for t in range(1, horizon)]

    record = EPRunRecord(status=STATUS_MAX_ITERS, n_iterations=0)
    history: deque[np.ndarray] = deque(maxlen=config.cycle_window)
    prev_matrix = None

    for sweep in range(1, config.max_iters + 1):
        try:
            new_fwd, filtered, logz_fwd = _forward_half(
                fwd, bwd, pots, config.damping)
            if sweep == 1:
                record.first_forward = filtered
                record.first_forward_logz = logz_fwd
            new_bwd, snapshot, _ = _backward_half(
                new_fwd, bwd, pots, config.damping)
        except InferenceFailure as exc:
            record.status = STATUS_IMPROPER
            record.detail = f"{type(exc).__name__}: {exc}"
            record.n_iterations = sweep - 1
            break
        fwd, bwd = new_fwd, new_bwd
        record.n_iterations = sweep
        record.belief_history.append(snapshot)
        record.message_history.append((list(fwd), list(bwd)))

        matrix = _snapshot_matrix(snapshot)
        stop = False
        if prev_matrix is not None:
            change = float(np.max(np.abs(matrix - prev_matrix)))
            record.max_changes.append(change)
            if change < config.tol:
                record.status = STATUS_CONVERGED
                stop = True
            else:
                for lag in range(2, len(history) + 1):
                    gap = float(np.max(np.abs(matrix - history[-lag])))
                    if gap < config.tol:
                        record.status = STATUS_LIMIT_CYCLE
                        record.period = lag
                        stop = True
                        break
        history.append(matrix)
        prev_matrix = matrix
        if stop:
            break

    record.fwd = list(fwd)
    record.bwd = list(bwd)
    try:
        record.marginals = ep_marginals(fwd, bwd, pots)
        record.beliefs = [collapse_tail(bel) for bel in record.marginals]
        record.log_likelihood = log_likelihood_estimate(bwd, pots)
    except InferenceFailure as exc:
        if record.status != STATUS_IMPROPER:
            record.status = STATUS_IMPROPER
            record.detail = f"{type(exc).__name__}: {exc}"
    return record
