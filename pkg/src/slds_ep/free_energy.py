"""Free-energy view of chain message passing: the Bethe objective whose
stationary points are the message-passing fixed points, a split of that
objective into a belief-normalizer part and a concave dual part, a
double-loop minimizer with a monotone-descent guarantee, and numerical
saddle/Hessian diagnostics.

Parameterization.  Each of the T-1 links carries a combined potential
(the canonical parameters of the link belief) and a difference potential
(the dual variable).  Messages are reconstructed linearly:

    forward  = (combined + difference) / 2
    backward = (combined - difference) / 2

Objective split.  With step beliefs formed from these messages,

    normalizer_term = sum over links of log(total mass of exp(combined))
    dual_term       = -sum over steps of log Z_t,

where Z_t is the mass of the unnormalized step product.  At any point
where the link beliefs match the step-belief collapses, the Bethe value
equals normalizer_term + dual_term.  The dual term is concave in the
difference variables (each -log Z_t is a negative log-partition), so the
inner loop maximizes it by damped fixed-point steps with a monotone line
search; the outer loop re-centers each combined potential on the average
of the two neighboring collapses, which provably never increases the
reported Bethe value.

Reported free energy.  After each outer iteration the Bethe objective is
evaluated at the current step beliefs paired with the freshly projected
link beliefs; this sequence is the one with the descent guarantee.

Flat directions.  Adding a constant to every per-state scale of a link's
combined (or difference) potential changes nothing observable; the
Hessian diagnostics therefore work in a reduced chart whose scale
directions are contrasts orthogonal to that constant shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cg import (CGCanonical, CGMeanParams, CGMoments, canonical_to_moments,
                 mean_param_distance, moments_to_canonical)
from .ep import (EPConfig, TwoSliceMarginal, _forward_half, collapse_head,
                 collapse_tail, constraint_residual, ep_marginals, run_ep)
from .ep import STATUS_CONVERGED as EP_CONVERGED
from .errors import (ImproperTwoSlice, InferenceFailure, InnerStall,
                     OuterProjectionFailure)
from .gaussian import (LOG_2PI, canonical_from_moments, chol_logdet,
                       chol_spd, symmetrize)
from .model import TwoSlicePotential

STATUS_CONVERGED = "converged"
STATUS_MAX_ITERS = "max_iters"
STATUS_STALLED = "stalled"


@dataclass(frozen=True, eq=False)
class SaddleState:
    """Per-link combined and difference potentials.

    The messages are exact linear reconstructions; combined = forward +
    backward and difference = forward - backward round-trip without loss.
    """

    combined: tuple[CGCanonical, ...]
    difference: tuple[CGCanonical, ...]

    def __post_init__(self):
        combined = tuple(self.combined)
        difference = tuple(self.difference)
        if len(combined) != len(difference):
            raise ValueError("combined and difference must have equal length")
        for c, d in zip(combined, difference):
            if c.n_states != d.n_states or c.dim != d.dim:
                raise ValueError("combined/difference shape mismatch")
        object.__setattr__(self, "combined", combined)
        object.__setattr__(self, "difference", difference)

    @property
    def n_links(self) -> int:
        return len(self.combined)

    def forward(self) -> list[CGCanonical]:
        return [_half_sum(c, d, 1.0) for c, d in zip(self.combined, self.difference)]

    def backward(self) -> list[CGCanonical]:
        return [_half_sum(c, d, -1.0) for c, d in zip(self.combined, self.difference)]

    @classmethod
    def zeros(cls, n_links: int, n_states: int, dim: int) -> "SaddleState":
        z = tuple(CGCanonical.zero(n_states, dim) for _ in range(n_links))
        return cls(z, tuple(CGCanonical.zero(n_states, dim) for _ in range(n_links)))


def _half_sum(a: CGCanonical, b: CGCanonical, sign: float) -> CGCanonical:
    return CGCanonical(0.5 * (a.scales + sign * b.scales),
                       0.5 * (a.shifts + sign * b.shifts),
                       0.5 * (a.precisions + sign * b.precisions))


def _shifted(base: CGCanonical, direction: CGCanonical, step: float) -> CGCanonical:
    return CGCanonical(base.scales + step * direction.scales,
                       base.shifts + step * direction.shifts,
                       base.precisions + step * direction.precisions)


def saddle_from_messages(fwd, bwd) -> SaddleState:
    """Combined/difference coordinates of a set of chain messages."""
    combined = tuple(CGCanonical(f.scales + b.scales, f.shifts + b.shifts,
                                 f.precisions + b.precisions)
                     for f, b in zip(fwd, bwd))
    difference = tuple(CGCanonical(f.scales - b.scales, f.shifts - b.shifts,
                                   f.precisions - b.precisions)
                       for f, b in zip(fwd, bwd))
    return SaddleState(combined, difference)


def _dual_eval(state: SaddleState, pots):
    """Step beliefs and the dual term, or (None, -inf) outside the domain."""
    try:
        marginals = ep_marginals(state.forward(), state.backward(), pots)
    except ImproperTwoSlice:
        return None, float("-inf")
    return marginals, -sum(m.log_mass for m in marginals)


def dual_objective(state: SaddleState, pots) -> float:
    """-sum of step log-masses; -inf when some step product is improper."""
    return _dual_eval(state, pots)[1]


def belief_normalizer_sum(gammas) -> float:
    """Sum over links of the log total mass of exp(combined potential)."""
    return float(sum(canonical_to_moments(g).log_mass for g in gammas))


def _link_collapses(marginals):
    """Per link: (tail collapse of belief t, head collapse of belief t+1)."""
    return [(collapse_tail(marginals[t]), collapse_head(marginals[t + 1]))
            for t in range(len(marginals) - 1)]


def dual_gradient(state: SaddleState, pots) -> list[CGCanonical]:
    """Gradient of the dual term in the difference variables.

    Expressed in storage coordinates (per-state scale, shift, precision
    entries): the scale and shift components are half the gap between the
    two neighboring collapses' expected statistics, the precision component
    is minus a quarter of the second-moment gap (the quadratic form enters
    the exponent with a factor -1/2).  Matches central finite differences
    of dual_objective.
    """
    marginals, f1 = _dual_eval(state, pots)
    if marginals is None:
        raise ImproperTwoSlice("dual gradient requested outside the domain")
    grads = []
    for qf, qb in _link_collapses(marginals):
        sf = CGMeanParams.from_moments(qf)
        sb = CGMeanParams.from_moments(qb)
        grads.append(CGCanonical(0.5 * (sf.mass - sb.mass),
                                 0.5 * (sf.first - sb.first),
                                 -0.25 * (sf.second - sb.second)))
    return grads


def _sup_norm(blocks) -> float:
    if not blocks:
        return 0.0
    return max(float(np.max(np.abs(b.flatten()))) for b in blocks)


@dataclass
class DoubleLoopConfig:
    """Knobs for the double-loop minimizer.

    outer_tol: sup-norm threshold on the change of projected link-belief
        statistics between outer iterations.
    inner_tol: sup-norm threshold on the dual gradient.
    inner_step_floor: smallest accepted inner step; needing less raises
        InnerStall.
    stall_window: accepted inner steps without a new gradient low-water
        mark before the inner loop settles for its best iterate (the
        gradient cannot be driven below the floating-point resolution of
        the underlying statistics, so waiting longer is wasted work).
    floor_resid_tol: residual level at which an uptick in the reported
        objective is taken as the evaluation floor and the run stops as
        converged; at a larger residual the uptick instead triggers a
        damped replay of the previous re-centering.
    """

    outer_tol: float = 1e-8
    inner_tol: float = 1e-12
    max_outer: int = 500
    max_inner: int = 4000
    inner_step_floor: float = 1e-4
    step_grow: float = 1.5
    stall_window: int = 12
    rescue_tol: float = 1e-6
    floor_resid_tol: float = 1e-6

    def __post_init__(self):
        if min(self.outer_tol, self.inner_tol, self.inner_step_floor) <= 0:
            raise ValueError("tolerances and the step floor must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration budgets must be at least 1")
        if self.step_grow < 1.0:
            raise ValueError("step_grow must be at least 1")
        if self.stall_window < 1:
            raise ValueError("stall_window must be at least 1")
        if self.rescue_tol <= 0:
            raise ValueError("rescue_tol must be positive")
        if self.floor_resid_tol <= 0:
            raise ValueError("floor_resid_tol must be positive")


@dataclass
class InnerResult:
    """Outcome of one inner maximization of the dual term.

    stop records what ended the run: "tolerance" (gradient below the
    target), "budget" (evaluation cap), "floor" (line search bottomed out),
    or "stall" (neither the value nor the gradient improved for a full
    window).
    """

    state: SaddleState
    marginals: list[TwoSliceMarginal]
    value: float
    trace: list[float]
    n_steps: int
    grad_norm: float
    min_step: float
    stop: str = "tolerance"


# Relative collapse weight below which a switch state is numerically dead.
# Such a state contributes less than ~4e-15 to any reported quantity —
# below every tolerance in use — while its canonical parameters carry
# log-weights that swing by O(1) under tiny moves; treating it as a live
# coordinate only destabilizes the line search.
DEAD_STATE_TOL = 1e-16

# A switch state this light can still matter to the objective, but its
# collapse geometry rests on a sliver of the mixture and can jump O(1)
# between outer iterations, leaving the warm difference incompatible with
# the re-centered combined parameters.  When that happens, only these
# states' difference entries are reset (an even message split), keeping the
# dual value carried by the heavy states.
SHAKY_STATE_TOL = 1e-6


def _collapse_gaps(marginals):
    """Per-link dual gradient and update direction at the current beliefs.

    States whose collapse weight is negligible on both sides of a link are
    frozen: gradient and direction entries are zeroed, so the inner loop
    neither moves them nor stops on their account.
    """
    grads = []
    directions = []
    for qf, qb in _link_collapses(marginals):
        sf = CGMeanParams.from_moments(qf)
        sb = CGMeanParams.from_moments(qb)
        live = np.maximum(qf.weights, qb.weights) > DEAD_STATE_TOL
        grads.append(CGCanonical(
            np.where(live, 0.5 * (sf.mass - sb.mass), 0.0),
            np.where(live[:, None], 0.5 * (sf.first - sb.first), 0.0),
            np.where(live[:, None, None],
                     -0.25 * (sf.second - sb.second), 0.0)))
        d_scales = np.zeros(qf.n_states)
        d_shifts = np.zeros((qf.n_states, qf.dim))
        d_precisions = np.zeros((qf.n_states, qf.dim, qf.dim))
        idx = np.flatnonzero(live)
        gf, hf, kf = canonical_from_moments(
            np.log(qf.weights[idx]), qf.means[idx], qf.covs[idx],
            what="collapsed covariance")
        gb, hb, kb = canonical_from_moments(
            np.log(qb.weights[idx]), qb.means[idx], qb.covs[idx],
            what="collapsed covariance")
        d_scales[idx] = gf - gb
        d_shifts[idx] = hf - hb
        d_precisions[idx] = kf - kb
        directions.append(CGCanonical(d_scales, d_shifts, d_precisions))
    return _sup_norm(grads), directions


def _gaps_or_none(marginals):
    """Gradient/direction pair, or None when the point is unusable.

    A point is unusable when a step product is not normalizable (marginals
    are None) or when a collapse cannot be carried back to canonical form —
    a switch state's collapsed mass underflowing, or a collapsed covariance
    losing positive definiteness to rounding.
    """
    if marginals is None:
        return None
    try:
        return _collapse_gaps(marginals)
    except InferenceFailure:
        return None


def inner_loop(state: SaddleState, pots,
               config: DoubleLoopConfig | None = None) -> InnerResult:
    """Maximize the dual term over the difference variables, combined fixed.

    The update direction at each link is the canonical-parameter gap
    between the two neighboring collapses (normalized); pairing it against
    the expected-statistics gap of the same two collapses shows it is
    always an ascent direction, by monotonicity of the log-partition
    gradient.

    Two phases.  While the dual value is still improving, a trial step is
    accepted iff the value does not decrease (up to the floating-point
    resolution of the objective), halved otherwise; accepted values are
    therefore nondecreasing.  Once value gains saturate — near the optimum
    a step's true gain is quadratic in the gradient and drops below what
    the objective can resolve long before the gradient itself bottoms out —
    acceptance switches to the gradient sup-norm, which stays readable down
    to the resolution of the underlying statistics; the same direction then
    contracts the collapse gap several more decades.  Returns the iterate
    with the smallest gradient seen.  Stops at the gradient tolerance, the
    evaluation budget, or when neither signal improves for a full window.
    """
    cfg = config or DoubleLoopConfig()
    marginals, value = _dual_eval(state, pots)
    gaps = _gaps_or_none(marginals)
    if gaps is None:
        raise ImproperTwoSlice("inner loop started outside the domain")
    grad_norm, directions = gaps
    delta = list(state.difference)
    trace = [value]
    n_steps = 0
    min_step = 1.0
    best = (grad_norm, delta, marginals, value)

    def propose(step):
        nonlocal n_steps
        n_steps += 1
        candidate = tuple(_shifted(d, direction, step)
                          for d, direction in zip(delta, directions))
        return candidate, *_dual_eval(SaddleState(state.combined, candidate),
                                      pots)

    def try_move(t, direction, step_t) -> bool:
        # A single-link move, accepted only on a real value gain.
        nonlocal delta, marginals, value, grad_norm, directions, n_steps
        n_steps += 1
        candidate = list(delta)
        candidate[t] = _shifted(delta[t], direction, step_t)
        cand_marginals, cand_value = _dual_eval(
            SaddleState(state.combined, tuple(candidate)), pots)
        noise = 64.0 * np.finfo(float).eps * max(1.0, abs(value))
        gaps = None
        if cand_value > value + noise:
            gaps = _gaps_or_none(cand_marginals)
        if gaps is None:
            return False
        delta = candidate
        marginals = cand_marginals
        value = cand_value
        grad_norm, directions = gaps
        trace.append(value)
        return True

    def link_pass() -> bool:
        # One link at a time: after a warm-start reset, the link that was
        # reset needs steps orders of magnitude smaller than the rest of
        # the chain, and the joint line search crawls at the smallest
        # common step.  A per-link move is still an ascent direction (the
        # direction/gradient pairing is a sum of per-link terms, each
        # nonnegative on its own), so each link can take the step it can.
        # When even that bottoms out, a scales-only move can still work:
        # it leaves every precision untouched, so it cannot leave the
        # domain, and its pairing with the mass gaps is nonnegative term
        # by term; a light state whose mass gap the joint direction would
        # close at a crawl gets its log-weight moved in full steps.
        nonlocal n_steps
        improved = False
        for t in range(len(delta)):
            step_t = 1.0
            accepted = False
            while step_t >= 1e-7 and n_steps < cfg.max_inner:
                if try_move(t, directions[t], step_t):
                    accepted = True
                    break
                step_t *= 0.5
            if accepted:
                improved = True
                continue
            scales_only = CGCanonical(directions[t].scales,
                                      np.zeros_like(directions[t].shifts),
                                      np.zeros_like(directions[t].precisions))
            step_t = 1.0
            while step_t >= 1e-3 and n_steps < cfg.max_inner:
                if try_move(t, scales_only, step_t):
                    improved = True
                    break
                step_t *= 0.5
        return improved

    # Phase 1: ascent on the dual value.
    step = 1.0
    anchor = value
    since_gain = 0
    bottomed = False
    while grad_norm > cfg.inner_tol and n_steps < cfg.max_inner \
            and since_gain < cfg.stall_window:
        noise = 64.0 * np.finfo(float).eps * max(1.0, abs(value))
        accepted = False
        while True:
            candidate, cand_marginals, cand_value = propose(step)
            gaps = None
            if cand_value >= value - noise:
                gaps = _gaps_or_none(cand_marginals)
            if gaps is not None:
                delta = list(candidate)
                marginals = cand_marginals
                value = cand_value
                grad_norm, directions = gaps
                trace.append(value)
                min_step = min(min_step, step)
                step = min(1.0, step * cfg.step_grow)
                accepted = True
                break
            step *= 0.5
            if step < cfg.inner_step_floor:
                break
        if not accepted:
            if link_pass():
                step = 1.0
                anchor = value
                since_gain = 0
                continue
            # A genuine decrease at the smallest allowed step even link by
            # link: the value signal is exhausted here; let the gradient
            # phase decide whether this is a numerical breakdown.
            bottomed = True
            break
        if value - anchor > cfg.stall_window * noise:
            anchor = value
            since_gain = 0
        else:
            since_gain += 1
        if grad_norm < best[0]:
            best = (grad_norm, list(delta), marginals, value)

    # Phase 2: polish on the gradient.
    step = min(step, 0.5)
    since_best = 0
    polished = False
    while grad_norm > cfg.inner_tol and n_steps < cfg.max_inner:
        if since_best >= cfg.stall_window or step < 1e-7:
            if link_pass():
                since_best = 0
                step = max(step, 1.0 / 16)
                continue
            break
        candidate, cand_marginals, cand_value = propose(step)
        gaps = _gaps_or_none(cand_marginals)
        if gaps is None:
            step *= 0.5
            continue
        cand_grad, cand_directions = gaps
        if cand_grad <= grad_norm * (1.0 + 1e-6):
            delta = list(candidate)
            marginals = cand_marginals
            value = cand_value
            grad_norm = cand_grad
            directions = cand_directions
            trace.append(value)
            step = min(1.0, step * cfg.step_grow)
            polished = True
            if grad_norm < best[0]:
                best = (grad_norm, list(delta), marginals, value)
                since_best = 0
            else:
                since_best += 1
        else:
            step *= 0.5

    if bottomed and not polished and n_steps < cfg.max_inner:
        raise InnerStall(
            f"dual value decreasing at the {cfg.inner_step_floor:g} step "
            f"floor and the gradient not reducible (sup-norm "
            f"{best[0]:.3g})")
    grad_norm, delta, marginals, value = best
    if grad_norm <= cfg.inner_tol:
        stop = "tolerance"
    elif n_steps >= cfg.max_inner:
        stop = "budget"
    elif bottomed:
        stop = "floor"
    else:
        stop = "stall"
    return InnerResult(SaddleState(state.combined, tuple(delta)), marginals,
                       value, trace, n_steps, grad_norm, min_step, stop)


def outer_step(state: SaddleState, pots):
    """Re-center each combined potential on its neighboring collapses.

    Returns (new combined potentials, projected link beliefs).  The new
    combined potential of a link is the normalized canonical form of the
    belief whose expected statistics are the average of the tail collapse
    of the left step belief and the head collapse of the right one; when
    the inner loop has equalized the two, this is exactly their common
    value.

    Switch states whose averaged mass is numerically dead keep their
    current combined parameters instead of being re-centered: their
    averaged statistics are ratios of underflowing sums, so re-deriving
    canonical parameters from them shifts the dead components by O(1)
    between outer iterations — enough to push cross components of
    neighboring step products out of the domain — while contributing
    nothing to any reported quantity.
    """
    marginals, _ = _dual_eval(state, pots)
    if marginals is None:
        raise ImproperTwoSlice("outer step requested outside the domain")
    new_combined = []
    link_beliefs = []
    for gamma_old, (qf, qb) in zip(state.combined, _link_collapses(marginals)):
        sf = CGMeanParams.from_moments(qf)
        sb = CGMeanParams.from_moments(qb)
        avg = CGMeanParams(0.5 * (sf.mass + sb.mass),
                           0.5 * (sf.first + sb.first),
                           0.5 * (sf.second + sb.second), log_mass=0.0)
        live = avg.mass > DEAD_STATE_TOL
        try:
            if np.all(live):
                q_bar = avg.to_moments()
                new_combined.append(moments_to_canonical(q_bar))
                link_beliefs.append(q_bar)
                continue
            idx = np.flatnonzero(live)
            mass = avg.mass[idx]
            means_live = avg.first[idx] / mass[:, None]
            covs_live = avg.second[idx] / mass[:, None, None] \
                - np.einsum("jk,jl->jkl", means_live, means_live)
            g, h, k = canonical_from_moments(
                np.log(mass), means_live, covs_live,
                what="projected link covariance")
        except InferenceFailure as exc:
            raise OuterProjectionFailure(
                f"averaged link statistics are not a valid belief: "
                f"{type(exc).__name__}: {exc}") from None
        old_q = canonical_to_moments(gamma_old)
        scales = np.array(gamma_old.scales)
        shifts = np.array(gamma_old.shifts)
        precisions = np.array(gamma_old.precisions)
        # A dead state keeps its geometry (shift/precision) but its scale
        # is re-encoded to carry the current negligible mass; otherwise the
        # reported link belief and the residual would see the stale weight
        # the state had when it went dead.
        dead_idx = np.flatnonzero(~live)
        old_mass = old_q.weights[dead_idx] * np.exp(old_q.log_mass)
        scales[dead_idx] += (np.log(np.maximum(avg.mass[dead_idx], 1e-290))
                             - np.log(np.maximum(old_mass, 1e-290)))
        scales[idx] = g
        shifts[idx] = h
        precisions[idx] = k
        new_combined.append(CGCanonical(scales, shifts, precisions))
        means = np.array(old_q.means)
        covs = np.array(old_q.covs)
        means[idx] = means_live
        covs[idx] = covs_live
        link_beliefs.append(CGMoments(avg.mass, means, covs, log_mass=0.0))
    return new_combined, link_beliefs


def _cg_entropy(q: CGMoments) -> float:
    total = 0.0
    n = q.dim
    for j in range(q.n_states):
        p = float(q.weights[j])
        if p == 0.0:
            continue
        logdet = float(chol_logdet(chol_spd(q.covs[j], "belief covariance")))
        total += p * (-np.log(p) + 0.5 * (n * (1.0 + LOG_2PI) + logdet))
    return total


def _step_term(bel: TwoSliceMarginal, pot: TwoSlicePotential) -> float:
    """Expected log belief minus expected log potential, one step."""
    w = bel.weights
    mask = w > 0.0
    d = bel.joint_dim
    logdets = chol_logdet(chol_spd(bel.covs, "belief covariance"))
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
    neg_entropy = np.where(mask,
                           log_w - 0.5 * (d * (1.0 + LOG_2PI) + logdets), 0.0)
    lin = np.einsum("ijk,ijk->ij", pot.shifts, bel.means)
    quad = np.einsum("ijkl,ijkl->ij", pot.precisions, bel.covs) \
        + np.einsum("ijk,ijkl,ijl->ij", bel.means, pot.precisions, bel.means)
    expected_log_pot = np.where(mask, pot.scales + lin - 0.5 * quad, 0.0)
    return float(np.sum(w * (neg_entropy - expected_log_pot)))


def bethe_free_energy(marginals, link_beliefs, pots) -> float:
    """Chain Bethe objective for given step beliefs and link beliefs.

    Sum over steps of the expected log-ratio of the (normalized) step
    belief to the step potential, minus the sum over links of the link
    beliefs' average log-density.  All terms are closed-form: step beliefs
    are labeled Gaussian mixtures whose labels are part of the state, so no
    mixture-entropy approximation is involved.  Equals the negative
    log-evidence at the exact posterior marginals of a single-state model,
    and normalizer_term + dual_term at any collapse-consistent point.
    """
    if len(marginals) != len(pots):
        raise ValueError("need one step belief per potential")
    if len(link_beliefs) != len(pots) - 1:
        raise ValueError("need one link belief per interior link")
    total = sum(_step_term(bel, pot) for bel, pot in zip(marginals, pots))
    total += sum(_cg_entropy(q) for q in link_beliefs)
    return float(total)


@dataclass
class FreeEnergyReport:
    """One saddle-state evaluation.

    free_energy is the Bethe value at the implied step beliefs paired with
    the link beliefs read off the combined potentials; it equals
    normalizer_term + dual_term whenever the collapse-consistency residual
    is small.
    """

    free_energy: float
    normalizer_term: float
    dual_term: float
    log_norms: list[float]
    residual: float


def evaluate_saddle(state: SaddleState, pots) -> FreeEnergyReport:
    """Bethe value, objective split, per-step log-masses, and residual."""
    marginals, dual = _dual_eval(state, pots)
    if marginals is None:
        raise ImproperTwoSlice("saddle state outside the domain")
    normalizer = belief_normalizer_sum(state.combined)
    link_beliefs = [canonical_to_moments(g) for g in state.combined]
    free_energy = bethe_free_energy(marginals, link_beliefs, pots)
    residual = constraint_residual(state.forward(), state.backward(), pots,
                                   link_beliefs=link_beliefs)
    return FreeEnergyReport(free_energy, normalizer, dual,
                            [m.log_mass for m in marginals], residual)


def saddle_residual(state: SaddleState, pots) -> float:
    """Sup-norm collapse-consistency gap, including the link beliefs."""
    link_beliefs = [canonical_to_moments(g) for g in state.combined]
    return constraint_residual(state.forward(), state.backward(), pots,
                               link_beliefs=link_beliefs)


@dataclass
class DoubleLoopRecord:
    """Everything a double-loop run produced.

    free_energies is the reported per-outer-iteration Bethe sequence (the
    one guaranteed nonincreasing); beliefs are the final per-slice
    marginals (projected link beliefs for the interior slices, the tail
    collapse of the last step belief for the final slice).
    """

    status: str
    n_outer: int
    free_energies: list[float] = field(default_factory=list)
    inner_steps: list[int] = field(default_factory=list)
    inner_grads: list[float] = field(default_factory=list)
    beliefs: list[CGMoments] | None = None
    link_beliefs: list[CGMoments] | None = None
    marginals: list[TwoSliceMarginal] | None = None
    state: SaddleState | None = None
    residual: float | None = None
    log_likelihood: float | None = None
    init_used: str = "zero"
    belief_history: list[list[CGMoments]] = field(default_factory=list)

    @property
    def free_energy(self) -> float | None:
        return self.free_energies[-1] if self.free_energies else None


class _RescueNeeded(Exception):
    """Internal: the zero start is numerically unworkable; restart warm."""


def _zero_state(pots) -> SaddleState:
    horizon = len(pots)
    m = pots[0].scales.shape[1]
    return SaddleState(
        tuple(CGCanonical.zero(m, pots[t].head_dim) for t in range(1, horizon)),
        tuple(CGCanonical.zero(m, pots[t].head_dim) for t in range(1, horizon)))


def _filter_state(pots) -> SaddleState:
    """Link parameters of one plain forward filtering pass (no backward)."""
    horizon = len(pots)
    m = pots[0].scales.shape[1]
    zeros_f = [CGCanonical.zero(m, pots[t].head_dim)
               for t in range(1, horizon)]
    zeros_b = [CGCanonical.zero(m, pots[t - 1].tail_dim)
               for t in range(1, horizon)]
    fwd, _, _ = _forward_half(zeros_f, zeros_b, pots, 1.0)
    return SaddleState(tuple(fwd), tuple(fwd))


def _ep_warm_state(pots) -> SaddleState | None:
    """Saddle coordinates of a converged message-passing run, if any.

    A converged fixed point of the single-loop updates is a stationary
    point of the same objective, so starting the minimizer there reduces
    its work to verification; this matters on instances whose light switch
    states make the cold-started minimizer slow.  Undamped first (fastest
    when it works), then a ladder of heavier damping; None when no run
    converges or the fixed point is unusable as a saddle iterate.
    """
    for damping in (1.0, 0.5, 0.25, 0.1):
        rec = run_ep(pots, EPConfig(damping=damping, max_iters=500))
        if rec.status != EP_CONVERGED or rec.fwd is None:
            continue
        combined = tuple(
            CGCanonical(f.scales + b.scales, f.shifts + b.shifts,
                        f.precisions + b.precisions)
            for f, b in zip(rec.fwd, rec.bwd))
        difference = tuple(
            CGCanonical(f.scales - b.scales, f.shifts - b.shifts,
                        f.precisions - b.precisions)
            for f, b in zip(rec.fwd, rec.bwd))
        state = SaddleState(combined, difference)
        if _gaps_or_none(_dual_eval(state, pots)[0]) is not None:
            return state
    return None


def double_loop(pots, config: DoubleLoopConfig | None = None,
                init: str = "auto") -> DoubleLoopRecord:
    """Minimize the Bethe objective with monotone reported descent.

    ``init="auto"`` escalates through three starting points.  A converged
    single-loop fixed point, when one exists, is already stationary, so
    the minimizer only verifies and polishes it.  Otherwise the run starts
    cold from all-zero link parameters; if that start is unusable (bare
    step products not normalizable, e.g. observations less informative
    than the latent state) or numerically unworkable (the first attempt's
    inner maximization stalls or cannot push the dual gradient below
    ``rescue_tol``), it restarts from the messages of one plain forward
    filtering pass.  ``init`` may force ``"zero"`` (cold, never rescue) or
    ``"filter"`` (filtering-pass start).  Alternates inner dual
    maximization with outer re-centering until the projected link beliefs
    stop moving.
    """
    cfg = config or DoubleLoopConfig()
    if init not in ("auto", "zero", "filter"):
        raise ValueError(f"init must be auto, zero, or filter, got {init!r}")

    state = None
    init_used = init
    if init == "filter":
        state = _filter_state(pots)
    elif init == "auto":
        state = _ep_warm_state(pots)
        init_used = "fixed_point"
    if state is None:
        state, init_used = _zero_state(pots), "zero"
        if _gaps_or_none(_dual_eval(state, pots)[0]) is None:
            state, init_used = _filter_state(pots), "filter"
    allow_rescue = init == "auto" and init_used == "zero"
    try:
        return _double_loop_attempt(state, pots, cfg, init_used,
                                    allow_rescue)
    except _RescueNeeded:
        return _double_loop_attempt(_filter_state(pots), pots, cfg,
                                    "filter", False)


def _adopt(combined, difference, pots) -> SaddleState:
    """Pair re-centered combined parameters with a warm difference.

    Re-centering can move the combined parameters out from under the warm
    difference; the usual culprits are light switch states whose collapse
    geometry jumped.  Repairs escalate, keeping as much of the warm start
    as possible: first reset only the light states' difference entries,
    then shrink the whole difference toward zero just far enough to be
    usable — zero itself always is, because splitting each link belief's
    parameters evenly across its two messages gives every step product
    half of a proper belief's precision on each linked slice.
    """
    state = SaddleState(tuple(combined), tuple(difference))
    if _gaps_or_none(_dual_eval(state, pots)[0]) is not None:
        return state
    surgical = []
    any_shaky = False
    for g, d in zip(state.combined, state.difference):
        shaky = canonical_to_moments(g).weights < SHAKY_STATE_TOL
        any_shaky = any_shaky or bool(shaky.any())
        surgical.append(CGCanonical(
            np.where(shaky, 0.0, d.scales),
            np.where(shaky[:, None], 0.0, d.shifts),
            np.where(shaky[:, None, None], 0.0, d.precisions)))
    if any_shaky:
        cand = SaddleState(state.combined, tuple(surgical))
        if _gaps_or_none(_dual_eval(cand, pots)[0]) is not None:
            return cand
    shrunk = state.difference
    for _ in range(64):
        shrunk = tuple(CGCanonical(0.5 * d.scales, 0.5 * d.shifts,
                                   0.5 * d.precisions)
                       for d in shrunk)
        cand = SaddleState(state.combined, shrunk)
        if _gaps_or_none(_dual_eval(cand, pots)[0]) is not None:
            return cand
    return SaddleState(state.combined, _zero_state(pots).difference)


def _blend_combined(old, target, eta: float):
    """Convex combination of two tuples of canonical parameters.

    Both endpoints are proper, and positive-definiteness survives convex
    combination, so every eta in [0, 1] is proper too.
    """
    return tuple(CGCanonical((1.0 - eta) * a.scales + eta * b.scales,
                             (1.0 - eta) * a.shifts + eta * b.shifts,
                             (1.0 - eta) * a.precisions + eta * b.precisions)
                 for a, b in zip(old, target))


_MIN_REPLAY_DAMPING = 2.0 ** -6

# Rises of the reported objective below this are indistinguishable from
# reevaluation jitter of the same iterate and carry no information; treating
# them as real would end runs two decades short of the residual they can
# reach.  Genuine evaluation-floor noise sits an order of magnitude higher.
_UPTICK_SLACK = 1e-13


@dataclass
class _Accepted:
    """The last outer iterate whose reported value was accepted."""

    state: SaddleState
    marginals: list
    target: tuple
    link_beliefs: list
    value: float


def _double_loop_attempt(state: SaddleState, pots, cfg: DoubleLoopConfig,
                         init_used: str,
                         allow_rescue: bool) -> DoubleLoopRecord:
    record = DoubleLoopRecord(status=STATUS_MAX_ITERS, n_outer=0,
                              init_used=init_used)
    marginals = None
    prev = None
    eta = 1.0

    def replay() -> bool:
        # Reported value would rise (or the inner loop choked) after the
        # last re-centering: replay it from the last accepted iterate,
        # damped toward the parameters that worked.
        nonlocal eta, state
        eta *= 0.5
        if eta < _MIN_REPLAY_DAMPING:
            return False
        state = _adopt(_blend_combined(prev.state.combined, prev.target, eta),
                       prev.state.difference, pots)
        return True

    for outer in range(1, cfg.max_outer + 1):
        record.n_outer = outer
        try:
            inner = inner_loop(state, pots, cfg)
        except InnerStall:
            if allow_rescue:
                raise _RescueNeeded() from None
            if prev is None:
                raise
            if replay():
                continue
            record.status = STATUS_STALLED
            state, marginals = prev.state, prev.marginals
            break
        if allow_rescue and inner.grad_norm > cfg.rescue_tol:
            raise _RescueNeeded()
        state = inner.state
        marginals = inner.marginals
        if state.n_links == 0:
            record.free_energies.append(bethe_free_energy(marginals, [], pots))
            record.belief_history.append([collapse_tail(marginals[0])])
            record.status = STATUS_CONVERGED
            break
        new_combined, link_beliefs = outer_step(state, pots)
        value = bethe_free_energy(marginals, link_beliefs, pots)
        if prev is not None and value > prev.value + _UPTICK_SLACK:
            # The true per-iteration decrease shrinks geometrically while
            # the evaluation of the objective carries a few-ulp-amplified
            # wobble, so once the two cross, face-value upticks appear.
            # A damped replay usually clears a wobble flip (the true
            # decrease at half the step still dominates) and softens a
            # real rise (a re-centering the warm difference could not
            # follow).  Only when no damping helps is the iterate at the
            # evaluation floor, and the residual says whether that floor
            # is convergence.
            if replay():
                continue
            if saddle_residual(state, pots) <= cfg.floor_resid_tol:
                record.status = STATUS_CONVERGED
                break
            record.status = STATUS_STALLED
            state, marginals = prev.state, prev.marginals
            break
        record.free_energies.append(value)
        record.inner_steps.append(inner.n_steps)
        record.inner_grads.append(inner.grad_norm)
        beliefs = list(link_beliefs) + [collapse_tail(marginals[-1])]
        record.belief_history.append(beliefs)
        if prev is not None:
            change = max(mean_param_distance(a, b)
                         for a, b in zip(link_beliefs, prev.link_beliefs))
            if change < cfg.outer_tol:
                record.status = STATUS_CONVERGED
                break
        prev = _Accepted(state, marginals, tuple(new_combined), link_beliefs,
                         value)
        eta = 1.0
        state = _adopt(new_combined, state.difference, pots)

    record.state = state
    record.marginals = marginals
    record.beliefs = record.belief_history[-1] if record.belief_history else None
    record.link_beliefs = record.belief_history[-1][:-1] if record.belief_history else None
    try:
        record.residual = saddle_residual(state, pots)
    except InferenceFailure:
        record.residual = None
    return record


def hessian_from_function(f, x0: np.ndarray, y0: np.ndarray, step: float = 1e-4):
    """Blocks of the Hessian of f(x, y) by central differences.

    One Richardson extrapolation step (combining stencils at the given step
    and half of it) removes the leading quadratic truncation error.
    Returns (H_xx, H_xy, H_yy), each symmetrized where square.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    nx = x0.size
    z0 = np.concatenate([x0, y0])

    def g(z):
        return float(f(z[:nx], z[nx:]))

    coarse = _fd_hessian(g, z0, step)
    fine = _fd_hessian(g, z0, 0.5 * step)
    full = symmetrize((4.0 * fine - coarse) / 3.0)
    return full[:nx, :nx], full[:nx, nx:], full[nx:, nx:]


def _fd_hessian(g, z0: np.ndarray, h: float) -> np.ndarray:
    n = z0.size
    out = np.empty((n, n))
    g0 = g(z0)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        out[i, i] = (g(z0 + ei) - 2.0 * g0 + g(z0 - ei)) / (h * h)
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h
            val = (g(z0 + ei + ej) - g(z0 + ei - ej)
                   - g(z0 - ei + ej) + g(z0 - ei - ej)) / (4.0 * h * h)
            out[i, j] = val
            out[j, i] = val
    return out


def _contrast_basis(m: int) -> np.ndarray:
    """Orthonormal basis of the directions summing to zero in R^m.

    Row k has ones in the first k slots, -k in slot k, zeros after,
    normalized; every row is orthogonal to the all-ones direction (the
    scale shift that the objective ignores).
    """
    rows = []
    for k in range(1, m):
        v = np.zeros(m)
        v[:k] = 1.0
        v[k] = -float(k)
        rows.append(v / np.sqrt(k * (k + 1.0)))
    return np.array(rows).reshape(m - 1, m)


class _SaddleChart:
    """Orthonormal reduced coordinates around a saddle state.

    Per link: scale contrasts (the uniform shift is a flat direction and is
    excluded), all shift entries, and the upper triangle of each state's
    precision (off-diagonal directions are symmetric pairs normalized to
    unit Frobenius norm).
    """

    def __init__(self, state: SaddleState):
        if state.n_links == 0:
            raise ValueError("state has no link parameters")
        self.state = state
        m = state.combined[0].n_states
        n = state.combined[0].dim
        dirs = []
        for row in _contrast_basis(m):
            dirs.append((row, np.zeros((m, n)), np.zeros((m, n, n))))
        for j in range(m):
            for k in range(n):
                shift = np.zeros((m, n))
                shift[j, k] = 1.0
                dirs.append((np.zeros(m), shift, np.zeros((m, n, n))))
        for j in range(m):
            for a in range(n):
                for b in range(a, n):
                    prec = np.zeros((m, n, n))
                    if a == b:
                        prec[j, a, a] = 1.0
                    else:
                        prec[j, a, b] = prec[j, b, a] = 1.0 / np.sqrt(2.0)
                    dirs.append((np.zeros(m), np.zeros((m, n)), prec))
        self.link_dirs = dirs
        self.per_link = len(dirs)
        self.dim = self.per_link * state.n_links

    def _apply(self, bases, coords):
        coords = np.asarray(coords, dtype=float).reshape(-1)
        if coords.size != self.dim:
            raise ValueError(f"expected {self.dim} coordinates, got {coords.size}")
        out = []
        for t, base in enumerate(bases):
            block = coords[t * self.per_link:(t + 1) * self.per_link]
            scales = base.scales.copy()
            shifts = base.shifts.copy()
            precisions = base.precisions.copy()
            for c, (ds, dh, dp) in zip(block, self.link_dirs):
                if c == 0.0:
                    continue
                scales += c * ds
                shifts += c * dh
                precisions += c * dp
            out.append(CGCanonical(scales, shifts, precisions))
        return tuple(out)

    def combined_at(self, coords) -> tuple[CGCanonical, ...]:
        return self._apply(self.state.combined, coords)

    def difference_at(self, coords) -> tuple[CGCanonical, ...]:
        return self._apply(self.state.difference, coords)


@dataclass
class HessianReport:
    """Finite-difference curvature of the objective split at a fixed point.

    Eigenvalues are of the symmetrized blocks in the reduced chart; the
    reduced combined-block Schur complement h_combined - h_cross
    h_difference^{-1} h_cross' classifies the point: a descent-ascent
    stable point has positive combined curvature and negative difference
    curvature, and a constrained local minimum has a positive semidefinite
    Schur complement.
    """

    h_combined: np.ndarray
    h_cross: np.ndarray
    h_difference: np.ndarray
    schur: np.ndarray
    eig_combined: np.ndarray
    eig_difference: np.ndarray
    eig_schur: np.ndarray
    descent_ascent_stable: bool
    local_minimum: bool


def hessian_diagnostics(state: SaddleState, pots, step: float = 1e-4,
                        residual_tol: float = 1e-6) -> HessianReport:
    """Numerical curvature blocks of normalizer_term + dual_term.

    Requires the state to be (numerically) a fixed point: the collapse
    residual must not exceed residual_tol.  Differentiation happens in the
    reduced chart so the exactly flat uniform-scale directions do not
    contaminate the eigenvalues.
    """
    gap = saddle_residual(state, pots)
    if not gap <= residual_tol:
        raise ValueError(
            f"not a fixed point: collapse residual {gap:.3g} exceeds "
            f"{residual_tol:g}")
    chart = _SaddleChart(state)

    def f(x, y):
        combined = chart.combined_at(x)
        difference = chart.difference_at(y)
        value = dual_objective(SaddleState(combined, difference), pots)
        return belief_normalizer_sum(combined) + value

    zeros = np.zeros(chart.dim)
    h_cc, h_cd, h_dd = hessian_from_function(f, zeros, zeros, step=step)
    schur = symmetrize(h_cc - h_cd @ np.linalg.solve(h_dd, h_cd.T))
    eig_cc = np.linalg.eigvalsh(h_cc)
    eig_dd = np.linalg.eigvalsh(h_dd)
    eig_schur = np.linalg.eigvalsh(schur)
    return HessianReport(
        h_combined=h_cc, h_cross=h_cd, h_difference=h_dd, schur=schur,
        eig_combined=eig_cc, eig_difference=eig_dd, eig_schur=eig_schur,
        descent_ascent_stable=bool(eig_cc.min() > 0.0 and eig_dd.max() < 0.0),
        local_minimum=bool(eig_schur.min() >= 0.0))
