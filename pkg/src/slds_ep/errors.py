"""Exception types shared across the inference modules.

Numerical failure modes (unnormalizable potentials, vanished mixture
weights, stalled optimizers) are raised as exceptions rather than patched
over with jitter or clamping; callers decide on the recovery policy.
"""


class InferenceFailure(Exception):
    """Base class for numerical failures that callers may want to catch."""


class ImproperPotential(InferenceFailure):
    """A potential required to be normalizable is not positive definite."""

    def __init__(self, message, smallest_eigenvalue=None, index=None):
        super().__init__(message)
        self.smallest_eigenvalue = smallest_eigenvalue
        self.index = index


class ImproperTwoSlice(ImproperPotential):
    """A pairwise slice marginal is unnormalizable for some switch pair."""

    def __init__(self, message, t=None, head_state=None, tail_state=None,
                 smallest_eigenvalue=None):
        super().__init__(message, smallest_eigenvalue=smallest_eigenvalue,
                         index=(head_state, tail_state))
        self.t = t
        self.head_state = head_state
        self.tail_state = tail_state


class WeightUnderflow(InferenceFailure):
    """A state weight is too small to convert back to canonical form."""


class StateVanished(InferenceFailure):
    """Every mixture component of some switch state carries zero weight."""


class InnerStall(InferenceFailure):
    """Dual ascent could not make progress above the step-size floor."""


class OuterProjectionFailure(InferenceFailure):
    """An averaged moment vector is not a valid distribution."""


class InstanceFormatError(ValueError):
    """A serialized instance document failed to parse or validate."""
