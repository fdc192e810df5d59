"""Switching linear dynamical system: model container, potential assembly,
random instance generation, and a versioned text serialization.

Generative model with M switch states, latent dimension N and observation
dimension D:

    s_1 ~ Cat(switch_prior)          z_1 | s_1=i ~ Normal(init_mean_i, init_cov_i)
    s_t | s_{t-1}=i ~ Cat(switch_trans[i])
    z_t | z_{t-1}, s_{t-1}=i, s_t=j ~ Normal(dynamics_ij z_{t-1}, dyn_noise_ij)
    y_t | z_t, s_t=j ~ Normal(emission_j z_t, obs_noise_j)

Inference consumes the model through per-step potentials over pairs of
neighboring slices:

    psi_t(x_{t-1}, x_t) = P(s_t | s_{t-1}) P(z_t | z_{t-1}, s_{t-1}, s_t)
                          P(y_t | z_t, s_t)                        (t >= 2)
    psi_1(x_1)          = P(s_1) P(z_1 | s_1) P(y_1 | z_1, s_1)

stored in canonical Gaussian form per switch pair, with all normalization
constants folded into the log-scale so that potential masses are evidence
contributions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InstanceFormatError
from .gaussian import LOG_2PI, chol_logdet, chol_spd, symmetrize, _lock

FORMAT_NAME = "slds-ep-instance"
FORMAT_VERSION = 1

SPD_SHIFT = 0.1          # diagonal shift of generated noise covariances
SPECTRAL_TARGET = 0.95   # dynamics spectral radius is 0.95 u, u ~ U(0.5, 1)


@dataclass(frozen=True, eq=False)
class SLDSModel:
    """Parameter container; validates stochasticity and definiteness."""

    switch_prior: np.ndarray  # (M,)
    switch_trans: np.ndarray  # (M, M), rows sum to one
    dynamics: np.ndarray      # (M, M, N, N), indexed [from, to]
    dyn_noise: np.ndarray     # (M, M, N, N), SPD
    emission: np.ndarray      # (M, D, N), indexed by the current state
    obs_noise: np.ndarray     # (M, D, D), SPD
    init_mean: np.ndarray     # (M, N)
    init_cov: np.ndarray      # (M, N, N), SPD

    def __post_init__(self):
        prior = np.array(self.switch_prior, dtype=float).reshape(-1)
        trans = np.array(self.switch_trans, dtype=float)
        dynamics = np.array(self.dynamics, dtype=float)
        dyn_noise = np.array(self.dyn_noise, dtype=float)
        emission = np.array(self.emission, dtype=float)
        obs_noise = np.array(self.obs_noise, dtype=float)
        init_mean = np.array(self.init_mean, dtype=float)
        init_cov = np.array(self.init_cov, dtype=float)

        m = prior.size
        if m < 1:
            raise ValueError("need at least one switch state")
        if trans.shape != (m, m):
            raise ValueError(f"switch_trans must be ({m}, {m}), got {trans.shape}")
        if dynamics.ndim != 4 or dynamics.shape[:2] != (m, m) \
                or dynamics.shape[2] != dynamics.shape[3]:
            raise ValueError(f"dynamics must be ({m}, {m}, N, N), got {dynamics.shape}")
        n = dynamics.shape[2]
        if dyn_noise.shape != (m, m, n, n):
            raise ValueError(f"dyn_noise must be ({m}, {m}, {n}, {n}), "
                             f"got {dyn_noise.shape}")
        if emission.ndim != 3 or emission.shape[0] != m or emission.shape[2] != n:
            raise ValueError(f"emission must be ({m}, D, {n}), got {emission.shape}")
        d = emission.shape[1]
        if obs_noise.shape != (m, d, d):
            raise ValueError(f"obs_noise must be ({m}, {d}, {d}), got {obs_noise.shape}")
        if init_mean.shape != (m, n):
            raise ValueError(f"init_mean must be ({m}, {n}), got {init_mean.shape}")
        if init_cov.shape != (m, n, n):
            raise ValueError(f"init_cov must be ({m}, {n}, {n}), got {init_cov.shape}")

        if np.any(prior < 0.0):
            raise ValueError("switch_prior has negative entries")
        if abs(prior.sum() - 1.0) > 1e-10:
            raise ValueError(f"switch_prior sums to {prior.sum()!r}, expected 1")
        if np.any(trans < 0.0):
            raise ValueError("switch_trans has negative entries")
        row_sums = trans.sum(axis=1)
        for i, s in enumerate(row_sums):
            if abs(s - 1.0) > 1e-10:
                raise ValueError(
                    f"switch_trans row {i} sums to {s!r}, expected 1")
        chol_spd(dyn_noise, "dyn_noise")
        chol_spd(obs_noise, "obs_noise")
        chol_spd(init_cov, "init_cov")

        object.__setattr__(self, "switch_prior", _lock(prior))
        object.__setattr__(self, "switch_trans", _lock(trans))
        object.__setattr__(self, "dynamics", _lock(dynamics))
        object.__setattr__(self, "dyn_noise", _lock(symmetrize(dyn_noise)))
        object.__setattr__(self, "emission", _lock(emission))
        object.__setattr__(self, "obs_noise", _lock(symmetrize(obs_noise)))
        object.__setattr__(self, "init_mean", _lock(init_mean))
        object.__setattr__(self, "init_cov", _lock(symmetrize(init_cov)))

    @property
    def n_switch(self) -> int:
        return self.switch_prior.size

    @property
    def latent_dim(self) -> int:
        return self.dynamics.shape[2]

    @property
    def obs_dim(self) -> int:
        return self.emission.shape[1]


@dataclass(frozen=True, eq=False)
class ObservationSequence:
    """Observed vectors y_1..y_T as a (T, D) array."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError(f"observations must be (T, D) with T >= 1, "
                             f"got shape {values.shape}")
        object.__setattr__(self, "values", _lock(values))

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class TwoSlicePotential:
    """Canonical Gaussian potential per switch pair for one time step.

    For t >= 2 the blocks are indexed (i, j) = (previous state, current
    state) over the stacked vector (z_{t-1}, z_t).  For t = 1 there is no
    previous slice: the head axis has length one and head_dim is zero, and
    the blocks cover z_1 only.
    """

    t: int
    head_dim: int
    scales: np.ndarray      # (Mh, M)
    shifts: np.ndarray      # (Mh, M, d)
    precisions: np.ndarray  # (Mh, M, d, d)

    def __post_init__(self):
        scales = np.array(self.scales, dtype=float)
        shifts = np.array(self.shifts, dtype=float)
        precisions = np.array(self.precisions, dtype=float)
        if scales.ndim != 2:
            raise ValueError("scales must be (head states, tail states)")
        d = shifts.shape[-1]
        if shifts.shape != scales.shape + (d,) or precisions.shape != scales.shape + (d, d):
            raise ValueError("inconsistent potential block shapes")
        object.__setattr__(self, "t", int(self.t))
        object.__setattr__(self, "head_dim", int(self.head_dim))
        object.__setattr__(self, "scales", _lock(scales))
        object.__setattr__(self, "shifts", _lock(shifts))
        object.__setattr__(self, "precisions", _lock(symmetrize(precisions)))

    @property
    def joint_dim(self) -> int:
        return self.shifts.shape[-1]

    @property
    def tail_dim(self) -> int:
        return self.joint_dim - self.head_dim


def _gauss_conditional_blocks(mat: np.ndarray, noise: np.ndarray):
    """Canonical pieces of Normal(v; mat u, noise) over the stacked (u, v).

    Returns (constant, precision blocks (uu, uv, vv)); the linear shift is
    zero.  noise must be SPD.
    """
    chol = chol_spd(noise, "conditional noise covariance")
    logdet = float(chol_logdet(chol))
    n = noise.shape[0]
    inv = np.linalg.inv(noise)
    const = -0.5 * (n * LOG_2PI + logdet)
    k_vv = inv
    k_uv = -mat.T @ inv
    k_uu = mat.T @ inv @ mat
    return const, k_uu, k_uv, k_vv


def build_potential(model: SLDSModel, t: int, y_t: np.ndarray) -> TwoSlicePotential:
    """Assemble the evidence-bound potential for step t (1-based).

    For t >= 2 block (i, j) is

        log trans[i, j] + log Normal(z_t; dynamics_ij z_{t-1}, dyn_noise_ij)
                        + log Normal(y_t; emission_j z_t, obs_noise_j)

    expanded into canonical form over (z_{t-1}, z_t); for t = 1 block j is
    log prior_j plus the initial-state and emission terms over z_1.  All
    constants (including the y-dependent ones) live in the scale, so block
    masses are exact evidence contributions.
    """
    m = model.n_switch
    n = model.latent_dim
    y_t = np.asarray(y_t, dtype=float).reshape(-1)
    if y_t.size != model.obs_dim:
        raise ValueError(f"observation has dimension {y_t.size}, "
                         f"expected {model.obs_dim}")

    # Emission pieces, per current state j.
    em_const = np.empty(m)
    em_shift = np.empty((m, n))
    em_prec = np.empty((m, n, n))
    for j in range(m):
        c = model.emission[j]
        r = model.obs_noise[j]
        chol = chol_spd(r, "obs_noise")
        logdet = float(chol_logdet(chol))
        sol = np.linalg.solve(r, y_t)
        em_const[j] = -0.5 * (float(y_t @ sol) + model.obs_dim * LOG_2PI + logdet)
        em_shift[j] = c.T @ sol
        em_prec[j] = c.T @ np.linalg.solve(r, c)

    if t == 1:
        scales = np.empty((1, m))
        shifts = np.empty((1, m, n))
        precisions = np.empty((1, m, n, n))
        with np.errstate(divide="ignore"):
            log_prior = np.log(model.switch_prior)
        for j in range(m):
            v0 = model.init_cov[j]
            chol = chol_spd(v0, "init_cov")
            logdet = float(chol_logdet(chol))
            sol = np.linalg.solve(v0, model.init_mean[j])
            const = -0.5 * (float(model.init_mean[j] @ sol) + n * LOG_2PI + logdet)
            scales[0, j] = log_prior[j] + const + em_const[j]
            shifts[0, j] = sol + em_shift[j]
            precisions[0, j] = np.linalg.inv(v0) + em_prec[j]
        return TwoSlicePotential(1, 0, scales, shifts, precisions)

    d = 2 * n
    scales = np.empty((m, m))
    shifts = np.zeros((m, m, d))
    precisions = np.zeros((m, m, d, d))
    with np.errstate(divide="ignore"):
        log_trans = np.log(model.switch_trans)
    for i in range(m):
        for j in range(m):
            const, k_uu, k_uv, k_vv = _gauss_conditional_blocks(
                model.dynamics[i, j], model.dyn_noise[i, j])
            scales[i, j] = log_trans[i, j] + const + em_const[j]
            shifts[i, j, n:] = em_shift[j]
            precisions[i, j, :n, :n] = k_uu
            precisions[i, j, :n, n:] = k_uv
            precisions[i, j, n:, :n] = k_uv.T
            precisions[i, j, n:, n:] = k_vv + em_prec[j]
    return TwoSlicePotential(t, n, scales, shifts, precisions)


def build_potentials(model: SLDSModel, obs: ObservationSequence) -> list[TwoSlicePotential]:
    """Potentials for every step of an observation sequence."""
    if obs.obs_dim != model.obs_dim:
        raise ValueError("observation dimension does not match the model")
    return [build_potential(model, t + 1, obs.values[t])
            for t in range(obs.horizon)]


def _random_spd(rng: np.random.Generator, n: int) -> np.ndarray:
    l = rng.standard_normal((n, n))
    return l @ l.T + SPD_SHIFT * np.eye(n)


def random_instance(m: int, n: int, d: int, horizon: int, seed: int):
    """Draw a model and a simulated observation sequence, deterministically.

    Stochastic vectors are Dirichlet(1); each dynamics matrix has i.i.d.
    standard normal entries rescaled to spectral radius 0.95 u with
    u ~ Uniform(0.5, 1); noise covariances are LL' + 0.1 I with L standard
    normal.  Observations come from ancestral simulation of the generative
    model.  All sampling uses one explicit generator seeded from ``seed``,
    so equal seeds give bit-identical instances.
    """
    if min(m, n, d, horizon) < 1:
        raise ValueError("all of (m, n, d, horizon) must be >= 1")
    rng = np.random.default_rng(seed)
    prior = rng.dirichlet(np.ones(m))
    trans = np.stack([rng.dirichlet(np.ones(m)) for _ in range(m)])
    dynamics = np.empty((m, m, n, n))
    dyn_noise = np.empty((m, m, n, n))
    for i in range(m):
        for j in range(m):
            a = rng.standard_normal((n, n))
            u = rng.uniform(0.5, 1.0)
            radius = max(np.abs(np.linalg.eigvals(a)))
            dynamics[i, j] = a * (SPECTRAL_TARGET * u / max(radius, 1e-12))
            dyn_noise[i, j] = _random_spd(rng, n)
    emission = rng.standard_normal((m, d, n))
    obs_noise = np.stack([_random_spd(rng, d) for _ in range(m)])
    init_mean = rng.standard_normal((m, n))
    init_cov = np.stack([_random_spd(rng, n) for _ in range(m)])
    model = SLDSModel(prior, trans, dynamics, dyn_noise, emission,
                      obs_noise, init_mean, init_cov)

    # Ancestral simulation; explicit Cholesky draws keep this reproducible.
    ys = np.empty((horizon, d))
    s = int(rng.choice(m, p=prior))
    z = init_mean[s] + np.linalg.cholesky(init_cov[s]) @ rng.standard_normal(n)
    ys[0] = emission[s] @ z + np.linalg.cholesky(obs_noise[s]) @ rng.standard_normal(d)
    for t in range(1, horizon):
        s_next = int(rng.choice(m, p=trans[s]))
        z = dynamics[s, s_next] @ z \
            + np.linalg.cholesky(dyn_noise[s, s_next]) @ rng.standard_normal(n)
        s = s_next
        ys[t] = emission[s] @ z \
            + np.linalg.cholesky(obs_noise[s]) @ rng.standard_normal(d)
    return model, ObservationSequence(ys)


def serialize_instance(model: SLDSModel, obs: ObservationSequence) -> str:
    """One self-describing JSON document holding the model and observations.

    Floats are written with shortest round-trip decimal representation, so
    parsing the document back reproduces every value bit for bit.
    """
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n_switch": model.n_switch,
        "latent_dim": model.latent_dim,
        "obs_dim": model.obs_dim,
        "horizon": obs.horizon,
        "switch_prior": model.switch_prior.tolist(),
        "switch_trans": model.switch_trans.tolist(),
        "dynamics": model.dynamics.tolist(),
        "dyn_noise": model.dyn_noise.tolist(),
        "emission": model.emission.tolist(),
        "obs_noise": model.obs_noise.tolist(),
        "init_mean": model.init_mean.tolist(),
        "init_cov": model.init_cov.tolist(),
        "observations": obs.values.tolist(),
    }
    return json.dumps(doc, indent=1)


_REQUIRED_FIELDS = (
    "format", "version", "n_switch", "latent_dim", "obs_dim", "horizon",
    "switch_prior", "switch_trans", "dynamics", "dyn_noise", "emission",
    "obs_noise", "init_mean", "init_cov", "observations",
)


def parse_instance(text: str):
    """Parse a serialized instance; errors name the offending line or field."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(
            f"not valid JSON: {exc.msg} (line {exc.lineno}, column {exc.colno})"
        ) from None
    if not isinstance(doc, dict):
        raise InstanceFormatError("document root must be an object")
    for field in _REQUIRED_FIELDS:
        if field not in doc:
            raise InstanceFormatError(f"missing field {field!r}")
    if doc["format"] != FORMAT_NAME:
        raise InstanceFormatError(f"unknown format {doc['format']!r}")
    if doc["version"] != FORMAT_VERSION:
        raise InstanceFormatError(
            f"unsupported version {doc['version']!r}, expected {FORMAT_VERSION}")

    def _field_array(name, shape):
        try:
            arr = np.array(doc[name], dtype=float)
        except (TypeError, ValueError):
            raise InstanceFormatError(f"field {name!r} is not numeric") from None
        if arr.shape != shape:
            raise InstanceFormatError(
                f"field {name!r} has shape {arr.shape}, expected {shape}")
        return arr

    try:
        m = int(doc["n_switch"])
        n = int(doc["latent_dim"])
        d = int(doc["obs_dim"])
        horizon = int(doc["horizon"])
    except (TypeError, ValueError):
        raise InstanceFormatError("dimension fields must be integers") from None

    try:
        model = SLDSModel(
            _field_array("switch_prior", (m,)),
            _field_array("switch_trans", (m, m)),
            _field_array("dynamics", (m, m, n, n)),
            _field_array("dyn_noise", (m, m, n, n)),
            _field_array("emission", (m, d, n)),
            _field_array("obs_noise", (m, d, d)),
            _field_array("init_mean", (m, n)),
            _field_array("init_cov", (m, n, n)),
        )
    except ValueError as exc:
        raise InstanceFormatError(f"invalid model: {exc}") from None
    obs = ObservationSequence(_field_array("observations", (horizon, d)))
    return model, obs
