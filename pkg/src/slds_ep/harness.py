"""Experiment runner: batch inference over instance suites with CSV output.

Runs any mix of the three methods — the one-pass collapse filter
(``gpb2``), damped message-passing sweeps (``ep``, one run per damping
value), and the double-loop minimizer (``double_loop``) — over generated
or file-based instances, scores per-iteration beliefs against the
enumeration oracle, and emits one CSV row per (instance, method, damping,
iteration).

Scoring policy: the oracle is consulted per iteration only when the path
count M^T is at most ``KL_EVERY_ITERATION_LIMIT``; past that, only the
final iterate is scored (and none when the enumeration guard itself is
exceeded).  Free energy is reported for the message-passing and
double-loop methods: for the former it is the chain Bethe value at that
sweep's step beliefs paired with their tail collapses.

Determinism: instances are generated from explicit seeds, rows are sorted
by (instance_id, method, damping, iteration) regardless of worker
completion order, and ``record_timing=False`` zeroes the wall-time column
so reruns are byte-identical.

Failures of individual runs (improper beliefs, inner-loop stalls,
projection failures) become rows whose status is the snake-cased failure
name; they never abort the suite.
"""

from __future__ import annotations

import csv
import io
import json
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cg import CGMoments
from .ep import (EPConfig, EPRunRecord, STATUS_CONVERGED, STATUS_LIMIT_CYCLE,
                 STATUS_MAX_ITERS, collapse_tail, ep_marginals, ep_sweep,
                 gpb2_filter, run_ep)
from .errors import InferenceFailure
from .exact import PATH_GUARD, belief_kl_total, exact_beliefs
from .free_energy import (DoubleLoopConfig, SaddleState, bethe_free_energy,
                          double_loop, saddle_from_messages)
from .model import (ObservationSequence, SLDSModel, build_potentials,
                    parse_instance, random_instance, serialize_instance)

KL_EVERY_ITERATION_LIMIT = 4096
METHODS = ("gpb2", "ep", "double_loop")
CSV_COLUMNS = ("instance_id", "method", "epsilon", "iteration", "kl_total",
               "free_energy", "status", "wall_time_ms")


@dataclass(frozen=True)
class ExperimentConfig:
    """One suite: which instances, which methods, which knobs.

    Instances come either from (dims, seeds) generation or from explicit
    files; damping lists apply to the ``ep`` method only.  ``workers=0``
    runs everything in-process; None uses the available parallelism.
    """

    dims: tuple[int, int, int, int] | None = None
    seeds: tuple[int, ...] = ()
    instance_files: tuple[str, ...] = ()
    methods: tuple[str, ...] = METHODS
    damping: tuple[float, ...] = (1.0,)
    tol: float = 1e-8
    max_iters: int = 200
    max_outer: int = 500
    out_dir: str | None = None
    workers: int | None = 0
    record_timing: bool = True

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "damping", tuple(self.damping))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "instance_files", tuple(self.instance_files))
        if self.dims is not None:
            object.__setattr__(self, "dims", tuple(self.dims))
        if not self.methods:
            raise ValueError("need at least one method")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
        if "ep" in self.methods and not self.damping:
            raise ValueError("the ep method needs at least one damping value")
        for eps in self.damping:
            if not 0.0 < eps <= 1.0:
                raise ValueError(f"damping must be in (0, 1], got {eps}")
        if self.dims is not None:
            m, n, d, horizon = self.dims
            if min(m, n, d, horizon) < 1:
                raise ValueError("all dimensions must be at least 1")
        if not self.instance_files and (self.dims is None or not self.seeds):
            raise ValueError("provide dims plus seeds, or instance files")


@dataclass(frozen=True)
class ResultRow:
    """One scored iteration of one method on one instance."""

    instance_id: str
    method: str
    epsilon: float | None
    iteration: int
    kl_total: float | None
    free_energy: float | None
    status: str
    wall_time_ms: float


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def rows_to_csv(rows) -> str:
    """Render rows (already sorted) to the documented CSV schema."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([r.instance_id, r.method, _fmt(r.epsilon),
                         str(r.iteration), _fmt(r.kl_total),
                         _fmt(r.free_energy), r.status, _fmt(r.wall_time_ms)])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[ResultRow]:
    """Parse the documented CSV schema back into rows."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {header!r}")
    out = []
    for rec in reader:
        if not rec:
            continue
        inst, method, eps, iteration, kl, fe, status, wall = rec
        out.append(ResultRow(
            inst, method, float(eps) if eps else None, int(iteration),
            float(kl) if kl else None, float(fe) if fe else None, status,
            float(wall)))
    return out


def _sort_key(row: ResultRow):
    return (row.instance_id, row.method,
            -1.0 if row.epsilon is None else row.epsilon, row.iteration)


def _snake(name: str) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "_", name).lower()


def beliefs_to_json(beliefs) -> str:
    doc = [{"weights": q.weights.tolist(), "means": q.means.tolist(),
            "covs": q.covs.tolist(), "log_mass": q.log_mass}
           for q in beliefs]
    return json.dumps(doc, indent=1)


def beliefs_from_json(text: str) -> list[CGMoments]:
    doc = json.loads(text)
    return [CGMoments(np.array(entry["weights"]), np.array(entry["means"]),
                      np.array(entry["covs"]), float(entry["log_mass"]))
            for entry in doc]


def instance_id_for(dims, seed: int) -> str:
    m, n, d, horizon = dims
    return f"m{m}n{n}d{d}t{horizon}-s{seed}"


def _ep_free_energy(fwd, bwd, pots) -> float | None:
    try:
        marginals = ep_marginals(fwd, bwd, pots)
        links = [collapse_tail(marginals[t]) for t in range(len(pots) - 1)]
        return bethe_free_energy(marginals, links, pots)
    except InferenceFailure:
        return None


def _kl_or_none(exact, beliefs) -> float | None:
    if exact is None or beliefs is None:
        return None
    return belief_kl_total(exact, beliefs)


@dataclass
class _RunArtifacts:
    rows: list[ResultRow]
    final_beliefs: dict[str, str]  # method tag -> beliefs JSON


def _method_tag(method: str, eps: float | None) -> str:
    if eps is None:
        return method
    return f"{method}-eps{eps:g}"


def _run_methods(instance_id: str, model: SLDSModel, obs: ObservationSequence,
                 config: ExperimentConfig) -> _RunArtifacts:
    pots = build_potentials(model, obs)
    n_paths = model.n_switch ** obs.horizon
    exact = None
    per_iteration_kl = False
    if n_paths <= PATH_GUARD:
        exact = exact_beliefs(model, obs)
        per_iteration_kl = n_paths <= KL_EVERY_ITERATION_LIMIT

    rows: list[ResultRow] = []
    finals: dict[str, str] = {}

    def clock(start) -> float:
        if not config.record_timing:
            return 0.0
        return (time.perf_counter() - start) * 1e3

    for method in config.methods:
        if method == "gpb2":
            start = time.perf_counter()
            try:
                filtered, _ = gpb2_filter(pots)
            except InferenceFailure as exc:
                rows.append(ResultRow(instance_id, method, None, 0, None,
                                      None, _snake(type(exc).__name__),
                                      clock(start)))
                continue
            wall = clock(start)
            rows.append(ResultRow(instance_id, method, None, 1,
                                  _kl_or_none(exact, filtered), None,
                                  STATUS_CONVERGED, wall))
            finals[_method_tag(method, None)] = beliefs_to_json(filtered)
        elif method == "ep":
            for eps in config.damping:
                start = time.perf_counter()
                record = run_ep(pots, EPConfig(damping=eps, tol=config.tol,
                                               max_iters=config.max_iters))
                wall = clock(start)
                tag = _method_tag(method, eps)
                if not record.belief_history:
                    rows.append(ResultRow(instance_id, method, eps, 0, None,
                                          None, record.status, wall))
                    continue
                last = len(record.belief_history)
                for it, snapshot in enumerate(record.belief_history, start=1):
                    score = per_iteration_kl or it == last
                    kl = _kl_or_none(exact, snapshot) if score else None
                    fwd, bwd = record.message_history[it - 1]
                    fe = _ep_free_energy(fwd, bwd, pots)
                    rows.append(ResultRow(instance_id, method, eps, it, kl,
                                          fe, record.status, wall))
                finals[tag] = beliefs_to_json(record.belief_history[-1])
        elif method == "double_loop":
            start = time.perf_counter()
            try:
                record = double_loop(pots, DoubleLoopConfig(
                    outer_tol=config.tol, max_outer=config.max_outer))
            except InferenceFailure as exc:
                rows.append(ResultRow(instance_id, method, None, 0, None,
                                      None, _snake(type(exc).__name__),
                                      clock(start)))
                continue
            wall = clock(start)
            last = len(record.belief_history)
            for it, snapshot in enumerate(record.belief_history, start=1):
                score = per_iteration_kl or it == last
                kl = _kl_or_none(exact, snapshot) if score else None
                rows.append(ResultRow(instance_id, method, None, it, kl,
                                      record.free_energies[it - 1],
                                      record.status, wall))
            if record.beliefs is not None:
                finals[_method_tag(method, None)] = beliefs_to_json(
                    record.beliefs)
    return _RunArtifacts(rows, finals)


def _instance_payloads(config: ExperimentConfig):
    """Yield (instance_id, model, obs, serialized) in deterministic order."""
    if config.instance_files:
        for path in config.instance_files:
            text = Path(path).read_text()
            model, obs = parse_instance(text)
            yield Path(path).stem, model, obs, text
    else:
        m, n, d, horizon = config.dims
        for seed in config.seeds:
            model, obs = random_instance(m, n, d, horizon, seed)
            yield (instance_id_for(config.dims, seed), model, obs,
                   serialize_instance(model, obs))


def _worker(payload):
    instance_id, text, config = payload
    model, obs = parse_instance(text)
    art = _run_methods(instance_id, model, obs, config)
    return instance_id, art


def run_experiment(config: ExperimentConfig):
    """Run the suite, return sorted rows; write CSV and artifacts if asked.

    With an output directory set, writes results.csv, one instance file per
    instance under instances/, and the final per-slice beliefs of each
    successful run under beliefs/.
    """
    instances = list(_instance_payloads(config))
    artifacts: dict[str, _RunArtifacts] = {}
    if config.workers == 0 or len(instances) <= 1:
        for instance_id, model, obs, _text in instances:
            artifacts[instance_id] = _run_methods(instance_id, model, obs,
                                                  config)
    else:
        workers = config.workers or os.cpu_count() or 1
        payloads = [(iid, text, config) for iid, _m, _o, text in instances]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for instance_id, art in pool.map(_worker, payloads):
                artifacts[instance_id] = art

    rows: list[ResultRow] = []
    for instance_id, *_ in instances:
        rows.extend(artifacts[instance_id].rows)
    rows.sort(key=_sort_key)

    if config.out_dir is not None:
        out = Path(config.out_dir)
        (out / "instances").mkdir(parents=True, exist_ok=True)
        (out / "beliefs").mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(rows_to_csv(rows))
        for instance_id, _model, _obs, text in instances:
            (out / "instances" / f"{instance_id}.json").write_text(text)
        for instance_id, *_ in instances:
            for tag, payload in artifacts[instance_id].final_beliefs.items():
                (out / "beliefs" / f"{instance_id}--{tag}.json").write_text(
                    payload)
    return rows


@dataclass(frozen=True)
class DifficultInstance:
    """One flagged instance: undamped sweeps failed to settle."""

    instance_id: str
    seed: int
    status: str
    period: int | None
    kl_spread: float | None


@dataclass
class SearchResult:
    """Outcome of a difficulty scan over a seed range."""

    dims: tuple[int, int, int, int]
    examined: list[int] = field(default_factory=list)
    flagged: list[DifficultInstance] = field(default_factory=list)

    @property
    def frequency(self) -> float:
        if not self.examined:
            return 0.0
        return len(self.flagged) / len(self.examined)

    def summary(self) -> dict:
        return {
            "dims": list(self.dims),
            "n_examined": len(self.examined),
            "n_flagged": len(self.flagged),
            "frequency": self.frequency,
            "flagged": [{"instance_id": f.instance_id, "seed": f.seed,
                         "status": f.status, "period": f.period,
                         "kl_spread": f.kl_spread} for f in self.flagged],
        }


def polish_fixed_point(pots, eps: float = 0.1, extra_sweeps: int = 50,
                       tol: float = 1e-8, max_iters: int = 200
                       ) -> tuple[EPRunRecord, SaddleState | None]:
    """Converge damped sweeps, then hold the point with extra sweeps.

    Returns (run record, saddle state of the held messages); the state is
    None when the run did not converge.  Useful before curvature
    diagnostics, which require a tight fixed point.
    """
    record = run_ep(pots, EPConfig(damping=eps, tol=tol, max_iters=max_iters))
    if record.status != STATUS_CONVERGED:
        return record, None
    fwd, bwd = record.fwd, record.bwd
    for _ in range(extra_sweeps):
        fwd, bwd, _, _ = ep_sweep(fwd, bwd, pots, eps)
    return record, saddle_from_messages(fwd, bwd)


OSCILLATION_WINDOW = 20
OSCILLATION_FACTOR = 10.0


def search_difficult(dims, seeds, budget: int, out_dir: str | None = None,
                     tol: float = 1e-8, max_iters: int = 200) -> SearchResult:
    """Scan seeds for instances where undamped sweeps fail to settle.

    An instance is flagged when the run reports a limit cycle, or when it
    hits the iteration budget with the oracle KL still swinging (max minus
    min over the last OSCILLATION_WINDOW sweeps above OSCILLATION_FACTOR
    times the tolerance).  Flagged instances are saved when an output
    directory is given, along with a JSON summary.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    m, n, d, horizon = dims
    result = SearchResult(dims=tuple(dims))
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    for seed in list(seeds)[:budget]:
        result.examined.append(seed)
        model, obs = random_instance(m, n, d, horizon, seed)
        pots = build_potentials(model, obs)
        record = run_ep(pots, EPConfig(damping=1.0, tol=tol,
                                       max_iters=max_iters))
        flagged = False
        period = None
        spread = None
        if record.status == STATUS_LIMIT_CYCLE:
            flagged = True
            period = record.period
        elif record.status == STATUS_MAX_ITERS \
                and m ** horizon <= KL_EVERY_ITERATION_LIMIT:
            exact = exact_beliefs(model, obs)
            kls = [belief_kl_total(exact, snap)
                   for snap in record.belief_history[-OSCILLATION_WINDOW:]]
            spread = float(max(kls) - min(kls))
            flagged = spread > OSCILLATION_FACTOR * tol
        if flagged:
            instance_id = instance_id_for(dims, seed)
            result.flagged.append(DifficultInstance(
                instance_id, seed, record.status, period, spread))
            if out is not None:
                (out / f"{instance_id}.json").write_text(
                    serialize_instance(model, obs))
    if out is not None:
        (out / "summary.json").write_text(
            json.dumps(result.summary(), indent=1))
    return result
