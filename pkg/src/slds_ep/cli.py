"""Command-line front end.

Subcommands:
  run     batch experiments over generated or file-based instances; CSV out
  search  scan seeds for instances where undamped sweeps fail to settle
  oracle  exact beliefs and log-likelihood of one instance (text report)
  diag    curvature diagnostics at a fixed point of one instance

Exit status is 0 unless an internal error occurs; non-convergence and
empty search results are ordinary data, not errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .ep import STATUS_CONVERGED
from .errors import InferenceFailure
from .exact import exact_beliefs
from .free_energy import DoubleLoopConfig, double_loop, hessian_diagnostics
from .harness import (ExperimentConfig, polish_fixed_point, run_experiment,
                      rows_to_csv, search_difficult)
from .model import build_potentials, parse_instance


def _parse_dims(text: str) -> tuple[int, int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(
            f"dims must be M,N,D,T (four integers), got {text!r}")
    return tuple(parts)


def _parse_seeds(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(s) for s in text)
    text = str(text)
    if ".." in text:
        lo, hi = text.split("..", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(p) for p in text.split(","))


def _parse_methods(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _parse_damping(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(p) for p in str(text).split(","))


def _config_from_doc(doc: dict) -> ExperimentConfig:
    kwargs = {}
    if "dims" in doc:
        kwargs["dims"] = tuple(int(v) for v in doc["dims"])
    if "seeds" in doc:
        kwargs["seeds"] = _parse_seeds(doc["seeds"])
    if "instance_files" in doc:
        kwargs["instance_files"] = tuple(str(p) for p in doc["instance_files"])
    if "methods" in doc:
        kwargs["methods"] = _parse_methods(doc["methods"]) \
            if isinstance(doc["methods"], str) else tuple(doc["methods"])
    if "damping" in doc:
        kwargs["damping"] = _parse_damping(doc["damping"])
    for key in ("tol", "max_iters", "max_outer", "workers"):
        if key in doc and doc[key] is not None:
            kwargs[key] = (float(doc[key]) if key == "tol" else int(doc[key]))
    if "out" in doc and doc["out"] is not None:
        kwargs["out_dir"] = str(doc["out"])
    if "out_dir" in doc and doc["out_dir"] is not None:
        kwargs["out_dir"] = str(doc["out_dir"])
    if "record_timing" in doc:
        kwargs["record_timing"] = bool(doc["record_timing"])
    return ExperimentConfig(**kwargs)


def _cmd_run(args) -> int:
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    else:
        doc = {}
        if args.dims:
            doc["dims"] = args.dims
        if args.seeds:
            doc["seeds"] = args.seeds
        if args.instances:
            doc["instance_files"] = args.instances
        if args.methods:
            doc["methods"] = args.methods
        if args.damping:
            doc["damping"] = args.damping
        if args.tol is not None:
            doc["tol"] = args.tol
        if args.max_iters is not None:
            doc["max_iters"] = args.max_iters
        if args.workers is not None:
            doc["workers"] = args.workers
        if args.out:
            doc["out"] = args.out
        if args.no_timing:
            doc["record_timing"] = False
    config = _config_from_doc(doc)
    rows = run_experiment(config)
    if config.out_dir is None:
        sys.stdout.write(rows_to_csv(rows))
    else:
        print(f"wrote {len(rows)} rows to "
              f"{Path(config.out_dir) / 'results.csv'}")
    return 0


def _cmd_search(args) -> int:
    result = search_difficult(args.dims, _parse_seeds(args.seeds),
                              args.budget, out_dir=args.out, tol=args.tol,
                              max_iters=args.max_iters)
    print(f"examined {len(result.examined)} instances at dims "
          f"{result.dims}: flagged {len(result.flagged)} "
          f"(frequency {result.frequency:.3f})")
    for item in result.flagged:
        extra = f", period {item.period}" if item.period else \
            f", KL spread {item.kl_spread:.3g}"
        print(f"  {item.instance_id}: {item.status}{extra}")
    if args.out:
        print(f"summary written to {Path(args.out) / 'summary.json'}")
    return 0


def _format_vector(v: np.ndarray) -> str:
    return np.array2string(np.asarray(v), precision=6, separator=", ",
                           suppress_small=False)


def _cmd_oracle(args) -> int:
    model, obs = parse_instance(Path(args.instance).read_text())
    exact = exact_beliefs(model, obs)
    print(f"instance: {args.instance}")
    print(f"dims: M={model.n_switch} N={model.latent_dim} "
          f"D={model.obs_dim} T={obs.horizon}")
    print(f"log-likelihood: {exact.log_likelihood:.12g}")
    for t, belief in enumerate(exact.beliefs, start=1):
        print(f"slice {t}:")
        print(f"  switch posterior: {_format_vector(belief.weights)}")
        for j in range(belief.n_states):
            print(f"  state {j}: mean {_format_vector(belief.means[j])}")
            print(f"           cov  "
                  + _format_vector(belief.covs[j]).replace("\n", "\n           "))
    return 0


def _cmd_diag(args) -> int:
    model, obs = parse_instance(Path(args.instance).read_text())
    pots = build_potentials(model, obs)
    if args.method == "double_loop":
        record = double_loop(pots, DoubleLoopConfig())
        status = record.status
        state = record.state if status == STATUS_CONVERGED else None
    else:
        record, state = polish_fixed_point(pots, eps=args.damping,
                                           extra_sweeps=args.extra_sweeps)
        status = record.status
    print(f"method: {args.method}  status: {status}")
    if state is None:
        print("no fixed point reached; nothing to diagnose")
        return 0
    report = hessian_diagnostics(state, pots, step=args.step)
    print(f"combined-block eigenvalues:   min {report.eig_combined.min():.6g}"
          f"  max {report.eig_combined.max():.6g}")
    print(f"difference-block eigenvalues: min {report.eig_difference.min():.6g}"
          f"  max {report.eig_difference.max():.6g}")
    print(f"reduced Schur eigenvalues:    min {report.eig_schur.min():.6g}"
          f"  max {report.eig_schur.max():.6g}")
    print(f"descent-ascent stable: {report.descent_ascent_stable}")
    print(f"constrained local minimum: {report.local_minimum}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slds-ep",
        description="Switching linear dynamical system inference: collapse "
                    "filtering, damped message passing, double-loop energy "
                    "minimization, and exact enumeration oracles.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment suite, emit CSV")
    run.add_argument("--config", help="JSON config file (overrides flags)")
    run.add_argument("--dims", type=_parse_dims, help="M,N,D,T")
    run.add_argument("--seeds", help="A..B (inclusive) or comma list")
    run.add_argument("--instances", nargs="*",
                     help="instance JSON files instead of dims/seeds")
    run.add_argument("--methods", type=_parse_methods,
                     help="comma list from: gpb2, ep, double_loop")
    run.add_argument("--damping", type=_parse_damping,
                     help="comma list of damping values for ep")
    run.add_argument("--tol", type=float, help="convergence tolerance")
    run.add_argument("--max-iters", type=int, help="sweep budget")
    run.add_argument("--workers", type=int,
                     help="worker processes (0 = in-process)")
    run.add_argument("--out", help="output directory (default: CSV to stdout)")
    run.add_argument("--no-timing", action="store_true",
                     help="zero the wall-time column for reproducible bytes")
    run.set_defaults(func=_cmd_run)

    search = sub.add_parser("search",
                            help="scan seeds for non-settling instances")
    search.add_argument("--dims", type=_parse_dims, required=True)
    search.add_argument("--seeds", required=True)
    search.add_argument("--budget", type=int, required=True)
    search.add_argument("--out", help="directory for flagged instances")
    search.add_argument("--tol", type=float, default=1e-8)
    search.add_argument("--max-iters", type=int, default=200)
    search.set_defaults(func=_cmd_search)

    oracle = sub.add_parser("oracle",
                            help="exact beliefs and log-likelihood")
    oracle.add_argument("--instance", required=True)
    oracle.set_defaults(func=_cmd_oracle)

    diag = sub.add_parser("diag", help="fixed-point curvature diagnostics")
    diag.add_argument("--instance", required=True)
    diag.add_argument("--method", choices=("ep", "double_loop"), default="ep")
    diag.add_argument("--damping", type=float, default=0.1)
    diag.add_argument("--extra-sweeps", type=int, default=50)
    diag.add_argument("--step", type=float, default=1e-4)
    diag.set_defaults(func=_cmd_diag)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InferenceFailure, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
