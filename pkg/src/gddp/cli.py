"""Command-line surface: problem I/O, runs, certification, benchmarks.

Exit codes: 0 success, 1 validation or user error, 2 numerical failure.
All file artifacts are written under --out.  Outputs are byte-identical
across repeated invocations with the same flags and seed; recording real
wall-clock times in artifacts is opt-in via --timings (the one-line
summary on stdout always shows them).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, oracles
from .certify import certificate_to_dict, certify_m1
from .driver import GddpConfig, Picker, run
from .exceptions import GddpError, NumericalError, ValidationError
from .problem import load_problem, validate_spec

DEFAULT_SEED = 20210405


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise _UsageError(message)


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--out", default="out", help="directory for output artifacts")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help="random seed (fixed by default)")
    common.add_argument("--format", choices=["csv", "json"], default="csv", help="table output format")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    common.add_argument(
        "--timings",
        action="store_true",
        help="record wall-clock times inside artifacts (off by default for reproducibility)",
    )

    runopts = _Parser(add_help=False)
    runopts.add_argument("--delta", type=float, default=1e-3, help="Bellman error tolerance")
    runopts.add_argument(
        "--picker",
        choices=[p.value for p in Picker],
        default=Picker.MAX_BELLMAN_ERROR.value,
        help="sample-picking strategy",
    )
    runopts.add_argument("--max-iters", type=int, default=1000)
    runopts.add_argument("--check-every", type=int, default=5, help="iterations between convergence checks")
    runopts.add_argument("--num-samples", type=int, default=10, help="size of the sample set")
    runopts.add_argument("--sample-stddev", type=float, default=5.0)

    parser = _Parser(prog="gddp", description="lower-bounding value function approximation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", parents=[common], help="check a problem file against the supported class")
    p.add_argument("--problem", required=True)

    p = sub.add_parser("run", parents=[common, runopts], help="run the lower-bounding loop on a problem file")
    p.add_argument("--problem", required=True)

    p = sub.add_parser("certify", parents=[common, runopts], help="run, then certify suboptimality at query states")
    p.add_argument("--problem", required=True)
    p.add_argument("--cert-samples", type=int, default=10, help="number of certified query states")
    p.add_argument("--max-steps", type=int, default=30, help="rollout horizon per certificate")

    p = sub.add_parser("bench-iterations", parents=[common], help="iterations-to-tolerance table")
    p.add_argument("--dims", default="2x1", help="comma-separated n x m pairs, e.g. 2x1,3x1")
    p.add_argument("--M", default="1,2,5,10", help="comma-separated sample counts")
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--max-iters", type=int, default=2000)

    p = sub.add_parser("bench-quality", parents=[common], help="fixed-budget solution-quality row")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--M", type=int, default=50)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--eval-samples", type=int, default=200)

    p = sub.add_parser("ball-and-beam", parents=[common], help="nonlinear benchmark with rollout snapshots")
    p.add_argument("--budgets", default="50,100,150,200")
    p.add_argument("--M", type=int, default=100)
    p.add_argument("--rollout-steps", type=int, default=50)
    p.add_argument("--grid", type=int, default=601, help="brute-force grid points per input dimension")

    p = sub.add_parser("value-iteration", parents=[common], help="gridded value-iteration baseline")
    p.add_argument("--problem", required=True)
    p.add_argument("--box", default="-10,10", help="state box lo,hi applied to every axis")
    p.add_argument("--state-pts", type=int, default=51)
    p.add_argument("--input-pts", type=int, default=11)
    p.add_argument("--stop-tol", type=float, default=1e-3)

    return parser


def _load(path):
    try:
        return load_problem(path)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: JSON parse error at byte offset {exc.pos}: {exc.msg}") from exc
    except FileNotFoundError as exc:
        raise ValidationError(f"problem file not found: {path}") from exc


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_table(out: Path, name: str, rows, fmt: str) -> Path:
    if fmt == "json":
        path = out / f"{name}.json"
        path.write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    else:
        path = out / f"{name}.csv"
        path.write_text(bench.rows_to_csv(rows), encoding="utf-8")
    return path


def _run_config(args) -> GddpConfig:
    return GddpConfig(
        delta=args.delta,
        max_iterations=args.max_iters,
        picker=Picker(args.picker),
        check_every=args.check_every,
        rng_seed=args.seed,
    )


def _trace_rows(result, timings: bool):
    rows = []
    for rec in result.trace:
        rows.append(
            {
                "iteration": rec.iteration,
                "picked_index": rec.picked_index,
                "J_P": repr(rec.J_P),
                "duality_gap": repr(rec.duality_gap),
                "max_bellman_error": repr(rec.max_bellman_error),
                "wall_ms": repr(rec.wall_ms) if timings else "0.0",
            }
        )
    return rows


def _cmd_validate(args) -> int:
    spec = _load(args.problem)
    report = validate_spec(spec)
    print(report.summary())
    return 0 if report.accepted else 1


def _cmd_run(args) -> int:
    spec = _load(args.problem)
    rng = np.random.default_rng(args.seed)
    samples = rng.normal(0.0, args.sample_stddev, size=(args.num_samples, spec.n))
    t0 = time.perf_counter()
    result = run(spec, samples, _run_config(args))
    wall = time.perf_counter() - t0
    out = _outdir(args)
    path = out / "run_trace.csv"
    path.write_text(
        bench.rows_to_csv(
            _trace_rows(result, args.timings),
            columns=["iteration", "picked_index", "J_P", "duality_gap", "max_bellman_error", "wall_ms"],
        ),
        encoding="utf-8",
    )
    print(
        f"converged={result.converged} iterations={result.iterations_used} "
        f"max_eps={result.max_error():.3e} wall={wall:.2f}s trace={path}"
    )
    return 0


def _cmd_certify(args) -> int:
    spec = _load(args.problem)
    rng = np.random.default_rng(args.seed)
    samples = rng.normal(0.0, args.sample_stddev, size=(args.num_samples, spec.n))
    t0 = time.perf_counter()
    result = run(spec, samples, _run_config(args))
    queries = rng.normal(0.0, args.sample_stddev, size=(args.cert_samples, spec.n))
    certs = [certify_m1(spec, result.V_hat, q, max_steps=args.max_steps) for q in queries]
    wall = time.perf_counter() - t0
    out = _outdir(args)
    path = out / "certificates.json"
    path.write_text(json.dumps([certificate_to_dict(c) for c in certs], indent=2) + "\n", encoding="utf-8")
    gaps = [c.gap for c in certs]
    print(
        f"converged={result.converged} iterations={result.iterations_used} "
        f"max_eps={result.max_error():.3e} certificates={len(certs)} "
        f"max_gap={max(gaps):.3e} wall={wall:.2f}s out={path}"
    )
    return 0


def _parse_dims(text):
    dims = []
    for part in text.split(","):
        n, _, m = part.strip().partition("x")
        dims.append((int(n), int(m)))
    return dims


def _cmd_bench_iterations(args) -> int:
    dims = _parse_dims(args.dims)
    M_list = [int(v) for v in args.M.split(",")]
    if any(M < 1 for M in M_list):
        raise ValidationError("sample counts must be at least 1")
    t0 = time.perf_counter()
    rows = bench.run_iterations_experiment(
        dims, M_list, delta=args.delta, seed=args.seed, max_iterations=args.max_iters, jobs=args.jobs
    )
    wall = time.perf_counter() - t0
    if not args.timings:
        for row in rows:
            row["wall_seconds"] = 0.0
    path = _write_table(_outdir(args), "iterations", rows, args.format)
    print(f"cells={len(rows)} max_iterations={max(r['iterations'] for r in rows)} wall={wall:.2f}s out={path}")
    return 0


def _cmd_bench_quality(args) -> int:
    t0 = time.perf_counter()
    row = bench.run_quality_experiment(
        n=args.n, m=args.m, M=args.M, iters=args.iters, eval_samples=args.eval_samples, seed=args.seed
    ).as_dict()
    wall = time.perf_counter() - t0
    if not args.timings:
        row["wall_seconds"] = 0.0
    path = _write_table(_outdir(args), "quality", [row], args.format)
    print(
        f"rbe_in={row['mean_rel_bellman_error_in']:.4f} rbe_out={row['mean_rel_bellman_error_out']:.4f} "
        f"subopt_in={row['subopt_bound_in']:.4f} subopt_out={row['subopt_bound_out']:.4f} "
        f"wall={wall:.2f}s out={path}"
    )
    return 0


def _cmd_ball_and_beam(args) -> int:
    budgets = [int(v) for v in args.budgets.split(",")]
    t0 = time.perf_counter()
    rollouts = bench.run_ball_and_beam(
        iters_list=budgets, seed=args.seed, M=args.M, rollout_steps=args.rollout_steps, grid_points=args.grid
    )
    wall = time.perf_counter() - t0
    out = _outdir(args)
    path = out / "trajectories.jsonl"
    with path.open("w", encoding="utf-8") as fh:
        for budget, traj in rollouts:
            fh.write(
                json.dumps(
                    {
                        "budget": budget,
                        "states": [np.asarray(s).tolist() for s in traj.states],
                        "inputs": [np.asarray(u).tolist() for u in traj.inputs],
                        "stage_costs": traj.stage_costs.tolist(),
                        "final_norm": float(np.linalg.norm(traj.states[-1])),
                    }
                )
                + "\n"
            )
    norms = {b: float(np.linalg.norm(t.states[-1])) for b, t in rollouts}
    print(f"budgets={budgets} final_norms={norms} wall={wall:.2f}s out={path}")
    return 0


def _cmd_value_iteration(args) -> int:
    spec = _load(args.problem)
    lo, hi = (float(v) for v in args.box.split(","))
    t0 = time.perf_counter()
    gvf = oracles.grid_value_iteration(
        spec, (lo, hi), state_pts=args.state_pts, input_pts=args.input_pts, stop_tol=args.stop_tol
    )
    wall = time.perf_counter() - t0
    out = _outdir(args)
    path = out / "grid_values.bin"
    oracles.save_grid_value_function(gvf, path)
    print(
        f"grid={'x'.join(str(c) for c in gvf.counts)} clamped={gvf.clamped_fraction:.3f} "
        f"value_at_origin={gvf.evaluate(np.zeros(spec.n)):.6f} wall={wall:.2f}s out={path}"
    )
    return 0


_COMMANDS = {
    "validate": _cmd_validate,
    "run": _cmd_run,
    "certify": _cmd_certify,
    "bench-iterations": _cmd_bench_iterations,
    "bench-quality": _cmd_bench_quality,
    "ball-and-beam": _cmd_ball_and_beam,
    "value-iteration": _cmd_value_iteration,
}


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except GddpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
