"""Batch command-line front end.

Every subcommand prints exactly one JSON payload on stdout and human
diagnostics on stderr. Exit codes: 0 success / all checks pass, 1 a check or
training run failed, 2 usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench, checks, gradcheck, metrics, toy

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _emit(payload: dict) -> None:
    print(json.dumps(payload))


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_check(args) -> int:
    if args.list:
        _emit({"checks": checks.check_names()})
        return EXIT_OK
    results = checks.run_checks(seed=args.seed)
    ok = all(r["passed"] for r in results)
    for r in results:
        _say(f"[{'pass' if r['passed'] else 'FAIL'}] {r['name']}: {r['detail']}")
    _emit({"checks": results, "passed": ok})
    if not ok:
        failing = ", ".join(r["name"] for r in results if not r["passed"])
        _say(f"failing properties: {failing}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    names = gradcheck.layer_names() if args.layer == "all" else [args.layer]
    if any(n not in gradcheck.layer_names() for n in names):
        _say(f"unknown layer {args.layer!r}; known: {', '.join(gradcheck.layer_names())}")
        _emit({"error": f"unknown layer {args.layer!r}"})
        return EXIT_USAGE
    reports = []
    for name in names:
        reports.extend(gradcheck.run_layer_check(name, seed=args.seed, tol=args.tol, step=args.step))
    ok = all(r.passed for r in reports)
    for r in reports:
        _say(
            f"[{'pass' if r.passed else 'FAIL'}] {r.layer_name}: "
            f"max_rel={r.max_rel_error:.3e} worst={r.worst_coordinate}"
        )
    _emit(
        {
            "reports": [
                {
                    "layer_name": r.layer_name,
                    "max_rel_error": r.max_rel_error,
                    "worst_coordinate": [int(i) for i in r.worst_coordinate],
                    "step": r.step,
                    "passed": r.passed,
                }
                for r in reports
            ],
            "tolerance": args.tol,
            "passed": ok,
        }
    )
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(args) -> int:
    if args.iters < 1:
        _say("--iters must be >= 1")
        return EXIT_USAGE
    if min(args.n, args.c, args.height, args.width) < 1:
        _say("dimensions must be >= 1")
        return EXIT_USAGE
    report = bench.run_bench(
        args.n, args.c, args.height, args.width,
        iters=args.iters, threads=args.threads, seed=args.seed,
    )
    _say(
        f"gnap/gap time ratio {report['gnap_over_gap_time_ratio']:.2f} "
        f"(reference path {report['gnap_reference_over_gap_time_ratio']:.2f}) "
        f"on shape {tuple(report['shape'])}"
    )
    _emit(report)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    config = toy.ToyConfig(head=args.head, seed=args.seed, steps=args.steps)
    if args.fasterfc:
        config = config.fasterfc()
    try:
        log = toy.train(config)
    except toy.TrainingDivergedError as exc:
        _say(str(exc))
        _emit({"error": "diverged", "step": exc.step})
        return EXIT_FAIL

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / f"train_{args.head}_seed{args.seed}.jsonl"
    log_path.write_text("\n".join(log.jsonl_lines()) + "\n", encoding="utf-8")

    pairs = toy.make_eval_pairs(config, args.pairs)
    scores = toy.embed_pairs(log.params, pairs)
    scores_path = out_dir / f"scores_{args.head}_seed{args.seed}.csv"
    metrics.write_scores_csv(scores_path, scores)

    report = metrics.compute_report(scores, fpr_targets=args.fpr or [0.01, 0.001])
    for line in report.human_lines():
        _say(line)
    _say(f"loss {log.losses[0]:.4f} -> {log.losses[-1]:.4f} over {config.steps} steps")
    _emit(
        {
            "head": args.head,
            "fasterfc": bool(args.fasterfc),
            "seed": args.seed,
            "steps": config.steps,
            "initial_loss": log.losses[0],
            "final_loss": log.losses[-1],
            "metrics": report.to_json_dict(),
            "files": {"log": str(log_path), "scores": str(scores_path)},
        }
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        scores = metrics.read_scores_csv(args.scores)
        report = metrics.compute_report(scores, fpr_targets=args.fpr or [0.001])
    except FileNotFoundError:
        _say(f"no such file: {args.scores}")
        _emit({"error": f"no such file: {args.scores}"})
        return EXIT_USAGE
    except ValueError as exc:
        _say(str(exc))
        _emit({"error": str(exc)})
        return EXIT_USAGE
    for line in report.human_lines():
        _say(line)
    _emit(report.to_json_dict())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gnap",
        description="norm-aware pooling toolkit: checks, gradient certification, "
        "benchmarks, toy training, score evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run the invariant suite on seeded fixtures")
    p.add_argument("--list", action="store_true", help="list property names without running")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("gradcheck", help="certify backward passes against finite differences")
    p.add_argument("--layer", default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)
    p.add_argument("--step", type=float, default=gradcheck.DEFAULT_STEP)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="throughput of the block next to plain pooling")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--c", type=int, default=512)
    p.add_argument("--h", type=int, default=7, dest="height")
    p.add_argument("--w", type=int, default=7, dest="width")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("train-toy", help="train the toy network with a chosen head")
    p.add_argument("--head", choices=toy.HEADS, required=True)
    p.add_argument("--fasterfc", action="store_true", help="10x classifier lr, 5e-4 weight decay")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--pairs", type=int, default=400)
    p.add_argument("--fpr", type=float, action="append")
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("eval", help="compute verification metrics from a score CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--fpr", type=float, action="append")
    p.set_defaults(fn=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
