"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 numeric divergence,
3 verification or acceptance failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .diagnostics import fit_exponential_law
from .errors import ValidationError
from .harness.config import default_output_dir, load_config
from .harness.outputs import FORMATS, emit_outputs, read_trace, trace_summary, trace_to_csv, trace_to_jsonl, _plain
from .harness.runner import final_metrics, run_experiment, run_sweep
from .harness.verify import MUTATIONS, verify_suite

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_FAILED = 0, 1, 2, 3


def _out_dir(args, config=None) -> Path:
    if args.out:
        return Path(args.out)
    if config is not None and config.output_path:
        return Path(config.output_path)
    return default_output_dir()


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    trace = run_experiment(config)
    written = emit_outputs(trace, FORMATS, _out_dir(args, config), stem=Path(args.config).stem)
    report = {"config_digest": trace.config_digest, **final_metrics(config, trace)}
    report["files"] = {k: str(v) for k, v in written.items()}
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_DIVERGED if trace.diverged else EXIT_OK


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    try:
        grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"invalid JSON: {exc}", "grid") from None
    if not isinstance(grid, dict):
        raise ValidationError("grid must map config paths to value lists", "grid")
    result = run_sweep(config, grid)
    out = _out_dir(args, config)
    for row, trace in zip(result.summary, result.traces):
        if trace is not None:
            emit_outputs(trace, ("jsonl", "csv"), out, stem=f"{Path(args.config).stem}-{row['index']:03d}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.summary.json").write_text(json.dumps(_plain(result.summary), indent=2, sort_keys=True) + "\n")
    print(json.dumps(_plain(result.summary), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_probe(args) -> int:
    from .diagnostics import stability_comparison

    config = load_config(args.config)
    trace = run_experiment(config, snapshot_steps=(config.steps - 1,))
    old = trace.snapshots.get(config.steps - 1)
    alpha = args.alpha if args.alpha is not None else (config.rule.alpha or 0.1)
    comp = stability_comparison(config.task, trace.final_policy, alpha, args.k, args.beta, args.epsilon, policy_old=old)
    report = {
        "epsilon": args.epsilon,
        "alpha": alpha,
        "k": args.k,
        "beta": args.beta,
        "gamma_base": comp.gamma_base,
        "gamma_reg": comp.gamma_reg,
        "gamma_klcov": comp.gamma_klcov,
        "kappa_hat": comp.kappa_hat,
        "reg_le_base": comp.reg_le_base,
        "klcov_rel_diff": comp.klcov_rel_diff,
        "probes": [
            {"rule": p.rule, "gamma": p.gamma, "kl_at_gamma": p.kl_at_gamma, "kl_at_double": p.kl_at_double}
            for p in comp.probes
        ],
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    report = verify_suite(mutations=args.mutate or ())
    text = json.dumps(_plain(report), indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_FAILED


def cmd_fit(args) -> int:
    trace = read_trace(args.trace)
    fit = fit_exponential_law((r.avg_entropy, r.expected_reward) for r in trace.records)
    print(json.dumps({"a": fit.a, "b": fit.b, "r_squared": fit.r_squared, "points": len(trace.records)}, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    trace = read_trace(args.trace)
    if args.format == "csv":
        sys.stdout.write(trace_to_csv(trace))
    elif args.format == "jsonl":
        sys.stdout.write(trace_to_jsonl(trace))
    else:
        print(json.dumps(_plain(trace_summary(trace)), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_acceptance(args) -> int:
    from .acceptance import run_acceptance

    results = run_acceptance(args.only or None)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entropy-dynamics", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one experiment and write its trace")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a grid of experiments")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, help='JSON object, e.g. {"rule.alpha": [0.001, 0.01]}')
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("probe-stability", help="KL step margins at the end of a run")
    p.add_argument("--config", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--k", type=float, default=0.01)
    p.add_argument("--beta", type=float, default=1.0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--mutate", action="append", choices=MUTATIONS, help="self-check: break a formula on purpose")
    p.add_argument("--report", help="also write the JSON report here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("fit", help="fit R = -a exp(H) + b to a trace")
    p.add_argument("--trace", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("report", help="re-export a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--format", choices=("csv", "jsonl", "summary"), default="summary")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("acceptance", help="run the acceptance criteria")
    p.add_argument("--only", action="append", help="criterion id, e.g. c05 (repeatable)")
    p.set_defaults(func=cmd_acceptance)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
