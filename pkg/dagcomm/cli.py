"""
Command-line entry point: dagcomm {train, eval, ablate, trace, template}.

Exit codes: 0 success, 1 other failures, 2 configuration error, 3 numeric
abort, 4 unreadable checkpoint.
"""

import argparse
import json
import logging
import sys

from dagcomm.config import load_config, template_text, write_template
from dagcomm.errors import CheckpointError, ConfigError, DagCommError, NumericError
from dagcomm.harness import STUDIES, run_ablation, run_eval, run_training, write_trace

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4


def cmd_train(args) -> int:
    run_config = load_config(args.config)
    if args.episodes is not None:
        run_config = run_config.model_copy(
            update={"eval": run_config.eval.model_copy(update={"episodes": args.episodes})})
    manifest = run_training(run_config, out_dir=args.out, seed=args.seed,
                            progress=False if args.quiet else None)

    print("\n=== SUMMARY ===")
    print(f"Run id: {manifest['run_id']}")
    print(f"Epochs trained: {manifest['epochs']}")
    if manifest["final_metrics"]:
        final = manifest["final_metrics"]
        print(f"Final epoch success rate: {final['success_rate']:.3f}, avg steps {final['avg_steps']:.2f}, "
              f"C_comm {final['c_comm']:.2f}")
    if manifest["eval"]:
        ev = manifest["eval"]
        print(f"Evaluation success rate: {ev['success_rate']:.3f}, avg steps {ev['avg_steps']:.2f}, "
              f"C_comm {ev['c_comm']:.2f}, IEI {ev['iei']:.4f}, SEI {ev['sei']:.4f}")
    print(f"Convergence epoch: {manifest['convergence_epoch']}")
    print(f"Topology: {manifest['topology']}")
    print(f"Results written to {run_config.output.dir if args.out is None else args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = args.out if args.out is not None else f"{args.checkpoint}.eval.json"
    record = run_eval(args.checkpoint, episodes=args.episodes, seed=args.seed, out_path=out,
                      progress=not args.quiet)
    print(json.dumps(record.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    if args.seed is not None:
        base = base.model_copy(update={"train": base.train.model_copy(update={"seed": args.seed})})
    frame = run_ablation(args.study, base, out_dir=args.out, workers=args.workers)

    print(f"\n=== {args.study.upper()} STUDY ===")
    print(frame[["variant", "success_rate", "avg_steps", "c_comm", "eval_success_rate",
                 "eval_avg_steps", "convergence_epoch"]].to_string(index=False))
    return EXIT_OK


def cmd_trace(args) -> int:
    trace_path, ledger_path = write_trace(args.checkpoint, args.episodes, args.out, seed=args.seed)
    print(f"Step trace saved to {trace_path}")
    print(f"Ledger saved to {ledger_path}")
    return EXIT_OK


def cmd_template(args) -> int:
    if args.out is None:
        print(template_text())
    else:
        print(f"Template saved to {write_template(args.out)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dagcomm",
        description="Train and analyze multi-agent policies that communicate over directed acyclic graphs"
    )
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train one configuration")
    p.add_argument('--config', required=True, help='Path to the YAML run configuration')
    p.add_argument('--seed', type=int, default=None, help='Override train.seed')
    p.add_argument('--out', default=None, help='Override output.dir')
    p.add_argument('--episodes', type=int, default=None, help='Override eval.episodes')
    p.add_argument('-q', '--quiet', action='store_true', help='No progress bars')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint greedily")
    p.add_argument('--checkpoint', required=True, help='Path to a .bin checkpoint')
    p.add_argument('--episodes', type=int, default=100, help='Number of episodes (default: 100)')
    p.add_argument('--seed', type=int, default=0, help='Evaluation seed')
    p.add_argument('--out', default=None, help="JSON file for the record (default: <checkpoint>.eval.json)")
    p.add_argument('-q', '--quiet', action='store_true', help='No progress bars')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="Run a depth, order or loss study")
    p.add_argument('--study', required=True, choices=STUDIES)
    p.add_argument('--config', required=True, help='Path to the base YAML run configuration')
    p.add_argument('--seed', type=int, default=None, help='Override train.seed')
    p.add_argument('--out', default=None, help='Override output.dir')
    p.add_argument('--workers', type=int, default=1, help='Variants trained in parallel processes')
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("trace", help="Dump step traces and the ledger of a checkpoint")
    p.add_argument('--checkpoint', required=True, help='Path to a .bin checkpoint')
    p.add_argument('--episodes', type=int, default=10, help='Number of episodes')
    p.add_argument('--seed', type=int, default=0, help='Replay seed')
    p.add_argument('--out', default="trace", help='Output directory')
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("template", help="Write the documented configuration template")
    p.add_argument('--out', default=None, help='Output file (prints to stdout if not specified)')
    p.set_defaults(func=cmd_template)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DagCommError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    exit(main())
