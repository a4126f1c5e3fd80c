"""Command-line entry point wiring the pipeline stages.

Subcommands: gen-data, train-phase1, build-bank, extract-latents,
train-phase2, eval, sweep-lambda, sweep-k, gradcheck. Every command is
deterministic given its config and seed; failures exit nonzero with a
machine-readable JSON error on stderr (distinct codes per failure class).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .bank import BankCorruptionError, BankFormatError, BankStateError
from .checkpoint import CheckpointCorruptionError, CheckpointFormatError
from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_USAGE = 2          # argparse default for unknown flags
EXIT_MISSING_FILE = 3
EXIT_FORMAT = 4         # magic/version/CRC/width mismatches
EXIT_CONFIG = 5
EXIT_GRADCHECK = 6
EXIT_OTHER = 1


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def _csv_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v != ""]


def _csv_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v != ""]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phaseflow",
        description="behavior-prototype retrieval + phase-conditioned flow "
                    "policy on a synthetic manipulation bench")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", default=None, help="JSON run config")

    p = sub.add_parser("gen-data", help="generate expert demonstrations")
    add_config(p)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train-phase1", help="train the behavior encoder")
    add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("build-bank", help="build the prototype memory bank")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kappa", type=float, default=None)

    p = sub.add_parser("extract-latents", help="cache frozen-encoder latents")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-phase2", help="tune the prior + flow policy")
    add_config(p)
    p.add_argument("--checkpoint", required=True, help="phase-1 checkpoint")
    p.add_argument("--cache", required=True, help="latent cache from extract-latents")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("eval", help="roll out the policy and report metrics")
    p.add_argument("--bank", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lambda", dest="lambda_guidance", type=float, default=None)
    p.add_argument("--flow-steps", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--tasks", type=_csv_ints, default=None)
    p.add_argument("--proto-mode", choices=["retrieved", "random"],
                   default="retrieved")
    p.add_argument("--out", default=None, help="write metrics JSON here")

    for axis in ("lambda", "k"):
        p = sub.add_parser(f"sweep-{axis}", help=f"evaluate across {axis} values")
        p.add_argument("--values", type=_csv_floats, required=True)
        p.add_argument("--bank", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--episodes", type=int, default=20)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--tasks", type=_csv_ints, default=None)
        p.add_argument("--out", required=True, help="CSV output path")

    p = sub.add_parser("gradcheck", help="finite-difference checks on all losses")
    p.add_argument("--all", action="store_true")
    p.add_argument("--tolerance", type=float, default=1e-3)

    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            cfg = load_config(args.config)
            manifest = pipeline.cmd_gen_data(cfg, args.out_dir)
            print(json.dumps({"episodes": manifest["n_episodes"],
                              "fingerprint": manifest["fingerprint"]}))
        elif args.command == "train-phase1":
            cfg = load_config(args.config)
            path = pipeline.cmd_train_phase1(cfg, args.data, args.out_dir)
            print(json.dumps({"checkpoint": path}))
        elif args.command == "build-bank":
            bank = pipeline.cmd_build_bank(args.checkpoint, args.data, args.out,
                                           kappa=args.kappa)
            print(json.dumps({"bank": args.out, "entries": len(bank.entries)}))
        elif args.command == "extract-latents":
            cache = pipeline.cmd_extract_latents(args.checkpoint, args.data,
                                                 args.out)
            print(json.dumps({"cache": args.out,
                              "episodes": len(cache.episodes())}))
        elif args.command == "train-phase2":
            cfg = load_config(args.config) if args.config else None
            path = pipeline.cmd_train_phase2(cfg, args.checkpoint, args.cache,
                                             args.data, args.out_dir)
            print(json.dumps({"checkpoint": path}))
        elif args.command == "eval":
            metrics = pipeline.cmd_eval(
                args.checkpoint, args.bank, args.lambda_guidance,
                args.flow_steps, args.episodes, args.seed, tasks=args.tasks,
                k=args.k, proto_mode=args.proto_mode)
            text = json.dumps(metrics, indent=1, sort_keys=True)
            if args.out:
                with open(args.out, "w") as f:
                    f.write(text + "\n")
            print(text)
        elif args.command in ("sweep-lambda", "sweep-k"):
            axis = args.command.split("-")[1]
            rows = pipeline.cmd_sweep(args.checkpoint, args.bank, axis,
                                      args.values, args.episodes, args.seed,
                                      tasks=args.tasks)
            pipeline.write_sweep_csv(args.out, axis, rows)
            print(json.dumps({"csv": args.out, "rows": len(rows)}))
        elif args.command == "gradcheck":
            results = pipeline.gradcheck_all(max_rel_err=args.tolerance)
            print(f"{'loss':14s} {'max_rel_err':>12s} {'coords':>7s} verdict")
            ok = True
            for name, res in results.items():
                verdict = "pass" if res["pass"] else "FAIL"
                ok = ok and res["pass"]
                print(f"{name:14s} {res['err']:12.3e} {res['coords']:7d} {verdict}")
            if not ok:
                return EXIT_GRADCHECK
        return EXIT_OK
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING_FILE, "missing_file", str(e))
    except (CheckpointFormatError, CheckpointCorruptionError, BankFormatError,
            BankCorruptionError, BankStateError) as e:
        return _fail(EXIT_FORMAT, type(e).__name__, str(e))
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", str(e))
    except (ValueError, RuntimeError) as e:
        return _fail(EXIT_OTHER, type(e).__name__, str(e))


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
