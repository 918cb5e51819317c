"""Command-line interface.

Subcommands: generate, train, eval, report, bet-inspect. Exit codes:
0 success, 2 config error, 3 IO/data error, 4 numerical abort, 1 anything
else. SEGBET_OUT sets the default output root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError, NumericalAbort, SegbetError
from . import experiment
from .training import TrainConfig, run_training
from .synthdata import read_dataset

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _default_out() -> str:
    return os.environ.get("SEGBET_OUT", "runs")


def _add_generate(sub):
    p = sub.add_parser("generate", help="write a synthetic dataset to disk")
    p.add_argument("--spec", default=None, help="SceneSpec JSON file (default: built-in benchmark)")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_generate)


def _add_train(sub):
    p = sub.add_parser("train", help="train one or more (method, seed) runs")
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--method", default=None, help="restrict to / select one method")
    p.add_argument("--seed", type=int, default=None, help="restrict to / select one seed")
    p.add_argument("--dataset", default=None, help="training dataset dir (no-config mode)")
    p.add_argument("--val-dataset", default=None, help="validation dataset dir (no-config mode)")
    p.add_argument("--out", default=None, help="output root")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", action="store_true", help="resume runs from training_state.pt")
    p.set_defaults(func=cmd_train)


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate a segmenter checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset dir, or a root containing splits")
    p.add_argument("--split", default=None, help="subdirectory when --dataset is a split root")
    p.add_argument("--out", default=None, help="report base path (writes .csv and .json)")
    p.set_defaults(func=cmd_eval)


def _add_report(sub):
    p = sub.add_parser("report", help="aggregate run directories into a comparison report")
    p.add_argument("--experiment", required=True, help="experiment output root")
    p.add_argument("--audit", action="store_true", help="re-verify 10%% of cells from checkpoints")
    p.add_argument("--panels", type=int, default=2, help="betting-map panels per gambling run")
    p.set_defaults(func=cmd_report)


def _add_bet_inspect(sub):
    p = sub.add_parser("bet-inspect", help="render a betting map and list top bets")
    p.add_argument("--checkpoint", required=True, help="gambler checkpoint")
    p.add_argument("--segmenter", required=True, help="segmenter checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--out", default=None, help="betting-map PNG path")
    p.set_defaults(func=cmd_bet_inspect)


def cmd_generate(args) -> int:
    ds = experiment.generate_dataset(args.spec, args.n, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.config is not None:
        cfg = experiment.load_experiment_config(args.config)
        methods = [args.method] if args.method else None
        seeds = [args.seed] if args.seed is not None else None
        if args.out:
            cfg.out_dir = args.out
        logs = experiment.run_experiment(cfg, methods=methods, seeds=seeds, resume=args.resume)
        for (method, seed), log in logs.items():
            print(f"{method} seed {seed}: {len(log.records)} eval points "
                  f"-> {experiment.run_dir(cfg.out_dir, method, seed)}")
        return 0
    if args.dataset is None or args.method is None:
        raise ConfigError("train needs either --config or both --dataset and --method")
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    cfg = experiment.make_train_config(args.method, args.seed or 0, overrides)
    train_ds = read_dataset(args.dataset)
    val_dir = args.val_dataset or args.dataset
    val_ds = read_dataset(val_dir)
    out = Path(args.out or _default_out()) / f"{args.method}_seed{cfg.seed}"
    log = run_training(cfg, train_ds.samples(), val_ds.samples(), out, resume=args.resume,
                       meta={"train_dataset": str(args.dataset), "val_dataset": str(val_dir)})
    print(f"{args.method} seed {cfg.seed}: {len(log.records)} eval points -> {out}")
    return 0


def cmd_eval(args) -> int:
    dataset = Path(args.dataset)
    if args.split is not None:
        dataset = dataset / args.split
    out_base = args.out or str(Path(_default_out()) / "eval_report")
    Path(out_base).parent.mkdir(parents=True, exist_ok=True)
    report = experiment.evaluate_checkpoint(args.checkpoint, dataset, out_base)
    print(json.dumps({"mean_iou": report.mean_iou, "mean_bf": report.mean_bf,
                      "mean_hausdorff": report.mean_hausdorff,
                      "confidence_mean": report.confidence_mean}, indent=2))
    return 0


def cmd_report(args) -> int:
    payload = experiment.build_report(args.experiment,
                                      audit_fraction=0.1 if args.audit else 0.0,
                                      panels=args.panels)
    print(f"report over {len(payload['rows'])} runs "
          f"({len(payload['gaps'])} gaps) -> {Path(args.experiment) / 'report.json'}")
    if payload["audit"] is not None and not payload["audit"]["all_ok"]:
        print("audit FAILED: logged metrics do not match recomputation", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def cmd_bet_inspect(args) -> int:
    bets, _, top, _ = experiment.inspect_bets(args.checkpoint, args.segmenter,
                                              args.dataset, args.index, args.topk)
    out = args.out or str(Path(_default_out()) / f"bets_{args.index:04d}.png")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    experiment.write_betting_png(bets, out)
    print(f"betting map -> {out}")
    print("row,col,bet,cross_entropy")
    for row, col, bet, ce in top:
        print(f"{row},{col},{bet:.6g},{ce:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segbet",
                                     description="gambling adversarial segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_generate(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_report(sub)
    _add_bet_inspect(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalAbort as exc:
        print(f"numerical abort: {exc} (diagnostic: {exc.checkpoint_path})", file=sys.stderr)
        return EXIT_NUMERIC
    except SegbetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
