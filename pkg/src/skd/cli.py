"""Command line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 integrity
error. Dataset roots default to SKD_DATA_ROOT, run stores to SKD_RUNS_DIR.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, DataError, IntegrityError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train a teacher from scratch and save its checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--runs-dir", default=None)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("distill", help="run one distillation (or baseline) experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=("stagewise", "simultaneous", "traditional", "fsp", "at", "none"))
    p.add_argument("--fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--runs-dir", default=None)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a validation split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config describing the dataset")
    p.add_argument("--dataset", help="registered dataset name (alternative to --config)")
    p.add_argument("--data-root", default=None)
    p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("report", help="render the method x fraction result table")
    p.add_argument("--dataset", required=True)
    p.add_argument("--layout", required=True,
                   choices=("classification_table", "segmentation_table"))
    p.add_argument("--runs-dir", default=None)
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.add_argument("--format", choices=("csv", "text"), default="text")
    return parser


def _cmd_train_teacher(args) -> int:
    from .harness import load_config_file, run_experiment

    raw = load_config_file(args.config)
    raw["method"] = "none"
    if "teacher" in raw:
        raw["student"] = raw["teacher"]
    record = run_experiment(raw, runs_dir=args.runs_dir, force=args.force)
    print(json.dumps({"digest": record.digest, "metric": record.final_metric,
                      "checkpoint": record.checkpoint_paths[-1]}))
    return 0


def _cmd_distill(args) -> int:
    from .harness import load_config_file, run_experiment

    raw = load_config_file(args.config)
    for key in ("method", "fraction", "seed"):
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    record = run_experiment(raw, runs_dir=args.runs_dir, force=args.force)
    print(json.dumps({"digest": record.digest, "metric_name": record.metric_name,
                      "metric": record.final_metric,
                      "checkpoint": record.checkpoint_paths[-1]}))
    return 0


def _cmd_evaluate(args) -> int:
    from .data import dataset_spec, load_dataset
    from .harness import _build_splits, load_config_file, resolve_config
    from .models import load_checkpoint
    from .training import evaluate

    net = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = resolve_config(load_config_file(args.config))
        val = _build_splits(cfg).val
    elif args.dataset:
        root = args.data_root or os.environ.get("SKD_DATA_ROOT")
        val = load_dataset(dataset_spec(args.dataset, root=root), "val")
    else:
        raise ConfigError("evaluate needs --config or --dataset")
    metric = evaluate(net, val, args.batch_size)
    name = "mean_iou" if val.task == "segmentation" else "top1_accuracy"
    print(json.dumps({"metric_name": name, "metric": metric}))
    return 0


def _cmd_report(args) -> int:
    from .harness import RunStore, render_report

    store = RunStore(args.runs_dir)
    records = [r for r in store.iter_records() if r.config["dataset"] == args.dataset]
    csv_text, aligned = render_report(records, args.layout)
    if args.out:
        with open(args.out, "w") as f:
            f.write(csv_text)
        print(f"wrote {args.out}")
    else:
        print(csv_text if args.format == "csv" else aligned, end="")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train-teacher": _cmd_train_teacher,
        "distill": _cmd_distill,
        "evaluate": _cmd_evaluate,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except IntegrityError as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
