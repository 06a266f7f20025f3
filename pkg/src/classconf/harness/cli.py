"""Command-line entry point: ``classconf {gen-data,train,eval,ablate,plots}``.

Every config key is also a flag (``--learning-rate 0.05``,
``--methods ce,cact``); flags override the values from ``--config``. Output
goes to ``<output_dir>/<command>-<config hash>/`` together with the resolved
config.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from ..data import write_csv, write_manifest
from ..exceptions import ClassconfError, DivergenceError
from .config import ABLATION_AXES, ExperimentConfig, coerce
from .runner import (METRIC_COLUMNS, aggregate_rows, emit_plot_data, load_data, run_ablation,
                     run_benchmark, write_rows)

COMMANDS = ("gen-data", "train", "eval", "ablate", "plots")


def _add_config_flags(parser):
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(flag, dest="cfg_" + f.name, default=None, metavar="VALUE",
                           help=f"override {f.name}")


def build_parser():
    parser = argparse.ArgumentParser(prog="classconf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--run-dir", help="write here instead of the hashed run directory")
        if name in ("eval", "plots"):
            p.add_argument("--from-run", help="reuse models saved by a previous 'train' run")
        if name == "ablate":
            p.add_argument("--axis", required=True, choices=ABLATION_AXES)
            p.add_argument("--values", required=True, help="comma-separated values")
        _add_config_flags(p)
    return parser


def resolve_config(args):
    data = {}
    if args.config:
        with open(args.config) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ClassconfError(f"{args.config}: not valid JSON ({exc})") from None
        ExperimentConfig.from_dict(data)  # reject unknown keys before merging
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(args, "cfg_" + f.name)
        if value is not None:
            data[f.name] = coerce(f.name, value)
    return ExperimentConfig.from_dict(data)


def prepare_run_dir(cfg, command, explicit=None, extra=""):
    run_dir = explicit or os.path.join(
        cfg.output_dir, f"{command}-{cfg.digest()}" + (f"-{extra}" if extra else ""))
    os.makedirs(run_dir, exist_ok=True)
    cfg.save(os.path.join(run_dir, "config.json"))
    return run_dir


def cmd_gen_data(cfg, run_dir, args):
    for seed in cfg.seeds:
        out = os.path.join(run_dir, f"seed{seed}")
        os.makedirs(out, exist_ok=True)
        train, val, cal, test = load_data(cfg, seed)
        splits = {"train": train, "val": val, "cal": cal, "test": test}
        for name, ds in splits.items():
            write_csv(ds, os.path.join(out, f"{name}.csv"), cfg.label_column)
        write_manifest(splits, {"data": seed}, cfg.gamma, os.path.join(out, "manifest.json"))


def _benchmark(cfg, run_dir, args, save_models):
    models = None
    if save_models:
        models = os.path.join(run_dir, "models")
        os.makedirs(models, exist_ok=True)
    load_dir = None
    if getattr(args, "from_run", None):
        load_dir = os.path.join(args.from_run, "models")
        if not os.path.isdir(load_dir):
            raise ClassconfError(f"no saved models under {args.from_run}")
    return run_benchmark(cfg, models_dir=models, load_dir=load_dir)


def _write_metrics(run_dir, rows):
    write_rows(os.path.join(run_dir, "metrics.csv"), rows, METRIC_COLUMNS)
    summary = aggregate_rows(rows)
    write_rows(os.path.join(run_dir, "summary.csv"), summary)
    return summary


def cmd_train(cfg, run_dir, args):
    rows, logs, _ = _benchmark(cfg, run_dir, args, save_models=True)
    for (method, seed), hist in sorted(logs.items()):
        write_rows(os.path.join(run_dir, f"log_{method}_seed{seed}.csv"), _flat_log(hist))
    _write_metrics(run_dir, rows)


def _flat_log(history):
    out = []
    for rec in history:
        row = {k: v for k, v in rec.items() if not isinstance(v, list)}
        for key in ("lam", "rho", "d_hat"):
            if key in rec:
                for y, v in enumerate(rec[key]):
                    row[f"{key}_{y}"] = v
        out.append(row)
    cols = []
    for row in out:
        cols.extend(c for c in row if c not in cols)
    return [{c: r.get(c, "") for c in cols} for r in out]


def cmd_eval(cfg, run_dir, args):
    rows, _, _ = _benchmark(cfg, run_dir, args, save_models=False)
    summary = _write_metrics(run_dir, rows)
    for row in summary:
        print(f"{row['method']:>8} {row['score']:>4} {row['mode']:>7} alpha={row['alpha']:<5} "
              f"size={row['size']:.3f} cov={row['coverage']:.3f} covgap={row['cov_gap']:.2f}")


def cmd_ablate(cfg, run_dir, args):
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    rows = run_ablation(cfg, args.axis, values)
    write_rows(os.path.join(run_dir, f"ablation_{args.axis}.csv"), rows,
               ["axis", "value"] + METRIC_COLUMNS)


def cmd_plots(cfg, run_dir, args):
    rows, logs, per_class = _benchmark(cfg, run_dir, args, save_models=False)
    emit_plot_data(logs, per_class, rows, os.path.join(run_dir, "plots"))


def dump_state(state, path):
    arrays = {k: np.asarray(v) for k, v in state.items() if v is not None}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "plots": cmd_plots}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    run_dir = None
    try:
        cfg = resolve_config(args)
        extra = args.axis if args.command == "ablate" else ""
        run_dir = prepare_run_dir(cfg, args.command, args.run_dir, extra)
        print(cfg.to_json(), end="")
        HANDLERS[args.command](cfg, run_dir, args)
        print(f"outputs in {run_dir}")
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if run_dir is not None:
            path = os.path.join(run_dir, "divergence_state.npz")
            dump_state(exc.state, path)
            print(f"state dumped to {path}", file=sys.stderr)
        return 3
    except ClassconfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
