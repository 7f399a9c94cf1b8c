"""``meshgrade`` command line.

Errors end the process with one line on stderr of the form
``meshgrade: <ErrorClass>: <message>`` and exit code 1 (usage), 2 (data) or
3 (numeric).  Files and directories created by a failing command are removed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import shutil
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .dataset import load_dataset, make_synthetic, write_dataset
from .errors import DataError, MeshgradeError, SchemaError, UsageError
from .graph import MODES, build_element_graph, convert_files, element_adjacency
from .layers import ModelConfig
from .mesh import load_mesh, mesh_quality_report
from .train import (
    TrainConfig,
    checkpoint_from_json,
    checkpoint_to_json,
    evaluate,
    load_config,
    log_to_csv,
    split_dataset,
    train,
)

ABLATION_ACTIVATIONS = ("elu", "relu", "gelu", "leaky_relu")
ABLATION_RATIOS = (0.2, 0.3, 0.4)
SPLITS = ("train", "val", "test", "all")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class _Outputs:
    """Remembers paths a command creates so they can be removed on failure."""

    def __init__(self):
        self.created = []

    def claim(self, path):
        path = Path(path)
        if not path.exists():
            self.created.append(path)
        return path

    def rollback(self):
        for path in reversed(self.created):
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            elif path.exists():
                path.unlink()


def _grid_arg(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    return w, h


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _read_config(path):
    if path is None:
        return ModelConfig(), TrainConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("config must be a flat JSON object")
    return load_config(doc)


def _write_text(out, path, text):
    path = out.claim(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_convert(args, out):
    graphs = convert_files(args.inputs, args.mode, args.radius, args.jobs)
    directory = out.claim(args.out)
    directory.mkdir(parents=True, exist_ok=True)
    suffix = ".mqeg" if args.binary else ".json"
    names = [Path(p).stem for p in args.inputs]
    if len(set(names)) != len(names):
        raise UsageError("input files must have distinct names")
    for name, g in zip(names, graphs):
        g.save(out.claim(directory / f"{name}{suffix}"))
        print(f"{name}\t{args.mode}\tnodes={g.n}\tedges={g.num_edges}")


def cmd_metrics(args, out):
    report = mesh_quality_report(load_mesh(args.input))
    _write_text(out, args.out, report.to_csv())
    for name, agg in report.aggregates.items():
        print(f"{name}\tmin={agg['min']:.6g}\tmean={agg['mean']:.6g}\tmax={agg['max']:.6g}")


def cmd_synth(args, out):
    ds = make_synthetic(args.per_label, args.grid, args.seed, args.profile, args.jobs)
    write_dataset(ds, out.claim(args.out))
    print(f"wrote {len(ds)} graphs to {args.out}")


def cmd_train(args, out):
    mcfg, tcfg = _read_config(args.config)
    if args.seed is not None:
        tcfg.seed = args.seed
    ds = load_dataset(args.data)
    res = train(ds, mcfg, tcfg)
    extra = {"split_seed": tcfg.seed, "best_epoch": res.best_epoch, "dataset": ds.provenance}
    _write_text(out, args.out, checkpoint_to_json(res.model, tcfg, extra=extra))
    if args.log:
        _write_text(out, args.log, log_to_csv(res.log))
    best = res.log[res.best_epoch - 1]
    print(f"best epoch {res.best_epoch} of {len(res.log)}, val_loss {best['val_loss']:.6f}")


def _split_indices(labels, seed, which):
    if which == "all":
        return np.arange(len(labels))
    return split_dataset(labels, seed)[SPLITS.index(which)]


def cmd_eval(args, out):
    model, doc = checkpoint_from_json(Path(args.ckpt).read_text(encoding="utf-8"))
    ds = load_dataset(args.data)
    idx = _split_indices(ds.labels, int(doc.get("split_seed", 0)), args.split)
    report = evaluate(model, [ds.graphs[i] for i in idx], ds.labels[idx])
    directory = out.claim(args.out)
    directory.mkdir(parents=True, exist_ok=True)
    _write_text(out, directory / "confusion.csv", report.confusion_csv())
    _write_text(out, directory / "summary.csv", report.summary_csv())
    sys.stdout.write(report.summary_csv())


def cmd_bench_convert(args, out):
    mesh = load_mesh(args.input)
    if args.adjacency_only:
        def run():
            return element_adjacency(mesh, args.diagonal)
    else:
        def run():
            return build_element_graph(mesh, args.diagonal)
    run()  # warm-up
    times = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    result = {
        "cells": mesh.n_cells,
        "diagonal": args.diagonal,
        "repeat": args.repeat,
        "mean_s": statistics.fmean(times),
        "std_s": statistics.pstdev(times),
        "median_s": statistics.median(times),
        "min_s": min(times),
    }
    text = json.dumps(result)
    if args.out:
        _write_text(out, args.out, text + "\n")
    print(text)


def cmd_ablate(args, out):
    mcfg, tcfg = _read_config(args.config)
    if args.max_epochs is not None:
        tcfg.max_epochs = args.max_epochs
    ds = load_dataset(args.data)
    split = split_dataset(ds.labels, tcfg.seed)
    test = split[2]
    rows = []
    for ratio in ABLATION_RATIOS:
        row = [f"{ratio:g}"]
        for act in ABLATION_ACTIVATIONS:
            cfg = ModelConfig(**{**mcfg.to_dict(), "activation": act, "pooling_ratio": ratio})
            res = train(ds, cfg, tcfg, split)
            if not all(math.isfinite(r["train_loss"]) for r in res.log):
                raise DataError(f"non-finite loss for {act} at ratio {ratio}")
            acc = evaluate(res.model, [ds.graphs[i] for i in test], ds.labels[test]).accuracy
            row.append(f"{100 * acc:.2f}")
            print(f"ratio={ratio:g}\tactivation={act}\taccuracy={100 * acc:.2f}")
        rows.append(row)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pooling_ratio", *ABLATION_ACTIVATIONS])
    w.writerows(rows)
    _write_text(out, args.out, buf.getvalue())


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="meshgrade", description="Structured mesh quality evaluation with graph networks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("convert", help="convert mesh files to graph files")
    c.add_argument("inputs", nargs="+", metavar="IN", help="mesh files (.json native, otherwise Plot3D)")
    c.add_argument("--mode", choices=MODES, required=True, help="graph representation")
    c.add_argument("--radius", type=float, default=None, help="proximity radius for point mode (default 1.5x min edge)")
    c.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
    c.add_argument("--binary", action="store_true", help="write the compact .mqeg format")
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(func=cmd_convert)

    m = sub.add_parser("metrics", help="per-cell quality report as CSV")
    m.add_argument("input", metavar="IN", help="mesh file")
    m.add_argument("--out", required=True, help="CSV path")
    m.set_defaults(func=cmd_metrics)

    s = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    s.add_argument("--per-label", type=_positive_int, required=True, help="meshes per label")
    s.add_argument("--grid", type=_grid_arg, default=(17, 17), help="nodes per mesh as WxH (default 17x17)")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--profile", choices=("annulus", "rect"), default="annulus", help="base geometry")
    s.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True, help="dataset directory with manifest.json")
    t.add_argument("--config", default=None, help="flat JSON of model and training settings")
    t.add_argument("--seed", type=int, default=None, help="override the configured seed")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", default=None, help="per-epoch CSV log path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="confusion matrix and summary for a checkpoint")
    e.add_argument("--ckpt", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", choices=SPLITS, default="test", help="which split to score")
    e.add_argument("--out", required=True, help="report directory")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-convert", help="time element-graph conversion")
    b.add_argument("input", metavar="IN", help="mesh file")
    b.add_argument("--repeat", type=_positive_int, default=5, help="timed repetitions")
    b.add_argument("--diagonal", choices=("zero", "ones"), default="zero",
                   help="node-adjacency diagonal; 'ones' is the slower reference formulation")
    b.add_argument("--adjacency-only", action="store_true", help="time the sparse products without cell features")
    b.add_argument("--out", default=None, help="also write the JSON result here")
    b.set_defaults(func=cmd_bench_convert)

    a = sub.add_parser("ablate", help="activation x pooling-ratio accuracy grid")
    a.add_argument("--data", required=True, help="dataset directory")
    a.add_argument("--config", default=None, help="base settings as flat JSON")
    a.add_argument("--max-epochs", type=_positive_int, default=None, help="override max_epochs")
    a.add_argument("--out", required=True, help="CSV path")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    out = _Outputs()
    try:
        args = build_parser().parse_args(argv)
        args.func(args, out)
    except SystemExit as exc:
        # --help exits 0 through argparse
        return exc.code if isinstance(exc.code, int) else 0
    except MeshgradeError as exc:
        out.rollback()
        _fail(exc, exc.exit_code)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        out.rollback()
        _fail(exc, UsageError.exit_code)
        return UsageError.exit_code
    except OSError as exc:
        out.rollback()
        _fail(exc, DataError.exit_code)
        return DataError.exit_code
    return 0


def _fail(exc, code):
    message = " ".join(str(exc).split())
    print(f"meshgrade: {type(exc).__name__}: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
