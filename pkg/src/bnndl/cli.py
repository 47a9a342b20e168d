"""Command-line entry point: ``bnndl <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
abort. Failures print one line ``error: <category>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import cost, fused
from .distloss import (collect_channel_stats, diagnostics_csv, export_diagnostics, histogram_rows)
from .errors import BNNError, ConfigError, DataError
from .train import checkpoint
from .train.config import RunConfig, load_config, parse_config
from .train.data import Normalizer, load_dataset
from .train.runner import SWEEP_AXES, evaluate, record_preactivations, run, sweep

log = logging.getLogger("bnndl")


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _run_config(args) -> RunConfig:
    ov = _overrides(args.set)
    for flag, key in (("seed", "train.seed"), ("epochs", "train.epochs"), ("dataset", "data.dataset"),
                      ("data_path", "data.path")):
        value = getattr(args, flag, None)
        if value is not None:
            ov[key] = str(value)
    if args.config:
        return load_config(args.config, ov)
    return parse_config("", ov)


def _out_dir(args) -> Path | None:
    if not getattr(args, "out_dir", None):
        return None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_args(out: Path | None, args) -> None:
    """Record the fully resolved command options next to its outputs."""
    if out is None:
        return
    lines = ["[command]", f"name = {args.command}"]
    for k in sorted(vars(args)):
        if k in ("command", "func"):
            continue
        lines.append(f"{k} = {getattr(args, k)}")
    (out / "command.resolved.ini").write_text("\n".join(lines) + "\n")


def _test_split(ck_spec, dataset: str, path: str | None, n_test: int, limit: int):
    _, test = load_dataset(dataset, path, n_test=n_test, size=ck_spec.input_size, channels=ck_spec.in_channels)
    test = test.subset(limit)
    if test.shape != (ck_spec.in_channels, ck_spec.input_size, ck_spec.input_size):
        raise DataError(f"dataset images {test.shape} do not match the network input")
    return test


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- commands ------------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    rec = run(cfg, out, timing=args.timing)
    if out is None:
        sys.stdout.write(rec.metrics_csv())
    print(f"final_acc {rec.final_acc:.4f} best_acc {rec.best_acc:.4f} best_epoch {rec.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    ck = checkpoint.load(args.ckpt)
    net = ck.build(np.dtype(args.dtype).type)
    test = _test_split(ck.spec, args.dataset, args.data_path, args.n_test, args.limit)
    norm = Normalizer(np.asarray(ck.meta["norm_mean"]), np.asarray(ck.meta["norm_std"]))
    acc = evaluate(net, norm(test.images, net.dtype), test.labels)
    out = _out_dir(args)
    _echo_args(out, args)
    if out is not None:
        (out / "eval.csv").write_text(_csv([[len(test), repr(acc)]], ("n", "accuracy")))
    print(f"accuracy {acc:.6f} n {len(test)}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    out = _out_dir(args)
    rows = sweep(cfg, args.axis, values, out_dir=out)
    text = _csv([[r["axis"], r["value"], repr(r["final_acc"]), repr(r["best_acc"]), r["best_epoch"]]
                 for r in rows], ("axis", "value", "final_acc", "best_acc", "best_epoch"))
    if out is not None:
        (out / "sweep.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_fuse(args) -> int:
    ck = checkpoint.load(args.ckpt)
    model = fused.compile_checkpoint(ck, np.dtype(args.dtype).type)
    fused.save(args.out, model)
    print(f"wrote {args.out} ({len(model.layers)} layers)")
    return 0


def _read_raw_batch(folder: Path, model: fused.FusedModel):
    size = model.in_channels * model.input_size * model.input_size
    files = sorted(p for p in folder.iterdir() if p.is_file())
    if not files:
        raise DataError(f"no input files in {folder}")
    imgs = []
    for p in files:
        raw = p.read_bytes()
        if len(raw) != size:
            raise DataError(f"{p}: expected {size} bytes (C*H*W uint8), got {len(raw)}")
        imgs.append(np.frombuffer(raw, dtype=np.uint8).reshape(model.in_channels, model.input_size,
                                                                  model.input_size))
    return files, np.stack(imgs)


def cmd_infer(args) -> int:
    model = fused.load(args.model)
    out = _out_dir(args)
    _echo_args(out, args)
    if args.batch:
        folder = Path(args.batch)
        if not folder.is_dir():
            raise DataError(f"--batch {folder} is not a directory")
        files, imgs = _read_raw_batch(folder, model)
        pred = model.predict(imgs)
        text = _csv([[p.name, int(c)] for p, c in zip(files, pred)], ("file", "class"))
        if out is not None:
            (out / "predictions.csv").write_text(text)
        sys.stdout.write(text)
        return 0
    from .models import NetworkSpec

    spec = NetworkSpec(in_channels=model.in_channels, input_size=model.input_size, classes=model.classes)
    test = _test_split(spec, args.dataset, args.data_path, args.n_test, args.limit)
    acc = float(np.mean(model.predict(test.images) == test.labels))
    if out is not None:
        (out / "eval.csv").write_text(_csv([[len(test), repr(acc)]], ("n", "accuracy")))
    print(f"accuracy {acc:.6f} n {len(test)}")
    return 0


def cmd_cost(args) -> int:
    from .models import NetworkSpec

    table = cost.OperatorCostTable.load(args.table) if args.table else cost.OperatorCostTable()
    sources = [s for s in (args.shape, args.ckpt, args.network) if s]
    if len(sources) != 1:
        raise ConfigError("give exactly one of --shape, --ckpt, --network")
    if args.shape:
        shapes = [("layer", cost.LayerShape.parse(args.shape))]
        spec = None
    else:
        spec = checkpoint.load(args.ckpt).spec if args.ckpt else NetworkSpec.parse(args.network)
        shapes = cost.network_shapes(spec)
    rep = cost.report(shapes, args.scheme, table, args.include_counters, args.m, args.n)
    out = _out_dir(args)
    _echo_args(out, args)
    if out is not None:
        (out / "cost.csv").write_text(rep.to_csv())
    print(rep.to_text())
    if spec is not None:
        print(f"params storage {cost.params_storage(spec):.3f} MB")
    return 0


def cmd_diagnose(args) -> int:
    ck = checkpoint.load(args.ckpt)
    net = ck.build(np.float64)
    test = _test_split(ck.spec, args.dataset, args.data_path, args.n_test, args.limit)
    norm = Normalizer(np.asarray(ck.meta["norm_mean"]), np.asarray(ck.meta["norm_std"]))
    values = record_preactivations(net, norm(test.images, np.float64), args.layer)
    stats = collect_channel_stats(values[None])
    rows = export_diagnostics(args.layer, stats, args.epsilon)
    out = _out_dir(args)
    _echo_args(out, args)
    text = diagnostics_csv(rows)
    hist = []
    for ch, v in enumerate(values):
        hist += [[ch, repr(lo), repr(hi), n] for lo, hi, n in histogram_rows(v, args.bins)]
    if out is not None:
        (out / "diagnostics.csv").write_text(text)
        (out / "histograms.csv").write_text(_csv(hist, ("channel", "bin_left", "bin_right", "count")))
    else:
        sys.stdout.write(text)
    n = len(rows)
    summary = {k: sum(r[k] for r in rows) for k in ("degenerate", "saturated", "mismatched")}
    print(f"layer {args.layer}: {n} channels, degenerate {summary['degenerate']}, "
          f"saturated {summary['saturated']}, mismatched {summary['mismatched']}", file=sys.stderr)
    return 0


# -- parser --------------------------------------------------------------------------------


def _data_flags(p, default_dataset="cifar10"):
    p.add_argument("--dataset", default=default_dataset, help="cifar10 | svhn | mnist | synthetic")
    p.add_argument("--data-path", default="data/cifar-10-batches-bin", help="dataset directory")
    p.add_argument("--n-test", type=int, default=500, help="test size for the synthetic dataset")
    p.add_argument("--limit", type=int, default=0, help="use only the first N test images (0 = all)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bnndl", description="Binarized network training, fusion and cost tools.")
    ap.add_argument("--log-level", default="WARNING", help="logging level (DEBUG, INFO, WARNING)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one network from a config file")
    p.add_argument("--config", help="INI config; flags and --set win over the file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dataset")
    p.add_argument("--data-path")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--out-dir", help="writes config.resolved.ini, metrics.csv, best.ckpt, last.ckpt")
    p.add_argument("--timing", action="store_true", help="also write per-epoch wall time to timing.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="float eval-mode accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    _data_flags(p)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train along one hyper-parameter axis")
    p.add_argument("--config")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dataset")
    p.add_argument("--data-path")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fuse", help="compile a checkpoint into a pure-logical model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dtype", default="float32", choices=("float32", "float64"),
                   help="float precision the fused model must reproduce")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("infer", help="run a fused model on a dataset or a folder of raw images")
    p.add_argument("--model", required=True)
    p.add_argument("--batch", help="folder of raw C*H*W uint8 files; prints file,class CSV")
    _data_flags(p)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("cost", help="operation counts and energy estimate")
    p.add_argument("--shape", help="C_in,C_out,H,W,K_h,K_w (H, W are output sizes)")
    p.add_argument("--ckpt", help="cost every layer of a checkpoint's network")
    p.add_argument("--network", help="network grammar, e.g. family=vgg,x=128")
    p.add_argument("--scheme", default="bnn", choices=cost.SCHEMES)
    p.add_argument("--m", type=int, default=3, help="ABC-Net weight bases")
    p.add_argument("--n", type=int, default=3, help="ABC-Net activation bases")
    p.add_argument("--table", help="key = value file overriding operator energies/areas")
    p.add_argument("--include-counters", action="store_true")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("diagnose", help="per-channel pre-activation statistics for one tapped layer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", type=int, default=-1, help="tap index (negative counts from the end)")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--bins", type=int, default=50)
    _data_flags(p)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_diagnose)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BNNError as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {exc.category}: {msg}", file=sys.stderr)
        return exc.exit_code
    except KeyError as exc:
        print(f"error: data: checkpoint metadata lacks {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
