"""Command-line surface: gen / train-source / run / grid / report.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys

import numpy as np

from . import bench
from .engine import TastConfig
from .errors import TastError
from .fileio import (
    load_model,
    read_features,
    read_result_rows,
    save_model,
    write_features,
    write_result_rows,
)
from .mathcore import normalize_rows
from .tastbn import TastBnConfig

CSV_COLUMNS = ["method", "N_s", "T", "M", "N_e", "tau", "lr", "batch_size", "seed", "final_accuracy"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="tast", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic feature files (or import a CSV fixture)")
    g.add_argument("--out-train")
    g.add_argument("--out-test")
    g.add_argument("--out-val")
    g.add_argument("--val-frac", type=float, default=0.2)
    g.add_argument("--k", type=int, default=5)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--n-train", type=int, default=1000)
    g.add_argument("--n-test", type=int, default=2000)
    g.add_argument("--cov-scale", type=float, default=1.0)
    g.add_argument("--mean-radius", type=float, default=3.0)
    g.add_argument("--shift", choices=["none", "meanshift", "rotation", "noise"], default="meanshift")
    g.add_argument("--shift-scale", type=float, default=1.5)
    g.add_argument("--angles", default="180")
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--from-csv", help="import a CSV fixture instead of sampling")
    g.add_argument("--out", help="output path for --from-csv")

    t = sub.add_parser("train-source", help="train the source model on a labeled feature file")
    t.add_argument("--features", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--bn", action="store_true", help="train the toy BN network instead of a bare head")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--hidden", type=int, default=16)
    t.add_argument("--d-z", type=int, default=16)
    t.add_argument("--val-frac", type=float, default=0.2)
    t.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("run", help="run one adaptation method over a test stream")
    r.add_argument("--method", required=True, choices=bench.METHODS)
    r.add_argument("--features", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--model", help="model JSON; defaults to the head embedded in the feature file")
    r.add_argument("--config-json")
    _add_config_flags(r)

    gr = sub.add_parser("grid", help="grid-search on a validation stream, run the winner on test")
    gr.add_argument("--method", required=True, choices=["tast", "t3a", "tast_n"])
    gr.add_argument("--val", required=True)
    gr.add_argument("--test", required=True)
    gr.add_argument("--out", required=True)
    gr.add_argument("--model")
    gr.add_argument("--batch-size", type=int, default=32)
    gr.add_argument("--ne", type=int, default=20)
    gr.add_argument("--tau", type=float, default=0.1)
    gr.add_argument("--lr", type=float, default=1e-3)
    gr.add_argument("--seed", type=int, default=0)

    rep = sub.add_parser("report", help="summarize a results file as a table and CSV")
    rep.add_argument("--results", required=True)
    rep.add_argument("--csv")
    return p


def _add_config_flags(p) -> None:
    p.add_argument("--ns", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--ne", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int)
    p.add_argument("--d-phi", type=int)
    p.add_argument("--global-cap", type=int)
    p.add_argument("--fixed-prototypes", action="store_true")


def _shift_from_args(args):
    if args.shift == "none":
        return None
    if args.shift == "meanshift":
        return bench.MeanShift(scale=args.shift_scale)
    if args.shift == "rotation":
        angles = tuple(float(a) for a in args.angles.split(","))
        return bench.Rotation(angles=angles)
    return bench.GaussianNoise(sigma=args.sigma)


def _cmd_gen(args) -> int:
    if args.from_csv:
        if not args.out:
            print("gen: --from-csv requires --out", file=sys.stderr)
            return 1
        X, y = _read_csv(args.from_csv)
        write_features(args.out, normalize_rows(X).astype(np.float32), labels=y)
        print(json.dumps({"out": args.out, "n": int(X.shape[0]), "d": int(X.shape[1])}))
        return 0
    if not args.out_train or not args.out_test:
        print("gen: --out-train and --out-test are required", file=sys.stderr)
        return 1
    spec = bench.SyntheticSpec(
        n_classes=args.k, dim=args.dim, n_train=args.n_train, n_test=args.n_test,
        class_cov_scale=args.cov_scale, mean_radius=args.mean_radius,
        shift=_shift_from_args(args), seed=args.seed,
    )
    data = bench.generate(spec)
    if args.out_val:
        tx, ty, vx, vy = bench.split_train_val(data, args.val_frac, seed=args.seed)
        write_features(args.out_train, tx.astype(np.float32), labels=ty)
        write_features(args.out_val, vx.astype(np.float32), labels=vy)
    else:
        write_features(args.out_train, data.train_X.astype(np.float32), labels=data.train_y)
    write_features(args.out_test, data.test_X.astype(np.float32), labels=data.test_y)
    print(json.dumps({"train": args.out_train, "val": args.out_val, "test": args.out_test}))
    return 0


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TastError(f"{path}: empty CSV")
    header = None
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        header = rows[0]
        rows = rows[1:]
    label_col = header.index("label") if header and "label" in header else None
    feats, labels = [], []
    for row in rows:
        vals = [float(v) for v in row]
        if label_col is not None:
            labels.append(int(vals.pop(label_col)))
        feats.append(vals)
    X = np.array(feats)
    y = np.array(labels, dtype=int) if labels else None
    return X, y


def _cmd_train_source(args) -> int:
    payload = read_features(args.features)
    if payload.labels is None or np.all(payload.labels < 0):
        raise TastError("train-source needs a labeled feature file")
    X, y = payload.features, payload.labels
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(X.shape[0])
    n_val = max(1, int(round(args.val_frac * X.shape[0])))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    if args.bn:
        kwargs = {}
        if args.epochs:
            kwargs["epochs"] = args.epochs
        if args.lr:
            kwargs["lr"] = args.lr
        ext, head = bench.train_source_bn(
            X[tr_idx], y[tr_idx], hidden=args.hidden, d_z=args.d_z, seed=args.seed, **kwargs
        )
        from .tastbn import bn_forward

        val_pred = np.argmax(head.probabilities(bn_forward(ext, X[val_idx])), axis=1)
        tr_pred = np.argmax(head.probabilities(bn_forward(ext, X[tr_idx])), axis=1)
        save_model(args.out, (ext, head))
    else:
        kwargs = {}
        if args.epochs:
            kwargs["epochs"] = args.epochs
        if args.lr:
            kwargs["lr"] = args.lr
        head = bench.train_source_head(X[tr_idx], y[tr_idx], **kwargs)
        val_pred = np.argmax(head.probabilities(X[val_idx]), axis=1)
        tr_pred = np.argmax(head.probabilities(X[tr_idx]), axis=1)
        save_model(args.out, head)
    print(json.dumps({
        "out": args.out,
        "train_accuracy": float((tr_pred == y[tr_idx]).mean()),
        "val_accuracy": float((val_pred == y[val_idx]).mean()),
    }))
    return 0


def _config_from_args(args, method: str):
    overlay = {}
    if args.config_json:
        with open(args.config_json, encoding="utf-8") as fh:
            overlay.update(json.load(fh))
    for key in ("ns", "steps", "m", "ne", "tau", "lr", "seed", "d_phi", "global_cap"):
        val = getattr(args, key, None)
        if val is not None:
            overlay[key] = val
    if getattr(args, "fixed_prototypes", False):
        overlay["fixed_prototypes"] = True
    if method == "tast_bn":
        base = TastBnConfig()
        fields = {f.name for f in dataclasses.fields(TastBnConfig)}
    else:
        base = TastConfig()
        fields = {f.name for f in dataclasses.fields(TastConfig)}
    return dataclasses.replace(base, **{k: v for k, v in overlay.items() if k in fields})


def _cmd_run(args) -> int:
    payload = read_features(args.features)
    if payload.labels is None:
        raise TastError("run needs a labeled test stream to score against")
    if args.model:
        kind, model = load_model(args.model)
    elif payload.head is not None:
        kind, model = "head", payload.head
    else:
        raise TastError("no --model given and the feature file embeds no head")
    if args.method == "tast_bn" and kind != "bn":
        raise TastError("tast_bn needs a BN model (train-source --bn)")
    if args.method != "tast_bn" and kind == "bn" and args.method != "none":
        raise TastError(f"method {args.method} needs a plain head model")
    cfg = _config_from_args(args, args.method)
    record = bench.run_online(args.method, model, payload.features, payload.labels,
                              args.batch_size, cfg)
    write_result_rows(args.out, record.rows())
    print(json.dumps({
        "method": args.method,
        "final_accuracy": record.final_accuracy,
        "n_scored": record.n_scored,
        "batches": len(record.batch_accuracy),
        "out": args.out,
    }))
    return 0


def _cmd_grid(args) -> int:
    val = read_features(args.val)
    test = read_features(args.test)
    if val.labels is None or test.labels is None:
        raise TastError("grid needs labeled validation and test files")
    if args.model:
        _, model = load_model(args.model)
    elif val.head is not None:
        model = val.head
    else:
        raise TastError("no --model given and the validation file embeds no head")
    base = TastConfig(ne=args.ne, tau=args.tau, lr=args.lr, seed=args.seed)
    grid = bench.default_grid(base)
    best, accs = bench.grid_search(args.method, model, val.features, val.labels,
                                   args.batch_size, grid)
    record = bench.run_online(args.method, model, test.features, test.labels,
                              args.batch_size, best)
    write_result_rows(args.out, record.rows())
    print(json.dumps({
        "best_config": best.to_dict(),
        "best_val_accuracy": max(accs),
        "test_accuracy": record.final_accuracy,
        "out": args.out,
    }))
    return 0


def _runs_from_rows(rows):
    runs, current = [], []
    last_index = None
    for row in rows:
        if last_index is not None and row["batch_index"] <= last_index:
            runs.append(current)
            current = []
        current.append(row)
        last_index = row["batch_index"]
    if current:
        runs.append(current)
    return runs


def _cmd_report(args) -> int:
    rows = read_result_rows(args.results)
    if not rows:
        raise TastError(f"{args.results}: no result rows")
    runs = _runs_from_rows(rows)
    table = []
    for run in runs:
        last = run[-1]
        cfg = last.get("config", {})
        table.append({
            "method": last["method"],
            "N_s": cfg.get("ns", ""),
            "T": cfg.get("steps", ""),
            "M": cfg.get("m", ""),
            "N_e": cfg.get("ne", ""),
            "tau": cfg.get("tau", ""),
            "lr": cfg.get("lr", ""),
            "batch_size": cfg.get("batch_size", ""),
            "seed": cfg.get("seed", ""),
            "final_accuracy": round(last["cumulative_accuracy"], 6),
        })
    widths = {c: max(len(c), *(len(str(r[c])) for r in table)) for c in CSV_COLUMNS}
    print("  ".join(c.ljust(widths[c]) for c in CSV_COLUMNS))
    for r in table:
        print("  ".join(str(r[c]).ljust(widths[c]) for c in CSV_COLUMNS))
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(table)
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train-source": _cmd_train_source,
    "run": _cmd_run,
    "grid": _cmd_grid,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (TastError, OSError) as exc:
        print(f"tast {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
