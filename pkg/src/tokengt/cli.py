"""Command-line entry point: ``tokengt <subcommand> [flags]``.

Relative ``--out`` directories are resolved under ``$TOKENGT_OUTPUT_ROOT``
(default: the current directory). Exit status: 0 success, 1 a verification
check failed, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .constructive import ConstructiveConfig, verify_lemma1, verify_theorem2, verify_theorem3
from .equivariant import enumerate_classes, random_ign_spec, random_layer_params
from .experiments import DESK_CONFIGS, MODE_ALIASES, NODE_ID_MODES, SyntheticConfig, ba_dataset, eval_basis_l2, train_synthetic
from .graphs import load_graph, save_graph

log = logging.getLogger("tokengt")

OUTPUT_ROOT_ENV = "TOKENGT_OUTPUT_ROOT"
EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

SCHEMAS = {
    "verify.csv": ("verify", 1, ["theorem", "n", "k", "case", "a", "error", "tol", "pass"]),
    "basis_l2.csv": ("basis-l2", 1, ["mode", "layout", "seed", "split", "head", "l2"]),
    "history.csv": ("history", 1, ["step", "loss"]),
    "regression.csv": ("regression", 1, ["mode", "seed", "split", "mse"]),
    "distance.csv": ("distance", 1, ["layer", "head", "mean_hops"]),
}


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value

    return parse


def resolve_out(path: str) -> Path:
    p = Path(path)
    if not p.is_absolute():
        p = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise UsageError(f"output directory {p} is not writable")
    return p


def write_csv(out: Path, name: str, rows) -> Path:
    header = SCHEMAS[name][2]
    path = out / name
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def write_manifest(out: Path, command: str, config: dict, files: list) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": config,
        "files": [
            {"name": f, "schema": SCHEMAS[f][0], "schema_version": SCHEMAS[f][1]} if f in SCHEMAS else {"name": f}
            for f in files
        ],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _load_split(data: Path, split: str) -> list:
    folder = data / split
    if not folder.is_dir():
        raise UsageError(f"dataset split not found: {folder}")
    return [load_graph(p) for p in sorted(folder.glob("graph_*.jsonl"))]


def _graphs(args):
    if args.data:
        data = Path(args.data)
        if not data.is_dir():
            raise UsageError(f"dataset path not found: {data}")
        return _load_split(data, "train"), _load_split(data, "test")
    return ba_dataset(args.train, args.test, args.seed)


# -- subcommands -----------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.train < 1 or args.test < 1:
        raise UsageError("--train and --test must be >= 1")
    out = resolve_out(args.out)
    train, test = ba_dataset(args.train, args.test, args.seed)
    for split, graphs in (("train", train), ("test", test)):
        (out / split).mkdir(exist_ok=True)
        for i, g in enumerate(graphs):
            save_graph(g, out / split / f"graph_{i:05d}.jsonl")
    sizes = [g.n for g in train + test]
    edges = [g.m for g in train + test]
    write_manifest(
        out,
        "gen",
        {"train": args.train, "test": args.test, "seed": args.seed, "mean_nodes": float(np.mean(sizes)), "mean_edges": float(np.mean(edges))},
        ["train/", "test/"],
    )
    print(f"wrote {len(train)} train and {len(test)} test graphs to {out}")
    return EXIT_OK


def _class_name(c) -> str:
    return "".join(str(b) for b in c)


def _verify_rows(args) -> list:
    rows = []
    theorems = ["lemma1", "thm2", "thm3"] if args.theorem == "all" else [args.theorem]
    ks = [args.k] if args.k else [1, 2]
    ns = args.n or [4]
    for theorem in theorems:
        for k in ks:
            for n in ns:
                for a in args.a:
                    rows.extend(_verify_one(theorem, k, n, a, args))
    return rows


def _verify_one(theorem, k, n, a, args) -> list:
    rows = []
    if theorem == "lemma1":
        for mu in enumerate_classes(2 * k):
            r = verify_lemma1(n, k, mu, a, "exact", args.tol or 1e-6)
            rows.append(("lemma1", n, k, _class_name(mu), a, r.max_error, r.tol, r.passed))
        return rows
    cfg = ConstructiveConfig(k, max(n, 1), 2, a)
    for s in range(args.seeds):
        rng = np.random.default_rng([args.seed, s])
        if theorem == "thm2":
            p = random_layer_params(k, k, args.width, args.width, rng)
            x = rng.standard_normal((n,) * k + (args.width,))
            r = verify_theorem2(x, p, cfg, args.tol)
        else:
            spec = random_ign_spec(k, [args.width] * 3, args.width, [args.width, 1], rng)
            x = rng.standard_normal((n,) * k + (args.width,))
            r = verify_theorem3(x, spec, cfg, args.tol or 1e-3)
        rows.append((theorem, n, k, f"seed{s}", a, r.max_error, r.tol, r.passed))
    return rows


def cmd_verify(args) -> int:
    if any(a <= 0 for a in args.a):
        raise UsageError("--a must be positive")
    out = resolve_out(args.out)
    rows = _verify_rows(args)
    write_csv(out, "verify.csv", rows)
    write_manifest(out, "verify", vars(args) | {"func": None}, ["verify.csv"])
    failed = [r for r in rows if not r[-1]]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed; results in {out / 'verify.csv'}")
    return EXIT_FAILED if failed else EXIT_OK


def _synthetic_cfg(args) -> SyntheticConfig:
    mode, types = args.mode, args.type_ids
    if mode in MODE_ALIASES:
        mode, forced = MODE_ALIASES[mode]
        types = types if forced is None else forced
    desk = DESK_CONFIGS[args.layout]
    pick = lambda name, key: desk.get(key) if getattr(args, name) is None else getattr(args, name)
    steps = pick("steps", "steps")
    return SyntheticConfig(
        layout=args.layout,
        node_ids=mode,
        type_ids=types,
        d=pick("d", "d"),
        d_H=pick("d_h", "d_H"),
        d_p=args.d_p,
        steps=steps,
        warmup=min(pick("warmup", "warmup"), steps),
        lr=pick("lr", "lr"),
        batch_size=pick("batch_size", "batch_size"),
        rows_per_graph=pick("rows_per_graph", "rows_per_graph"),
        train_size=args.train,
        test_size=args.test,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    cfg = _synthetic_cfg(args)
    train, test = _graphs(args)
    out = resolve_out(args.out)
    run = train_synthetic(cfg, train, log_every=args.log_every, logger=log)
    np.savez(out / "params.npz", **run.params)
    write_csv(out, "history.csv", enumerate(run.history))
    rows = []
    for split, graphs in (("train", train), ("test", test)):
        ev = eval_basis_l2(run.params, graphs, cfg)
        rows += [(cfg.mode_name, cfg.layout, cfg.seed, split, h, v) for h, v in enumerate(ev["per_head"])]
        rows.append((cfg.mode_name, cfg.layout, cfg.seed, split, "mean", ev["mean"]))
    write_csv(out, "basis_l2.csv", rows)
    write_manifest(out, "train", cfg.to_dict(), ["params.npz", "history.csv", "basis_l2.csv"])
    print(f"trained {cfg.mode_name} ({cfg.layout}); test L2 {rows[-1][-1]:.4g}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiments import eval_constructed_l2

    train, test = _graphs(args)
    out = resolve_out(args.out)
    rows = []
    if args.constructed:
        for split, graphs in (("train", train), ("test", test)):
            ev = eval_constructed_l2(graphs, args.a)
            rows += [("constructed", "dense", args.seed, split, h, v) for h, v in enumerate(ev["per_head"])]
            rows.append(("constructed", "dense", args.seed, split, "mean", ev["mean"]))
        config = {"constructed": True, "a": args.a}
    else:
        if not args.params:
            raise UsageError("eval needs --params or --constructed")
        params_path = Path(args.params)
        if not params_path.is_file():
            raise UsageError(f"params file not found: {params_path}")
        manifest_path = params_path.parent / "manifest.json"
        if not manifest_path.is_file():
            raise UsageError(f"no manifest.json next to {params_path}; it records the training config")
        manifest = json.loads(manifest_path.read_text())
        cfg = SyntheticConfig(**manifest["config"])
        with np.load(params_path) as fh:
            params = {k: fh[k] for k in fh.files}
        for split, graphs in (("train", train), ("test", test)):
            ev = eval_basis_l2(params, graphs, cfg)
            rows += [(cfg.mode_name, cfg.layout, cfg.seed, split, h, v) for h, v in enumerate(ev["per_head"])]
            rows.append((cfg.mode_name, cfg.layout, cfg.seed, split, "mean", ev["mean"]))
        config = cfg.to_dict() | {"params": str(params_path)}
    write_csv(out, "basis_l2.csv", rows)
    write_manifest(out, "eval", config, ["basis_l2.csv"])
    print(f"mean test L2 {rows[-1][-1]:.4g}; results in {out}")
    return EXIT_OK


def _regression_cfg(args, seed):
    from .regression import RegressionConfig

    return RegressionConfig(
        steps=args.steps,
        warmup=min(args.warmup, args.steps),
        lr=args.lr,
        batch_size=args.batch_size,
        train_size=args.train,
        test_size=args.test,
        seed=seed,
    )


def cmd_regress(args) -> int:
    from .regression import train_regression_demo

    out = resolve_out(args.out)
    rows = []
    results = {}
    for seed in args.seeds:
        cfg = _regression_cfg(args, seed)
        res = train_regression_demo(cfg)
        results[seed] = {k: v for k, v in res.items() if not k.startswith(("history", "params"))}
        np.savez(out / f"params_orf_seed{seed}.npz", **res["params_with_ids"])
        rows += [
            ("orf+type", seed, "test", res["mse_with_ids"]),
            ("none", seed, "test", res["mse_without_ids"]),
            ("orf+type", seed, "train", res["train_mse_with_ids"]),
            ("none", seed, "train", res["train_mse_without_ids"]),
            ("bound", seed, "test", res["bound"]),
        ]
        print(f"seed {seed}: MSE with ids {res['mse_with_ids']:.4f}, without {res['mse_without_ids']:.4f}, bound {res['bound']:.4f}")
    write_csv(out, "regression.csv", rows)
    files = ["regression.csv"] + [f"params_orf_seed{s}.npz" for s in args.seeds]
    write_manifest(out, "regress", _regression_cfg(args, args.seeds[0]).to_dict() | {"seeds": args.seeds, "results": results}, files)
    return EXIT_OK


def cmd_attndist(args) -> int:
    from .regression import RegressionConfig, TokenGTRegressor, attention_distance_report

    _, test = _graphs(args)
    out = resolve_out(args.out)
    model = TokenGTRegressor(RegressionConfig(ids=args.ids, layers=args.layers, seed=args.seed, steps=1, warmup=0))
    if args.params:
        path = Path(args.params)
        if not path.is_file():
            raise UsageError(f"params file not found: {path}")
        with np.load(path) as fh:
            model.params = {k: fh[k] for k in fh.files}
    rows = attention_distance_report(model, test, args.seed)
    write_csv(out, "distance.csv", rows)
    write_manifest(out, "attndist", model.cfg.to_dict() | {"params": args.params}, ["distance.csv"])
    print(f"{len(rows)} (layer, head) rows written to {out / 'distance.csv'}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_data_flags(p, train=512, test=64):
    p.add_argument("--data", help="dataset directory written by `gen` (default: generate in memory)")
    p.add_argument("--train", type=int, default=train, help="training graphs when generating in memory")
    p.add_argument("--test", type=int, default=test, help="test graphs when generating in memory")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--workers", type=int, default=1, help="worker processes (1 keeps runs bit-reproducible)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokengt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a Barabasi-Albert dataset")
    p.add_argument("--train", type=int, default=512, help="number of training graphs")
    p.add_argument("--test", type=int, default=64, help="number of test graphs")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", default="data", help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("verify", help="check the constructive results against brute-force oracles")
    p.add_argument("--theorem", choices=["lemma1", "thm2", "thm3", "all"], default="all", help="which construction to check")
    p.add_argument("--k", type=int, choices=[1, 2, 3], help="tensor order (default: 1 and 2)")
    p.add_argument("--n", type=int, nargs="+", help="node counts (default: 4)")
    p.add_argument("--a", type=float, nargs="+", default=[1e3], help="sharpness values")
    p.add_argument("--tol", type=float, help="override the default tolerance")
    p.add_argument("--seeds", type=_positive(int), default=3, help="random instances per thm2/thm3 case")
    p.add_argument("--width", type=_positive(int), default=2, help="channel width of random layers")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--workers", type=int, default=1, help="worker processes (1 keeps runs bit-reproducible)")
    p.add_argument("--out", default="verify", help="output directory")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train the basis-approximation model")
    p.add_argument("--mode", choices=list(NODE_ID_MODES) + list(MODE_ALIASES), default="orf", help="node identifier mode")
    p.add_argument("--type-ids", type=_bool, default=True, help="use type identifiers (true/false)")
    p.add_argument("--layout", choices=["sparse", "dense"], default="sparse", help="token layout")
    p.add_argument("--d", type=_positive(int), default=None, help="hidden width (default: desk setting for the layout)")
    p.add_argument("--d-h", type=_positive(int), default=None, help="head width")
    p.add_argument("--d-p", type=_positive(int), default=None, help="node identifier width")
    p.add_argument("--steps", type=_positive(int), default=None, help="optimizer steps")
    p.add_argument("--warmup", type=int, default=None, help="warmup steps")
    p.add_argument("--lr", type=_positive(float), default=None, help="peak learning rate")
    p.add_argument("--batch-size", type=_positive(int), default=None, help="graphs per step")
    p.add_argument("--rows-per-graph", type=_positive(int), default=None, help="query rows sampled per graph (dense default: 32)")
    p.add_argument("--log-every", type=int, default=0, help="log the loss every N steps")
    p.add_argument("--out", default="train", help="output directory")
    _add_data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained or constructed attention")
    p.add_argument("--params", help="params.npz written by `train`")
    p.add_argument("--constructed", action="store_true", help="evaluate the explicit construction instead")
    p.add_argument("--a", type=_positive(float), default=1e3, help="sharpness for --constructed")
    p.add_argument("--out", default="eval", help="output directory")
    _add_data_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("regress", help="triangle-count regression with and without identifiers")
    p.add_argument("--seeds", type=int, nargs="+", default=[0], help="random seeds")
    p.add_argument("--steps", type=_positive(int), default=1500, help="optimizer steps")
    p.add_argument("--warmup", type=int, default=150, help="warmup steps")
    p.add_argument("--lr", type=_positive(float), default=3e-3, help="peak learning rate")
    p.add_argument("--batch-size", type=_positive(int), default=32, help="graphs per step")
    p.add_argument("--train", type=int, default=1024, help="training graphs")
    p.add_argument("--test", type=int, default=256, help="test graphs")
    p.add_argument("--workers", type=int, default=1, help="worker processes (1 keeps runs bit-reproducible)")
    p.add_argument("--out", default="regress", help="output directory")
    p.set_defaults(func=cmd_regress)

    p = sub.add_parser("attndist", help="mean attention distance per layer and head")
    p.add_argument("--params", help="npz of regression-model parameters (default: untrained)")
    p.add_argument("--ids", choices=["orf", "none"], default="orf", help="identifier mode of the model")
    p.add_argument("--layers", type=_positive(int), default=2, help="number of layers")
    p.add_argument("--out", default="attndist", help="output directory")
    _add_data_flags(p, train=1, test=64)
    p.set_defaults(func=cmd_attndist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "workers", 1) != 1:
        log.warning("--workers > 1 is accepted but runs stay single-process")
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"tokengt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
