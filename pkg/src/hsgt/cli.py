"""Command-line entry point: ``hsgt <command> ...``.

Exit codes: 0 success, 1 input error, 2 numeric contract violation.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from hsgt.coarsen import METHODS, build_hierarchy, load_partitions, save_hierarchy
from hsgt.data import (
    SPLIT_FILE,
    SPLIT_NAMES,
    LabeledDataset,
    generate_sbm,
    ingest_dataset,
    split_dataset,
    write_dataset,
    write_splits,
)
from hsgt.errors import InputError, NumericError
from hsgt.model import HSGT
from hsgt.store import HistoricalStore
from hsgt.training import (
    ABLATIONS,
    SWEEP_AXES,
    TrainConfig,
    ablate,
    accuracy,
    effective_sampler,
    format_table,
    predict,
    report_table,
    sweep,
    train,
)

log = logging.getLogger("hsgt")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2
DETERMINISTIC_ENV = "HSGT_DETERMINISTIC"

# File names inside a training output directory.
CONFIG_FILE = "config.json"
MODEL_FILE = "model.ckpt"
STORE_FILE = "store.ckpt"
HIERARCHY_DIR = "hierarchy"
METRICS_JSON = "metrics.json"
METRICS_TXT = "metrics.txt"
META_FILE = "meta.json"


def deterministic_mode() -> contextlib.AbstractContextManager:
    """Single-threaded BLAS when ``HSGT_DETERMINISTIC=1`` so reductions keep a fixed order."""
    if os.environ.get(DETERMINISTIC_ENV) == "1":
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    return contextlib.nullcontext()


def load_data(directory: str | Path, fmt: str = "auto", split_seed: int = 0) -> LabeledDataset:
    """Read a dataset directory and make sure it carries a split."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"data directory {directory} does not exist")
    if fmt == "auto":
        fmt = "cora-content" if (directory / "cora.content").exists() else "generic"
    ds = ingest_dataset(directory, fmt)
    if not np.any(ds.split >= 0):
        ds = split_dataset(ds, "random-118", split_seed)
    return ds


def desk_sbm(seed: int = 0) -> LabeledDataset:
    """The 4 x 100 node block model used for quick experiments."""
    return split_dataset(generate_sbm(4, 100, 0.1, 0.005, 0.5, seed), "random-118", seed)


def _config(path: str | None) -> TrainConfig:
    return TrainConfig.load(path) if path else TrainConfig()


def _ratios(text: str) -> list[float]:
    try:
        return [float(r) for r in text.split(",") if r.strip()]
    except ValueError as exc:
        raise InputError(f"bad ratio list {text!r}") from exc


def _write_reports(reports, out: str | None, key: str) -> None:
    table = report_table(reports, key)
    print(table)
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
        (out_dir / "report.txt").write_text(table + "\n")


# --- commands --------------------------------------------------------------------

def cmd_generate_sbm(args) -> int:
    ds = generate_sbm(args.blocks, args.nodes_per_block, args.p_in, args.p_out, args.noise, args.seed)
    ds = split_dataset(ds, "random-118", args.seed)
    write_dataset(ds, args.out)
    print(f"wrote {ds.num_nodes} nodes, {ds.graph.num_edges} edges to {args.out}")
    return EXIT_OK


def cmd_coarsen(args) -> int:
    ds = load_data(args.input, args.format)
    partitions = None
    if args.method == "import":
        source = Path(args.partitions or args.input)
        partitions = load_partitions(source)
        if not partitions:
            raise InputError(f"no part_l1.tsv found in {source}")
    h = build_hierarchy(ds, _ratios(args.ratios), args.method, args.seed, partitions=partitions)
    save_hierarchy(h, args.out)
    sizes = " -> ".join(str(g.num_nodes) for g in h.graphs)
    print(f"hierarchy {sizes} written to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    ds = load_data(args.data, args.format, cfg.split_seed)
    partitions = load_partitions(args.partitions) if args.partitions else None
    if partitions is not None:
        h = build_hierarchy(ds, [], "import", cfg.coarsening.seed, partitions=partitions)
        if h.depth != cfg.model.depth:
            raise InputError(f"imported hierarchy has depth {h.depth}, config expects {cfg.model.depth}")
    else:
        h = build_hierarchy(ds, cfg.coarsening.ratios, cfg.coarsening.method, cfg.coarsening.seed)
    dump_dir = None
    if args.dump_batches:
        dump_dir = Path(args.dump_batches)
        dump_dir.mkdir(parents=True, exist_ok=True)
    run, report = train(cfg, ds, h, dump_dir=dump_dir)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / CONFIG_FILE)
    run.model.save(out / MODEL_FILE)
    run.store.save(out / STORE_FILE)
    save_hierarchy(h, out / HIERARCHY_DIR)
    write_splits(ds, out / SPLIT_FILE)
    meta = {"in_features": ds.num_features, "num_classes": ds.num_classes, "seed": run.metrics.seed}
    (out / META_FILE).write_text(json.dumps(meta, indent=2) + "\n")
    (out / METRICS_JSON).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    rows = [(r.seed, r.best_epoch, r.best_valid, r.test_acc) for r in report.runs]
    text = format_table(["seed", "best_epoch", "valid", "test"], rows) + "\n\n" + report.summary()
    (out / METRICS_TXT).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / CONFIG_FILE).exists():
        raise InputError(f"{ckpt} is not a training output directory (no {CONFIG_FILE})")
    cfg = TrainConfig.load(ckpt / CONFIG_FILE)
    ds = load_data(args.data, args.format, cfg.split_seed)
    if not (Path(args.data) / SPLIT_FILE).exists() and (ckpt / SPLIT_FILE).exists():
        ds = split_dataset(ds, "predefined", split_path=ckpt / SPLIT_FILE)
    meta = json.loads((ckpt / META_FILE).read_text())
    if meta["in_features"] != ds.num_features or meta["num_classes"] != ds.num_classes:
        raise InputError("dataset shape does not match the checkpoint")
    h = build_hierarchy(ds, [], "import", cfg.coarsening.seed, partitions=load_partitions(ckpt / HIERARCHY_DIR))
    model = HSGT(cfg.model, ds.num_features, ds.num_classes)
    model.load(ckpt / MODEL_FILE)
    store = HistoricalStore.load(ckpt / STORE_FILE)
    pred = predict(model, store, h, effective_sampler(cfg, ds))
    acc = accuracy(pred, ds, args.split)
    if args.predictions:
        names = ds.node_names or [str(i) for i in range(ds.num_nodes)]
        with open(args.predictions, "w", encoding="utf-8") as fh:
            for name, p in zip(names, pred):
                fh.write(f"{name}\t{p}\n")
    print(json.dumps({"split": args.split, "accuracy": acc}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from hsgt.gradcheck_suite import TOLERANCE, run_suite

    results = run_suite(full_model=args.full_model, ops=not args.model_only)
    for name, err in results.items():
        print(f"{name:24s} {err:.3e}")
    print(f"all {len(results)} checks below {TOLERANCE:.0e}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    ds = load_data(args.data, args.format, cfg.split_seed) if args.data else desk_sbm()
    variants = [v for v in args.variants.split(",") if v] if args.variants else list(ABLATIONS)
    _write_reports(ablate(cfg, ds, variants), args.out, "variant")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args.config)
    ds = load_data(args.data, args.format, cfg.split_seed) if args.data else desk_sbm()
    if args.axis == "ratios":
        values = [_ratios(v) for v in args.values]
    else:
        try:
            values = [float(v) for v in args.values]
        except ValueError as exc:
            raise InputError(f"bad p value list {args.values}") from exc
    _write_reports(sweep(cfg, ds, args.axis, values), args.out, args.axis)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsgt", description="Hierarchical graph Transformer toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_format(p):
        p.add_argument("--format", default="auto", choices=["auto", "generic", "cora-content"])

    p = sub.add_parser("generate-sbm", help="write a synthetic block-model dataset")
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--nodes-per-block", type=int, default=100)
    p.add_argument("--p-in", type=float, default=0.1)
    p.add_argument("--p-out", type=float, default=0.005)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_sbm)

    p = sub.add_parser("coarsen", help="build and save a coarsening hierarchy")
    p.add_argument("--input", required=True)
    p.add_argument("--ratios", default="0.05")
    p.add_argument("--method", choices=METHODS, default="multilevel")
    p.add_argument("--partitions", help="directory of part_l*.tsv files for --method import")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    data_format(p)
    p.set_defaults(func=cmd_coarsen)

    p = sub.add_parser("train", help="train and save the best-validation checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--partitions", help="use saved part_l*.tsv files instead of coarsening")
    p.add_argument("--dump-batches", metavar="DIR", help="write first-epoch batches as JSON")
    data_format(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a saved checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLIT_NAMES, default="test")
    p.add_argument("--predictions", help="write node<TAB>class for every node")
    data_format(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of engine ops")
    p.add_argument("--full-model", action="store_true", help="also check a tiny full model")
    p.add_argument("--model-only", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="baseline against ablation variants")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory (default: the 4 x 100 block model)")
    p.add_argument("--variants", help=f"comma list from {','.join(ABLATIONS)} (default: all)")
    p.add_argument("--out")
    data_format(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="one run per value of a hyperparameter")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory (default: the 4 x 100 block model)")
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", nargs="+", required=True,
                   help="p values, or ratio lists such as 0.05 0.1,0.2")
    p.add_argument("--out")
    data_format(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with deterministic_mode():
            return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
