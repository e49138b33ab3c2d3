"""Command-line entry point: ``mfdmc {train,evaluate,baseline,export,gradcheck}``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 training or
evaluation failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import KINDS, baseline_fit
from .checkpoint import (
    CheckpointError,
    FingerprintMismatchError,
    read_checkpoint,
    save_checkpoint,
)
from .config import RunConfig, RunConfigError, load_run_config
from .data import (
    DataError,
    Ratings,
    fingerprint,
    load_generic_delimited,
    load_item_metadata,
    load_movielens_1m,
    load_movielens_100k,
    load_movielens_100k_items,
    read_split_manifest,
    split_dataset,
    write_split_manifest,
)
from .evaluation import cluster_report, evaluate, export_assignments, export_embeddings, write_cluster_report
from .losses import WEIGHT_LOSSES, total_loss
from .model import Biases, CenterBank, ConfigError, MfdmcModel, ModelConfig, init_model
from .trainer import TrainingError, alive_counts, compute_gradients, fit, gradient_check, write_epoch_log

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAIL = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# plumbing shared by the subcommands


def load_dataset(cfg: RunConfig, data_dir=None):
    ds = cfg.dataset
    path = cfg.dataset_path(data_dir)
    if ds.format == "movielens-100k":
        return load_movielens_100k(path)
    if ds.format == "movielens-1m":
        return load_movielens_1m(path)
    return load_generic_delimited(path, ds.delimiter, ds.range_min, ds.range_max, ds.has_header)


def load_metadata(cfg: RunConfig, meta, data_dir=None):
    path = cfg.metadata_path(data_dir)
    if path is None:
        return None
    if not path.exists():
        raise DataError(f"metadata file not found: {path}")
    fmt = cfg.dataset.metadata_format
    if fmt == "u.item":
        return load_movielens_100k_items(path, meta)
    if fmt == "movies.dat":
        return load_item_metadata(path, meta, delimiter="::")
    return load_item_metadata(path, meta)


def _output_dir(cfg: RunConfig, args, sub: str) -> Path:
    base = Path(args.output_dir or cfg.eval.output_dir)
    out = base / sub
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_summary(path: Path, record: dict) -> None:
    """One flat ``key=value`` record per line, in insertion order."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in record.items():
            fh.write(f"{key}={value}\n")


def read_summary(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key] = value
    return out


def _prepare(cfg: RunConfig, data_dir):
    triples, meta = load_dataset(cfg, data_dir)
    split = split_dataset(triples, cfg.dataset.split_seed, meta)
    return triples, meta, split


def _summary(cfg, kind, split, fp, report, test, started) -> dict:
    record = {
        "kind": kind,
        "version": __version__,
        "dataset": str(cfg.dataset.path),
        "dataset_format": cfg.dataset.format,
        "fingerprint": fp,
        "config_hash": cfg.config_hash(),
        "seed": cfg.train.seed,
        "split_seed": split.seed,
        "n_train": len(split.train),
        "n_validation": len(split.validation),
        "n_test": len(split.test),
        "epochs_run": len(report.records),
        "best_epoch": report.best_epoch,
        "best_val_rmse": repr(report.best_val_rmse),
        "test_rmse": repr(test.rmse),
        "clamp": test.clamp,
    }
    if kind == "mfdmc":
        counts = alive_counts(report.model)
        record["alive_user"] = ",".join(map(str, counts["user"]))
        record["alive_item"] = ",".join(map(str, counts["item"]))
    record["runtime_sec"] = f"{time.perf_counter() - started:.1f}"
    return record


def _finish(out: Path, cfg, kind, split, fp, report, started) -> dict:
    # the checkpoint was written on every new best; rewrite to pin the final best model
    save_checkpoint(report.model, out / "model.ckpt", fingerprint=fp,
                    train_config=cfg.train.to_dict() if kind == "mfdmc"
                    else cfg.baseline_train_config().to_dict(),
                    epoch=report.best_epoch, best_val_rmse=report.best_val_rmse)
    write_epoch_log(report, out / "epochs.tsv")
    write_split_manifest(split, out / "split.tsv")
    test = evaluate(report.model, split.test, clamp=cfg.eval.clamp)
    record = _summary(cfg, kind, split, fp, report, test, started)
    write_summary(out / "summary.txt", record)
    return record


def _print_record(record: dict) -> None:
    for key in ("kind", "best_epoch", "best_val_rmse", "test_rmse"):
        print(f"{key}={record[key]}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    started = time.perf_counter()
    triples, meta, split = _prepare(cfg, args.data_dir)
    fp = fingerprint(triples, meta)
    out = _output_dir(cfg, args, "mfdmc")
    model = init_model(cfg.model.model_config(), split.meta, cfg.train.seed)
    train_cfg = replace(cfg.train, clamp=cfg.eval.clamp)
    report = fit(model, split, train_cfg, checkpoint_path=out / "model.ckpt", fingerprint=fp)
    record = _finish(out, cfg, "mfdmc", split, fp, report, started)
    _print_record(record)
    print(f"outputs={out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    if args.kind not in KINDS:
        raise CliError(f"unknown baseline kind {args.kind!r}; choose from {KINDS}", EXIT_USAGE)
    cfg = load_run_config(args.config, args.set)
    started = time.perf_counter()
    triples, meta, split = _prepare(cfg, args.data_dir)
    fp = fingerprint(triples, meta)
    out = _output_dir(cfg, args, args.kind)
    train_cfg = replace(cfg.baseline_train_config(), clamp=cfg.eval.clamp)
    _, report = baseline_fit(split, args.kind, cfg.model.d, train_cfg, meta=split.meta)
    record = _finish(out, cfg, args.kind, split, fp, report, started)
    _print_record(record)
    print(f"outputs={out}")
    return EXIT_OK


def _checkpoint_against_data(args, cfg):
    triples, meta = load_dataset(cfg, args.data_dir)
    fp = fingerprint(triples, meta)
    ckpt = read_checkpoint(args.checkpoint, expected_fingerprint=fp)
    return ckpt, meta


def _manifest_split(path, meta):
    if path is None:
        raise CliError("a split manifest is required (--manifest)", EXIT_USAGE)
    try:
        return read_split_manifest(path, meta)
    except FileNotFoundError:
        raise CliError(f"split manifest not found: {path}", EXIT_DATA) from None


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config, args.set + _dataset_flags(args))
    ckpt, meta = _checkpoint_against_data(args, cfg)
    split = _manifest_split(args.manifest, meta)
    rep = evaluate(ckpt.model, getattr(split, args.split), clamp=cfg.eval.clamp, split=args.split)
    print(f"kind={ckpt.kind}")
    print(f"{args.split}_rmse={rep.rmse!r}")
    print(f"count={rep.count}")
    return EXIT_OK


EXPORTS = ("assignments", "embeddings", "cluster-report")


def cmd_export(args) -> int:
    cfg = load_run_config(args.config, args.set + _dataset_flags(args))
    if args.what == "cluster-report":
        ckpt, meta = _checkpoint_against_data(args, cfg)
        split = _manifest_split(args.manifest, meta)
    else:
        ckpt = read_checkpoint(args.checkpoint)
        meta = split = None
    if ckpt.kind != "mfdmc":
        raise CliError(f"export needs an MFDMC checkpoint, got {ckpt.kind!r}", EXIT_USAGE)
    model = ckpt.model
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    if args.what == "assignments":
        export_assignments(model, args.side, path)
    elif args.what == "embeddings":
        export_embeddings(model, args.side, path)
    else:
        metadata = load_metadata(cfg, meta, args.data_dir)
        write_cluster_report(cluster_report(model, split, metadata, args.side), path)
    print(f"wrote {path}")
    return EXIT_OK


def tiny_problem(rng, v: int, t: int, b: int = 2, m: int = 5, n: int = 5, size: int = 12,
                 share: bool = True):
    """Random tiny model (centers and logits ~ N(0,1)) plus a random batch."""
    cfg = ModelConfig(d=v * b, v=v, t_init=max(t, 3), share_centers=share)
    ub = CenterBank([rng.normal(size=(t, b)) for _ in range(v)])
    ib = ub if share else CenterBank([rng.normal(size=(t, b)) for _ in range(v)])
    bias = Biases(3.0, rng.normal(scale=0.3, size=m), rng.normal(scale=0.3, size=n))
    model = MfdmcModel(cfg, ub, ib, [rng.normal(size=(m, t)) for _ in range(v)],
                       [rng.normal(size=(n, t)) for _ in range(v)], bias)
    batch = Ratings(rng.integers(0, m, size), rng.integers(0, n, size), rng.uniform(1, 5, size))
    return model, batch


def gradcheck_suite(models: int = 20, seed: int = 0, eta: float = 0.7, gamma: float = 0.4,
                    lam: float = 0.2, rho: float = 0.6, weight_loss: str = "mapped-entropy",
                    step: float = 1e-5) -> list[dict[str, float]]:
    """Per-model max relative error per parameter block over tiny random models.

    Cycles v over {1, 2, 3} and t over {3, 4}, alternating shared and separate banks.
    """
    rng = np.random.default_rng(seed)
    co = dict(eta=eta, gamma=gamma, lam=lam, rho=rho, weight_loss=weight_loss)
    results = []
    for k in range(models):
        model, batch = tiny_problem(rng, v=1 + k % 3, t=3 + k % 2, share=k % 4 < 2)
        results.append(gradient_check(
            model, batch, lambda mm, bb: compute_gradients(mm, bb, **co)[0],
            lambda mm, bb: total_loss(mm, bb, **co).total, step))
    return results


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config, args.set)
    choice = args.weight_loss or cfg.train.weight_loss
    kinds = list(WEIGHT_LOSSES) if choice == "all" else [choice]
    worst_all = 0.0
    for kind in kinds:
        blocks: dict[str, float] = {}
        for res in gradcheck_suite(args.models, args.seed, rho=cfg.train.rho, weight_loss=kind):
            for name, err in res.items():
                block = name.rsplit(".", 1)[0] if name.startswith(("centers", "logits")) else name
                blocks[block] = max(blocks.get(block, 0.0), err)
        for block, err in sorted(blocks.items()):
            print(f"{kind}\t{block}\tmax_rel_err={err:.3e}")
        worst_all = max(worst_all, max(blocks.values()))
    ok = worst_all < GRADCHECK_TOLERANCE
    print(f"worst={worst_all:.3e} tolerance={GRADCHECK_TOLERANCE:g} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument parsing


def _dataset_flags(args) -> list[str]:
    out = []
    if getattr(args, "dataset", None):
        out.append(f"dataset.path={args.dataset}")
    if getattr(args, "format", None):
        out.append(f"dataset.format={args.format}")
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfdmc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI run configuration")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--data-dir", default=None,
                       help="base for relative dataset paths (default: $MFDMC_DATA_DIR)")

    p = sub.add_parser("train", help="train MFDMC and evaluate on the test split")
    common(p)
    p.add_argument("--output-dir", default=None, help="overrides eval.output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="train a FunkMF or BiasedMF baseline")
    p.add_argument("kind", help="funk or biased")
    common(p)
    p.add_argument("--output-dir", default=None, help="overrides eval.output_dir")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="re-evaluate a checkpoint on a saved split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None, help="split manifest written by train")
    p.add_argument("--dataset", default=None, help="overrides dataset.path")
    p.add_argument("--format", default=None, help="overrides dataset.format")
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export", help="write assignments, embeddings or a cluster report")
    p.add_argument("what", choices=EXPORTS)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output file")
    p.add_argument("--side", default="user", choices=("user", "item"))
    p.add_argument("--manifest", default=None, help="split manifest (cluster-report only)")
    p.add_argument("--dataset", default=None, help="overrides dataset.path")
    p.add_argument("--format", default=None, help="overrides dataset.format")
    common(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--models", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weight-loss", default=None, choices=WEIGHT_LOSSES + ("all",))
    common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"mfdmc: error: {exc}", file=sys.stderr)
        return exc.code
    except (RunConfigError, ConfigError) as exc:
        print(f"mfdmc: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FingerprintMismatchError as exc:
        print(f"mfdmc: dataset does not match checkpoint: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"mfdmc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, CheckpointError) as exc:
        print(f"mfdmc: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"mfdmc: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
