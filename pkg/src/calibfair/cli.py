"""Command-line entry point: ``calibfair {gen-data,train,eval,sweep}``.

Exit status is 0 on success, 1 when a run fails at runtime (for example a
diverging loss) and 2 for usage or validation errors.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import re
import sys
import tempfile
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .data import PRESETS, DataError, SyntheticSpec, generate_synthetic, load_csv, save_csv, split
from .model import load_checkpoint, predict, save_checkpoint
from .metrics import evaluate
from .pipeline import (DEFAULT_SEEDS, ConfigError, RunResult, TrainConfig, TrainedArtifacts, TrainingError,
                       cli_name, method_from_name, run_one, sweep)

log = logging.getLogger("calibfair")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- file output

@contextlib.contextmanager
def _atomic_path(path: Path):
    """Yield a temporary sibling of ``path``; it replaces ``path`` on success."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_text(path: Path, text: str) -> None:
    with _atomic_path(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2) + "\n")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Run manifest, written when a run starts and finalized when it ends."""

    def __init__(self, path: Path, command: str, config: dict, data_path: Optional[str]):
        self.path = path
        self.body = {
            "tool": "calibfair",
            "version": __version__,
            "command": command,
            "config": config,
            "data": None if data_path is None else {"path": str(data_path), "digest": file_digest(data_path)},
            "started": _now(),
            "finished": None,
            "status": "running",
            "outputs": [],
        }
        write_json(path, self.body)

    def add(self, *names: str) -> None:
        self.body["outputs"].extend(names)

    def finish(self, status: str = "complete") -> None:
        self.body.update(finished=_now(), status=status)
        write_json(self.path, self.body)


# ---------------------------------------------------------------- parsing

def parse_seeds(text: str) -> List[int]:
    """``"0..4"`` (inclusive range), ``"0,2,5"`` or a single integer."""
    text = text.strip()
    m = re.fullmatch(r"(\d+)\.\.(\d+)", text)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        if hi < lo:
            raise UsageError(f"seed range {text!r} is empty")
        return list(range(lo, hi + 1))
    if re.fullmatch(r"\d+(,\d+)*", text):
        seeds = [int(s) for s in text.split(",")]
        if len(set(seeds)) != len(seeds):
            raise UsageError(f"duplicate seeds in {text!r}")
        return seeds
    raise UsageError(f"malformed seeds {text!r}; use a range like 0..4 or a list like 0,1,2")


def parse_list(text: Optional[str]) -> Optional[List[str]]:
    if text is None:
        return None
    items = [t.strip() for t in text.split(",")]
    if not all(items):
        raise UsageError(f"malformed list {text!r}")
    return items


def parse_fractions(text: str):
    try:
        parts = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise UsageError(f"malformed split fractions {text!r}") from None
    if len(parts) != 3:
        raise UsageError("split needs three fractions: train,val,test")
    return parts


def _hidden(text: str):
    try:
        dims = tuple(int(t) for t in text.split(",")) if text else ()
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed hidden sizes {text!r}") from None
    if any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError("hidden sizes must be positive")
    return dims


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_data_args(p):
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--attrs", help="comma list of attributes to evaluate (default: all)")
    p.add_argument("--bins", type=int, default=10, help="Q-ECE bins (default 10)")
    p.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test fractions")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the data split (default 0)")


def _add_train_args(p):
    d = TrainConfig()
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--clusters", type=int, default=d.num_clusters)
    p.add_argument("--gap-mode", choices=("out-of-fold", "in-sample"), default="out-of-fold")
    p.add_argument("--in-sample-gaps", action="store_true", help="same as --gap-mode in-sample")
    p.add_argument("--folds", type=int, default=d.num_folds)
    p.add_argument("--jtt-lambda", type=float, default=d.jtt_lambda)
    p.add_argument("--groupdro-eta", type=float, default=d.groupdro_eta)
    p.add_argument("--groupdro-loss", choices=("cross-entropy", "focal"), default="cross-entropy")
    p.add_argument("--oracle-attr")
    p.add_argument("--stage1-epochs", type=int, default=d.stage1_epochs)
    p.add_argument("--stage2-epochs", type=int, default=d.stage2_epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--hidden", type=_hidden, default=d.hidden_dims, help="hidden layer sizes, e.g. 32,32")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="calibfair", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"calibfair {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset CSV and its spec JSON")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(PRESETS))
    src.add_argument("--spec", help="JSON file with a synthetic spec")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output CSV path")

    t = sub.add_parser("train", help="train one method and evaluate it on the test split")
    _add_data_args(t)
    t.add_argument("--method", required=True)
    t.add_argument("--seed", type=int, default=0)
    _add_train_args(t)

    e = sub.add_parser("eval", help="re-evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--attrs")
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--subset", choices=("all", "train", "val", "test"), default="all",
                   help="rows to evaluate (default all)")
    e.add_argument("--split", default="0.8,0.1,0.1")
    e.add_argument("--split-seed", type=int, default=0)

    s = sub.add_parser("sweep", help="train methods over seeds and write the trade-off table")
    _add_data_args(s)
    s.add_argument("--methods", required=True, help="comma list, e.g. erm,focal,cluster-focal")
    s.add_argument("--seeds", default=f"{DEFAULT_SEEDS[0]}..{DEFAULT_SEEDS[-1]}", help="range like 0..4 or list like 0,1,2")
    _add_train_args(s)
    return parser


# ---------------------------------------------------------------- helpers

def _load(path):
    if not Path(path).is_file():
        raise UsageError(f"data file {path!r} not found")
    return load_csv(path)


def _attributes(args, dataset) -> List[str]:
    attrs = parse_list(args.attrs) or list(dataset.attributes)
    if not attrs:
        raise UsageError("dataset has no attr_ columns to evaluate")
    missing = [a for a in attrs if a not in dataset.attributes]
    if missing:
        raise UsageError(f"unknown attribute(s) {', '.join(missing)}; dataset has {', '.join(dataset.attributes)}")
    return attrs


def _config(args, method: str, seed: int) -> TrainConfig:
    if args.bins < 1:
        raise UsageError("--bins must be at least 1")
    gap_mode = "in_sample" if args.in_sample_gaps else args.gap_mode.replace("-", "_")
    return TrainConfig(method=method_from_name(method), gamma=args.gamma, num_clusters=args.clusters,
                       stage1_epochs=args.stage1_epochs, stage2_epochs=args.stage2_epochs,
                       batch_size=args.batch_size, lr=args.lr, jtt_lambda=args.jtt_lambda,
                       groupdro_eta=args.groupdro_eta, groupdro_loss=args.groupdro_loss.replace("-", "_"),
                       oracle_attribute=args.oracle_attr, seed=seed, gap_mode=gap_mode,
                       num_folds=args.folds, hidden_dims=tuple(args.hidden), num_bins=args.bins)


def _loss_trace_csv(art: TrainedArtifacts) -> str:
    lines = ["epoch,loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(art.epoch_losses)]
    return "\n".join(lines) + "\n"


def _reliability_rows(run: RunResult, header: bool) -> str:
    """Per-bin rows of every group's and the overall equal-mass diagram."""
    out = []
    for rep in run.reports:
        for gm in [*rep.groups, rep.overall]:
            group = "all" if gm.group is None else gm.group
            text = gm.reliability.to_csv(method=run.method, seed=run.seed,
                                         attribute=rep.attribute, group=group)
            lines = text.splitlines(keepends=True)
            if not out and header:
                out.append(lines[0])
            out.extend(lines[1:])
    return "".join(out)


def write_run(run_dir: Path, run: RunResult, manifest: Manifest) -> None:
    art = run.artifacts
    with _atomic_path(run_dir / "model.ckpt") as tmp:
        save_checkpoint(art.f_pred, tmp)
    manifest.add("model.ckpt")
    if art.f_id is not None:
        with _atomic_path(run_dir / "stage1.ckpt") as tmp:
            save_checkpoint(art.f_id, tmp)
        manifest.add("stage1.ckpt")
    if art.clusters is not None:
        write_json(run_dir / "clusters.json", art.cluster_report())
        manifest.add("clusters.json")
    if art.group_weights:
        q = np.asarray(art.group_weights)
        rows = ["step," + ",".join(f"q{k}" for k in range(q.shape[1]))]
        rows += [f"{i + 1}," + ",".join(repr(float(v)) for v in row) for i, row in enumerate(q)]
        write_text(run_dir / "group_weights.csv", "\n".join(rows) + "\n")
        manifest.add("group_weights.csv")
    if art.jtt_marked is not None:
        write_json(run_dir / "jtt_marked.json", [int(i) for i in art.jtt_marked])
        manifest.add("jtt_marked.json")
    write_text(run_dir / "loss_trace.csv", _loss_trace_csv(art))
    manifest.add("loss_trace.csv")
    for rep in run.reports:
        name = f"eval_{rep.attribute}.json"
        body = rep.to_dict()
        body["selected_epoch"] = art.selected_epoch
        write_json(run_dir / name, body)
        manifest.add(name)


def _run_config_dict(config: TrainConfig, args, attrs) -> dict:
    d = config.to_dict()
    d.update(split=list(parse_fractions(args.split)), split_seed=args.split_seed, attributes=list(attrs),
             num_bins=args.bins)
    return d


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    if args.preset:
        spec, preset = PRESETS[args.preset], args.preset
    else:
        try:
            raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read spec file: {exc}") from None
        spec, preset = SyntheticSpec.from_dict(raw.get("spec", raw)), None
    dataset = generate_synthetic(spec, args.seed)
    out = Path(args.out)
    with _atomic_path(out) as tmp:
        save_csv(dataset, tmp)
    spec_path = out.with_name(out.stem + ".spec.json")
    write_json(spec_path, {"preset": preset, "seed": args.seed, "spec": spec.to_dict()})
    print(f"wrote {out} ({dataset.n_samples} rows, {dataset.num_classes} classes) and {spec_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = _load(args.data)
    attrs = _attributes(args, dataset)
    config = _config(args, args.method, args.seed)
    config.validate(dataset)
    parts = split(dataset, parse_fractions(args.split), seed=args.split_seed)
    run_dir = Path(args.out) / f"{cli_name(config.method)}_seed{config.seed}"
    manifest = Manifest(run_dir / "manifest.json", "train", _run_config_dict(config, args, attrs), args.data)
    try:
        run = run_one(config, dataset, parts, attrs)
    except Exception:
        manifest.finish("failed")
        raise
    write_run(run_dir, run, manifest)
    manifest.finish()
    for rep in run.reports:
        for w in rep.warnings:
            print(f"warning: {w}", file=sys.stderr)
        print(rep.summary())
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = _load(args.data)
    attrs = _attributes(args, dataset)
    if args.bins < 1:
        raise UsageError("--bins must be at least 1")
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint!r} not found")
    try:
        model = load_checkpoint(args.checkpoint)
    except ValueError as exc:
        raise UsageError(f"bad checkpoint {args.checkpoint!r}: {exc}") from None
    if model.layer_dims[0] != dataset.n_features or model.layer_dims[-1] != dataset.num_classes:
        raise UsageError(f"checkpoint expects {model.layer_dims[0]} features and {model.layer_dims[-1]} "
                         f"classes; data has {dataset.n_features} and {dataset.num_classes}")
    if args.subset == "all":
        idx = np.arange(dataset.n_samples)
    else:
        idx = getattr(split(dataset, parse_fractions(args.split), seed=args.split_seed), args.subset)
    out = Path(args.out)
    config = {"checkpoint": str(args.checkpoint), "checkpoint_digest": file_digest(args.checkpoint),
              "subset": args.subset, "split": list(parse_fractions(args.split)), "split_seed": args.split_seed,
              "attributes": attrs, "num_bins": args.bins}
    manifest = Manifest(out / "manifest.json", "eval", config, args.data)
    records = predict(model, dataset, idx)
    for a in attrs:
        rep = evaluate(records, dataset.attributes[a][idx], a, dataset.num_classes, args.bins,
                       dataset.num_groups(a))
        write_json(out / f"eval_{a}.json", rep.to_dict())
        manifest.add(f"eval_{a}.json")
        for w in rep.warnings:
            print(f"warning: {w}", file=sys.stderr)
        print(rep.summary())
    manifest.finish()
    return EXIT_OK


def cmd_sweep(args) -> int:
    dataset = _load(args.data)
    attrs = _attributes(args, dataset)
    methods = [method_from_name(m) for m in parse_list(args.methods)]
    if len(set(methods)) != len(methods):
        raise UsageError("duplicate methods")
    seeds = parse_seeds(args.seeds)
    base = _config(args, methods[0], seeds[0])
    for m in methods:
        replace(base, method=m).validate(dataset)
    parts = split(dataset, parse_fractions(args.split), seed=args.split_seed)
    out = Path(args.out)
    config = _run_config_dict(base, args, attrs)
    config.update(methods=[cli_name(m) for m in methods], seeds=seeds)
    config.pop("method"), config.pop("seed")
    manifest = Manifest(out / "manifest.json", "sweep", config, args.data)
    try:
        table, runs = sweep(base, methods, seeds, dataset, parts, attrs)
    except Exception:
        manifest.finish("failed")
        raise
    for run in runs:
        run_dir = out / f"{cli_name(run.method)}_seed{run.seed}"
        run_manifest = Manifest(run_dir / "manifest.json", "sweep",
                                _run_config_dict(replace(base, method=run.method, seed=run.seed), args, attrs),
                                args.data)
        write_run(run_dir, run, run_manifest)
        run_manifest.finish()
        manifest.add(f"{run_dir.name}/")
    write_text(out / "tradeoff.csv", table.to_csv())
    write_json(out / "tradeoff.json", table.to_dict())
    manifest.add("tradeoff.csv", "tradeoff.json")
    for m in methods:
        mine = [r for r in runs if r.method == m]
        name = f"reliability_{cli_name(m)}.csv"
        write_text(out / name, "".join(_reliability_rows(r, i == 0) for i, r in enumerate(mine)))
        manifest.add(name)
    manifest.finish()
    for row in table.rows:
        print(f"method={cli_name(row.method)} attr={row.attribute} runs={row.n_runs} "
              f"worstF1={row.worst_perf_mean:.6f}+-{row.worst_perf_std:.6f} "
              f"worstQECE={row.worst_qece_mean:.6f}+-{row.worst_qece_std:.6f}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"calibfair: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DataError) as exc:
        print(f"calibfair: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"calibfair: run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"calibfair: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
