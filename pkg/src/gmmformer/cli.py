"""Command-line entry point: ``gmmformer <command> [options]``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime or data errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np

from .baseline import BenchmarkError, benchmark
from .config import ConfigError, RunConfig, parse_assignment, PROFILES
from .container import ContainerError
from .evaluation import build_store, encode_queries, evaluate
from .synthetic import edges_from_cuts, generate_corpus, load_corpus, save_corpus
from .training import Checkpoint, TrainingError, train

log = logging.getLogger("gmmformer")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the clock for reproducible manifests
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return t.isoformat(timespec="seconds")


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# shared plumbing


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < profile < config file < --set < dedicated flags."""
    layers = []
    if getattr(args, "profile", None):
        layers.append({"profile": args.profile})
    layers.extend(parse_assignment(s) for s in args.set or [])
    flags = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        flags["epochs"] = args.epochs
    if getattr(args, "lambda3", None) is not None:
        flags["lambda3"] = args.lambda3
    if getattr(args, "variant", None) == "vanilla":
        flags["variances"] = ["inf"]
    elif getattr(args, "variant", None) == "gmm":
        flags["variances"] = [0.5, 1.0, 5.0, "inf"]
    if getattr(args, "groups", None) is not None:
        flags["mv_cuts"] = args.groups
    if getattr(args, "sizes", None) is not None:
        flags["bench_sizes"] = args.sizes
    if getattr(args, "trials", None) is not None:
        flags["bench_trials"] = args.trials
    for attr, key in (("corpus", "corpus_dir"), ("checkpoint", "checkpoint"), ("out", "report_dir")):
        if getattr(args, attr, None) is not None:
            flags[key] = str(getattr(args, attr))
    layers.append(flags)
    return RunConfig.from_file(args.config, layers)


def _prepare_out(path: str | Path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from None
    return out


def write_manifest(out: Path, command: str, cfg: RunConfig, started: str, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "tool_version": tool_version(),
        "config_fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "started": started,
        "finished": _timestamp(),
    }
    manifest.update(extra or {})
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_corpus(path) -> object:
    if path is None:
        raise UsageError("--corpus is required")
    try:
        return load_corpus(path)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load corpus from {path}: {exc}") from None


def _load_checkpoint(path) -> Checkpoint:
    if path is None:
        raise UsageError("--checkpoint is required")
    try:
        return Checkpoint.load(path)
    except (OSError, ContainerError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from None


def check_dims(model_d_in: int, model_d_word: int, corpus) -> None:
    c = corpus.config
    if model_d_in != c.d_in:
        raise DataError(f"frame feature dim mismatch: model expects d_in={model_d_in}, corpus has d_in={c.d_in}")
    if model_d_word != c.d_word:
        raise DataError(f"word feature dim mismatch: model expects d_word={model_d_word}, corpus has d_word={c.d_word}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    started = _timestamp()
    out = _prepare_out(args.out)
    corpus = generate_corpus(cfg.corpus_config())
    save_corpus(corpus, out, edges_from_cuts(cfg.mv_cuts))
    write_manifest(out, "gen-data", cfg, started, {"corpus_fingerprint": corpus.fingerprint()})
    print(f"wrote {len(corpus.videos)} videos, {len(corpus.queries)} queries to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    started = _timestamp()
    corpus = _load_corpus(cfg.corpus_dir)
    out = _prepare_out(args.out)
    model_cfg = cfg.model_config()
    check_dims(model_cfg.d_in, model_cfg.d_word, corpus)
    t0 = time.perf_counter()
    try:
        result = train(corpus, cfg.train_config(), model_cfg)
    except TrainingError as exc:
        raise DataError(str(exc)) from None
    ckpt_path = result.checkpoint.save(out / "checkpoint.gmmf")
    (out / "loss_trace.csv").write_text(result.trace_csv())
    write_manifest(
        out, "train", cfg, started,
        {"checkpoint_fingerprint": result.checkpoint.fingerprint, "corpus_fingerprint": corpus.fingerprint()},
    )
    losses = result.epoch_losses
    print(f"trained {cfg.epochs} epochs in {time.perf_counter() - t0:.1f}s; final mean loss {losses[-1]:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    started = _timestamp()
    ckpt = _load_checkpoint(cfg.checkpoint)
    corpus = _load_corpus(cfg.corpus_dir)
    check_dims(ckpt.model_config.d_in, ckpt.model_config.d_word, corpus)
    out = _prepare_out(args.out)
    report = evaluate(ckpt, corpus, cfg.weights(), edges_from_cuts(cfg.mv_cuts))
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.to_csv())
    write_manifest(out, "eval", cfg, started)
    r = report.recalls
    print("  ".join(f"{k}={r[k]:.2f}" for k in ("R@1", "R@5", "R@10", "R@100", "SumR")))
    return EXIT_OK


def cmd_bench(args, cfg: RunConfig) -> int:
    started = _timestamp()
    ckpt = _load_checkpoint(cfg.checkpoint)
    corpus = _load_corpus(cfg.corpus_dir)
    check_dims(ckpt.model_config.d_in, ckpt.model_config.d_word, corpus)
    out = _prepare_out(args.out)
    try:
        report = benchmark(corpus, ckpt, cfg.bench_sizes, cfg.bench_trials, cfg.weights())
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    except BenchmarkError as exc:
        raise DataError(str(exc)) from None
    (out / "bench.json").write_text(report.to_json())
    (out / "bench.csv").write_text(report.to_csv())
    write_manifest(out, "bench", cfg, started)
    for row in report.rows():
        print(
            f"size {row['size']:>5}: implicit {row['implicit_ms']:.3f} ms, explicit {row['explicit_ms']:.3f} ms, "
            f"clip bytes x{row['clip_byte_ratio']:.2f}"
        )
    return EXIT_OK


def cmd_export_embeddings(args, cfg: RunConfig) -> int:
    started = _timestamp()
    ckpt = _load_checkpoint(cfg.checkpoint)
    corpus = _load_corpus(cfg.corpus_dir)
    check_dims(ckpt.model_config.d_in, ckpt.model_config.d_word, corpus)
    out = _prepare_out(args.out)
    enc = ckpt.encoder()
    texts = encode_queries(enc, corpus)
    store = build_store(enc, corpus)
    d = texts.shape[1]
    path = out / "embeddings.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "id", "label", *(f"e{i}" for i in range(d))])
        for q, row in zip(corpus.queries, texts):
            w.writerow(["text", q.id, q.video_id, *map(repr, row.tolist())])
        for vid, row in zip(store.video_ids, store.videos):
            w.writerow(["video", vid, vid, *map(repr, row.tolist())])
    write_manifest(out, "export-embeddings", cfg, started)
    print(f"wrote {len(texts) + len(store.video_ids)} embeddings to {path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gmmformer", description="Gaussian-mixture video moment retrieval on synthetic corpora.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON file with a flat key/value namespace")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--profile", choices=sorted(PROFILES), help="dataset hyper-parameter profile")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate and persist a synthetic corpus")
    common(p)

    p = sub.add_parser("train", help="train a model on a corpus")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--epochs", type=int)
    p.add_argument("--variant", choices=("gmm", "vanilla"), help="vanilla uses a single infinite-variance block")
    p.add_argument("--lambda3", type=float, help="query diverse loss weight")

    for name, help_ in (("eval", "recall report"), ("bench", "implicit vs explicit store benchmark"),
                        ("export-embeddings", "CSV of text and video embeddings")):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--checkpoint")
        p.add_argument("--corpus")
        if name == "eval":
            p.add_argument("--groups", type=_csv_floats, help="interior moment/video ratio cuts, e.g. 0.25,0.5")
        if name == "bench":
            p.add_argument("--sizes", type=_csv_ints, help="database sizes, e.g. 500,1000")
            p.add_argument("--trials", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"gmmformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"gmmformer: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"gmmformer: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
