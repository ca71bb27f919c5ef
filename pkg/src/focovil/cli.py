"""Command-line entry point: ``focovil gen-data | train | eval | ablate``.

Exit codes: 0 success, 2 configuration or argument error, 3 unreadable or
unwritable files (including malformed corpora), 4 training aborted on a
non-finite value, 5 checkpoint/data shape mismatch.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import zipfile

from . import plots
from .autodiff import NonFiniteValue, ShapeMismatch
from .config import ConfigError, dump_config, load_config
from .evaluation import ProbeConfig, cross_view_split, evaluate, extract_embeddings, write_embeddings, write_report
from .model import load_checkpoint
from .skeleton import DegenerateFrame, SequenceTooShort, ZeroExtentSequence, preprocess_corpus
from .synth import generate_corpus, read_corpus, write_corpus
from .training import (
    ABLATIONS,
    VARIANTS,
    TrainConfig,
    load_training_checkpoint,
    new_model,
    run_ablation,
    summarize_ablation,
    train,
    write_run,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_SHAPE = 0, 2, 3, 4, 5

log = logging.getLogger("focovil")


class DataError(Exception):
    """Input files that exist but cannot be used."""


def _read_data(path):
    try:
        return read_corpus(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _prepare(corpus, target_len, align):
    try:
        return preprocess_corpus(corpus, target_len, align=align)
    except (ZeroExtentSequence, SequenceTooShort, DegenerateFrame) as exc:
        raise DataError(f"cannot preprocess corpus: {exc}") from exc


def _load(path):
    try:
        return load_training_checkpoint(path)
    except ShapeMismatch:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from exc


def _emit(rows, out=None):
    """Tab-delimited lines on stdout (and optionally to a file)."""
    lines = ["\t".join(str(c) for c in row) for row in rows]
    for line in lines:
        print(line)
    if out is not None:
        with open(out, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _fmt(x):
    return "" if x is None else f"{x:.4f}"


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    run = load_config(args.config)
    corpus = generate_corpus(run.data)
    n = write_corpus(corpus, args.out)
    _emit([("records", n), ("scenes", len(corpus.scenes())), ("views", corpus.n_views)])
    return EXIT_OK


def cmd_train(args):
    run = load_config(args.config)
    cfg = run.train
    if args.ablation is not None:
        cfg = TrainConfig(**{**vars(cfg), "ablation": args.ablation}).validate()
    if args.epochs is not None:
        cfg.epochs = args.epochs
        cfg.validate()
    run.train = cfg
    corpus = _read_data(args.data)
    align = VARIANTS[cfg.ablation].align
    data = _prepare(corpus, run.target_len, align)
    held = run.eval.held_out_view if args.hold_out else None
    if held is not None:
        data = data.subset(lambda s: s.view_id != held)

    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.npz")
    resume = None
    if args.resume and os.path.exists(ckpt):
        params, saved, resume = _load(ckpt)
        if saved is not None and saved.ablation != cfg.ablation:
            raise ConfigError(f"checkpoint was trained as {saved.ablation!r}, not {cfg.ablation!r}")
        if params.config.input_dim != data.topology.n_joints * 3:
            raise ShapeMismatch("checkpoint input width does not match the corpus")
    else:
        params = new_model(data, run.model)
    dump_config(run, os.path.join(args.out, "config.resolved.yaml"))
    meta = {"preprocess": {"target_len": run.target_len, "align": align, "held_out_view": held}}
    result = train(data, params, cfg, out_dir=args.out, resume=resume, meta=meta)
    if cfg.epochs == 0 or not result.log:
        write_run(args.out, result, cfg, meta)
    rows = [("epoch", "lr", "loss", "L_fc", "L_r", "pos_r", "neg_r")]
    rows += [(r["epoch"], f"{r['lr']:.6g}", _fmt(r["loss"]), _fmt(r["L_fc"]), _fmt(r["L_r"]),
              _fmt(r["pos_r"]), _fmt(r["neg_r"])) for r in result.log]
    _emit(rows)
    if result.log:
        plots.loss_curves(result.log, os.path.join(args.out, "loss_curves.png"), cfg.ablation)
    return EXIT_OK


def parse_split(text):
    kind, _, value = text.partition(":")
    if kind != "cross-view" or not value.lstrip("-").isdigit():
        raise ConfigError(f"bad --split {text!r}; expected cross-view:<view id>")
    return int(value)


def cmd_eval(args):
    held = parse_split(args.split)
    probe, cluster_seed = ProbeConfig(), 0
    if args.config is not None:
        run = load_config(args.config)
        probe, cluster_seed = run.eval.probe, run.eval.cluster_seed
    params, _, _ = _load(args.checkpoint)
    _, meta, _ = load_checkpoint(args.checkpoint)
    meta_pre = meta.get("preprocess", {})
    corpus = _read_data(args.data)
    if params.config.input_dim != corpus.topology.n_joints * 3:
        raise ShapeMismatch(f"checkpoint expects {params.config.input_dim // 3} joints, "
                            f"data has {corpus.topology.n_joints}")
    if any(s.class_label is None for s in corpus.sequences):
        raise DataError("evaluation needs class labels on every sequence")
    data = _prepare(corpus, meta_pre.get("target_len", 30), meta_pre.get("align", True))
    emb = extract_embeddings(data, params)
    if held not in set(emb.view_ids.tolist()):
        raise ConfigError(f"view {held} does not occur in the data")
    tr, te = cross_view_split(emb, held)
    report = evaluate(tr, te, cluster_seed=cluster_seed, probe=probe)
    report["split"] = args.split
    write_report(args.report, report)
    stem = os.path.splitext(args.report)[0]
    plots.confusion(report["confusion_matrix"], stem + "_confusion.png")
    if args.embeddings is not None:
        write_embeddings(args.embeddings, emb)
    _emit([("metric", "value")] + [(k, _fmt(report[k])) for k in
                                   ("one_nn_accuracy", "linear_accuracy", "gmm_purity", "gmm_ari",
                                    "kmeans_purity", "kmeans_ari")]
          + [("n_train", report["n_train"]), ("n_test", report["n_test"])])
    return EXIT_OK


def cmd_ablate(args):
    run = load_config(args.config)
    corpus = _read_data(args.data)
    if any(s.class_label is None for s in corpus.sequences):
        raise DataError("ablation needs class labels on every sequence")
    os.makedirs(args.out, exist_ok=True)
    dump_config(run, os.path.join(args.out, "config.resolved.yaml"))
    model_cfg = run.model_config(corpus.topology.n_joints * 3)

    def progress(row):
        log.info("%s seed %d: acc %.4f purity %.4f", row["variant"], row["seed"],
                 row["one_nn_accuracy"], row["gmm_purity"])

    rows = run_ablation(corpus, model_cfg, run.train, run.ablate, on_row=progress, jobs=args.jobs)
    means, checks = summarize_ablation(rows)
    table = [("variant", "seed", "one_nn_accuracy", "gmm_purity")]
    for v in means:
        for r in sorted((r for r in rows if r["variant"] == v), key=lambda r: r["seed"]):
            table.append((v, r["seed"], _fmt(r["one_nn_accuracy"]), _fmt(r["gmm_purity"])))
        table.append((v, "mean", _fmt(means[v]["one_nn_accuracy"]), _fmt(means[v]["gmm_purity"])))
    _emit(table, os.path.join(args.out, "ablation.tsv"))
    if checks:
        _emit([("check", "result")] + [(k, "pass" if ok else "fail") for k, ok in checks.items()],
              os.path.join(args.out, "trend.tsv"))
    write_report(os.path.join(args.out, "ablation.json"), {"rows": rows, "means": means, "checks": checks})
    plots.ablation_bars(means, os.path.join(args.out, "ablation.png"))
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="focovil", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic multi-view corpus")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--ablation", choices=ABLATIONS)
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz if present")
    t.add_argument("--hold-out", action="store_true", help="drop eval.held_out_view from the training data")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", required=True, help="cross-view:<view id>")
    e.add_argument("--report", required=True, help="metrics JSON path")
    e.add_argument("--embeddings", help="optional CSV export of the latent codes")
    e.add_argument("--config", help="probe and clustering settings")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score every variant under every seed")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--jobs", type=int, default=1, help="worker processes")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteValue as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except ShapeMismatch as exc:
        print(f"shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (OSError, DataError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
