"""Command-line entry point for the full experimental protocol.

Subcommands: vocab, train, eval, sweep, export-embeddings, plot, angles,
norms, grad-check.  Exit codes: 0 success, 1 usage error, 2 runtime
error, 3 failed self-check.  Every run directory receives a manifest
JSON, written before training starts, that is sufficient to replay the
run bit-exactly.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import multiprocessing as mp
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import Vocabulary, build_vocab, encode, read_lines
from .heads import (ContextScale, HeadConfig, Margin, WordScale,
                    audit_head_gradients)
from .model import LmModel
from .training import (TrainConfig, TrainingError, evaluate_ppl,
                       load_checkpoint, save_checkpoint, train)
from . import viz

OUT_ENV_VAR = "MARGINLM_OUT"


class UsageError(Exception):
    """Bad flags or an inconsistent configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _enum_choice(value: str) -> str:
    return value.replace("-", "_")


def _add_head_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--margin", default="none",
                   choices=[m.value for m in Margin],
                   help="margin family for the target logit")
    p.add_argument("--m", type=float, default=0.0,
                   help="margin size (positive integer for lsm)")
    p.add_argument("--s", type=float, default=64.0,
                   help="rescale constant for --classic-normalize")
    p.add_argument("--f-mode", default="no-mod",
                   choices=["no-mod", "uniform", "log-rank", "unigram",
                            "log-unigram"],
                   help="word-vector norm scaling")
    p.add_argument("--g-mode", default="no-mod",
                   choices=["no-mod", "max-norm"],
                   help="context-vector norm scaling")
    p.add_argument("--classic-normalize", action="store_true",
                   help="fixed scale s instead of norm scaling")
    p.add_argument("--eval-with-margin", action="store_true",
                   help="keep the margin active during evaluation")
    p.add_argument("--no-bias", action="store_true",
                   help="drop the output bias term")


def _head_config(args) -> HeadConfig:
    try:
        return HeadConfig(
            margin_family=Margin(args.margin),
            m=args.m,
            s=args.s,
            f_mode=WordScale(_enum_choice(args.f_mode)),
            g_mode=ContextScale(_enum_choice(args.g_mode)),
            classic_normalize=args.classic_normalize,
            use_bias=not args.no_bias,
            eval_with_margin=args.eval_with_margin,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--clip", type=float, default=5.0)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--bptt", type=int, default=32)
    p.add_argument("--streams", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr-decay", type=float, default=0.5)
    p.add_argument("--d-hidden", type=int, default=128)
    p.add_argument("--d-emb", type=int, default=None)
    p.add_argument("--dtype", default="float64",
                   choices=["float32", "float64"])
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--max-size", type=int, default=None)
    p.add_argument("--lowercase", action="store_true")


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(optimizer=args.optimizer, learning_rate=args.lr,
                           grad_clip_norm=args.clip, epochs=args.epochs,
                           bptt_len=args.bptt, num_streams=args.streams,
                           seed=args.seed, lr_decay=args.lr_decay)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _out_dir(args) -> Path:
    out = args.out if args.out is not None \
        else os.environ.get(OUT_ENV_VAR, ".")
    return Path(out)


def _manifest(command: str, args, head: HeadConfig, tcfg: TrainConfig,
              out_dir: Path, extra: dict | None = None) -> dict:
    doc = {
        "toolkit_version": __version__,
        "command": command,
        "train_corpus": str(args.train_corpus),
        "valid_corpus": str(args.valid_corpus or args.train_corpus),
        "head_config": head.to_dict(),
        "train_config": {
            "optimizer": tcfg.optimizer.value,
            "learning_rate": tcfg.learning_rate,
            "grad_clip_norm": tcfg.grad_clip_norm,
            "epochs": tcfg.epochs,
            "bptt_len": tcfg.bptt_len,
            "num_streams": tcfg.num_streams,
            "seed": tcfg.seed,
            "lr_decay": tcfg.lr_decay,
        },
        "model": {"d_hidden": args.d_hidden, "d_emb": args.d_emb,
                  "dtype": args.dtype},
        "vocab": {"min_count": args.min_count, "max_size": args.max_size,
                  "lowercase": args.lowercase},
        "seed": args.seed,
        "out_dir": str(out_dir),
    }
    if extra:
        doc.update(extra)
    return doc


def _run_one_training(train_path: str, valid_path: str, vocab_opts: dict,
                      model_opts: dict, head: HeadConfig, tcfg: TrainConfig,
                      run_dir: Path) -> dict:
    """Build data, train one model, write metrics + checkpoint.

    Returns the summary row for sweep output."""
    train_lines = read_lines(train_path)
    vocab = build_vocab(train_lines, **vocab_opts)
    train_ids = encode(vocab, train_lines,
                       lowercase=vocab_opts.get("lowercase", False))
    valid_ids = encode(vocab, read_lines(valid_path),
                       lowercase=vocab_opts.get("lowercase", False))
    model = LmModel(vocab.size, model_opts["d_hidden"],
                    d_emb=model_opts["d_emb"], seed=tcfg.seed,
                    dtype=np.dtype(model_opts["dtype"]))
    run_dir.mkdir(parents=True, exist_ok=True)
    vocab.save_tsv(run_dir / "vocab.tsv")
    metrics = run_dir / "metrics.tsv"
    if metrics.exists():
        metrics.unlink()
    reports = train(model, vocab, train_ids, valid_ids, head, tcfg,
                    metrics_path=str(metrics))
    save_checkpoint(model, vocab, head, run_dir / "model.ckpt")
    return {
        "slug": head.slug(),
        "seed": tcfg.seed,
        "final_train_ppl": reports[-1].train_ppl,
        "final_valid_ppl": reports[-1].valid.perplexity,
        "best_valid_ppl": min(r.valid.perplexity for r in reports),
    }


# -- subcommands ------------------------------------------------------------


def cmd_vocab(args) -> int:
    lines = read_lines(args.corpus)
    vocab = build_vocab(lines, min_count=args.min_count,
                        max_size=args.max_size, lowercase=args.lowercase)
    vocab.save_tsv(args.out_file)
    total = int(vocab.counts.sum() - vocab.counts[vocab.sb_id])
    print(f"vocab_size\t{vocab.size}")
    print(f"token_count\t{total}")
    print(f"written\t{args.out_file}")
    return 0


def cmd_train(args) -> int:
    head = _head_config(args)
    tcfg = _train_config(args)
    out_dir = _out_dir(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest("train", args, head, tcfg, out_dir)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    row = _run_one_training(
        args.train_corpus, args.valid_corpus or args.train_corpus,
        {"min_count": args.min_count, "max_size": args.max_size,
         "lowercase": args.lowercase},
        {"d_hidden": args.d_hidden, "d_emb": args.d_emb,
         "dtype": args.dtype},
        head, tcfg, out_dir)
    print(f"final_valid_ppl\t{row['final_valid_ppl']:.6f}")
    return 0


def cmd_eval(args) -> int:
    model, vocab, head = load_checkpoint(args.checkpoint)
    ids = encode(vocab, read_lines(args.corpus), lowercase=args.lowercase)
    report = evaluate_ppl(model, ids, vocab, head,
                          num_streams=args.streams, bptt_len=args.bptt)
    print(f"{report.perplexity:.6f}\t{report.token_count}"
          f"\t{report.total_log_prob:.6f}")
    return 0


def _sweep_worker(payload: dict) -> dict:
    head = HeadConfig.from_dict(payload["head"])
    tcfg = TrainConfig(**payload["train"])
    row = _run_one_training(payload["train_corpus"], payload["valid_corpus"],
                            payload["vocab_opts"], payload["model_opts"],
                            head, tcfg, Path(payload["run_dir"]))
    row["index"] = payload["index"]
    return row


def cmd_sweep(args) -> int:
    with open(args.manifest, encoding="utf-8") as f:
        sweep_spec = json.load(f)
    configs = sweep_spec.get("configs")
    if not configs:
        raise UsageError(f"{args.manifest}: no 'configs' listed")
    try:
        heads = [HeadConfig.from_dict(c) for c in configs]
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{args.manifest}: {exc}") from None
    seeds = sweep_spec.get("seeds")

    tcfg = _train_config(args)
    out_dir = _out_dir(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab_opts = {"min_count": args.min_count, "max_size": args.max_size,
                  "lowercase": args.lowercase}
    model_opts = {"d_hidden": args.d_hidden, "d_emb": args.d_emb,
                  "dtype": args.dtype}

    payloads = []
    for ci, head in enumerate(heads):
        run_seeds = seeds if seeds is not None else [args.seed + ci]
        for seed in run_seeds:
            run_dir = out_dir / "runs" / f"{ci:03d}_{head.slug()}_s{seed}"
            run_tcfg = dataclasses.replace(tcfg, seed=seed)
            payloads.append({
                "index": len(payloads),
                "head": head.to_dict(),
                "train": {
                    "optimizer": run_tcfg.optimizer.value,
                    "learning_rate": run_tcfg.learning_rate,
                    "grad_clip_norm": run_tcfg.grad_clip_norm,
                    "epochs": run_tcfg.epochs,
                    "bptt_len": run_tcfg.bptt_len,
                    "num_streams": run_tcfg.num_streams,
                    "seed": run_tcfg.seed,
                    "lr_decay": run_tcfg.lr_decay,
                },
                "train_corpus": str(args.train_corpus),
                "valid_corpus": str(args.valid_corpus or args.train_corpus),
                "vocab_opts": vocab_opts,
                "model_opts": model_opts,
                "run_dir": str(run_dir),
            })

    manifest = _manifest("sweep", args, heads[0], tcfg, out_dir,
                         extra={"sweep_manifest": str(args.manifest),
                                "num_runs": len(payloads)})
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    if args.workers > 1:
        # keep worker math single-threaded and deterministic
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = "1"
        ctx = mp.get_context("spawn")
        with ctx.Pool(args.workers) as pool:
            rows = pool.map(_sweep_worker, payloads)
    else:
        rows = [_sweep_worker(p) for p in payloads]
    rows.sort(key=lambda r: r["index"])

    header = ("index\tslug\tseed\tfinal_train_ppl\tfinal_valid_ppl"
              "\tbest_valid_ppl")
    lines = [header]
    for r in rows:
        lines.append(f"{r['index']}\t{r['slug']}\t{r['seed']}"
                     f"\t{r['final_train_ppl']:.6f}"
                     f"\t{r['final_valid_ppl']:.6f}"
                     f"\t{r['best_valid_ppl']:.6f}")
    text = "\n".join(lines) + "\n"
    with open(out_dir / "sweep.tsv", "w", encoding="utf-8") as f:
        f.write(text)
    print(text, end="")
    return 0


def cmd_export_embeddings(args) -> int:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    k = args.top_k if args.top_k is not None else vocab.size
    with open(args.out_file, "w", encoding="utf-8") as f:
        for word, row in zip(vocab.words[:k], model.w_out.values[:k]):
            cells = "\t".join(f"{v:.8g}" for v in row)
            f.write(f"{word}\t{cells}\n")
    print(f"written\t{args.out_file}")
    return 0


def cmd_plot(args) -> int:
    model, vocab, head = load_checkpoint(args.checkpoint)
    projection = viz.project(model.w_out.values, vocab, top_k=args.top_k,
                             seed=args.seed, tsne_iters=args.tsne_iters)
    ref = args.ref_word if args.ref_word is not None else vocab.words[0]
    projection = viz.align(projection, ref)
    viz.write_polar_svg(projection, args.out_file, title=head.slug())
    if args.tsv_file:
        viz.write_projection_tsv(projection, args.tsv_file)
    print(f"written\t{args.out_file}")
    return 0


def _read_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    for i, line in enumerate(read_lines(path)):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}: line {i + 1} must hold exactly two "
                             f"words")
        pairs.append((parts[0], parts[1]))
    if not pairs:
        raise ValueError(f"{path}: no word pairs found")
    return pairs


def cmd_angles(args) -> int:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    pairs = _read_pairs(args.pairs_file)
    angles = viz.angle_report(model.w_out.values, vocab, pairs)
    viz.write_angle_tsv(pairs, angles, args.out_file)
    for (a, b), angle in zip(pairs, angles):
        print(f"{a}\t{b}\t{angle:.6f}")
    return 0


def cmd_norms(args) -> int:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    report = viz.norm_report(model.w_out.values, vocab)
    viz.write_norms_tsv(report, args.out_file)
    flag = "\tdegenerate" if report.degenerate else ""
    print(f"pearson_norm_logcount\t{report.correlation:.6f}{flag}")
    return 0


def cmd_grad_check(args) -> int:
    rows = audit_head_gradients(seed=args.seed)
    print("margin\tf_mode\tg_mode\tclassic\tmax_rel_error")
    worst = 0.0
    for config, err in rows:
        worst = max(worst, err)
        print(f"{config.margin_family.value}\t{config.f_mode.value}"
              f"\t{config.g_mode.value}\t{int(config.classic_normalize)}"
              f"\t{err:.3e}")
    if worst >= args.tolerance:
        print(f"FAILED: max error {worst:.3e} >= {args.tolerance:g}",
              file=sys.stderr)
        return 3
    print(f"ok: {len(rows)} configurations, max error {worst:.3e}")
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="marginlm",
                     description="LSTM language modeling with large-margin "
                                 "softmax heads")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("vocab", help="build a vocabulary TSV", parents=[])
    p.add_argument("corpus")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--max-size", type=int, default=None)
    p.add_argument("--lowercase", action="store_true")
    p.add_argument("--out-file", default="vocab.tsv")
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("train_corpus")
    p.add_argument("--valid-corpus", default=None)
    p.add_argument("--out", default=None,
                   help=f"output directory (default ${OUT_ENV_VAR} or .)")
    _add_head_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")
    p.add_argument("checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--streams", type=int, default=16)
    p.add_argument("--bptt", type=int, default=64)
    p.add_argument("--lowercase", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train a grid of head configs")
    p.add_argument("manifest", help="JSON file with a 'configs' list")
    p.add_argument("train_corpus")
    p.add_argument("--valid-corpus", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=1)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings",
                       help="dump output word vectors as TSV")
    p.add_argument("checkpoint")
    p.add_argument("--out-file", default="embeddings.tsv")
    p.add_argument("--top-k", type=int, default=None)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("plot", help="polar projection SVG of top-k words")
    p.add_argument("checkpoint")
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tsne-iters", type=int, default=1000)
    p.add_argument("--ref-word", default=None,
                   help="word aligned to angle 0 (default: most frequent)")
    p.add_argument("--out-file", default="projection.svg")
    p.add_argument("--tsv-file", default=None)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("angles", help="full-dimensional pair angles")
    p.add_argument("checkpoint")
    p.add_argument("--pairs-file", required=True,
                   help="text file, two words per line")
    p.add_argument("--out-file", default="angles.tsv")
    p.set_defaults(func=cmd_angles)

    p = sub.add_parser("norms", help="norm vs log-count report")
    p.add_argument("checkpoint")
    p.add_argument("--out-file", default="norms.tsv")
    p.set_defaults(func=cmd_norms)

    p = sub.add_parser("grad-check",
                       help="finite-difference audit of every head config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            raise UsageError("a subcommand is required (see --help)")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
