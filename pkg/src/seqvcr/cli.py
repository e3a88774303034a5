"""Command-line front end: gen, train, probe, and eval subcommands.

Every subcommand writes a run manifest (command line, config snapshot,
dataset hashes, seed, timestamp) into its output directory before any long
computation starts, so a run can always be re-issued verbatim. Relative
output paths resolve under $SEQVCR_OUTPUT_ROOT when that variable is set.

Exit codes: 0 success, 1 usage or input error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .entropy import (entropy_histogram, layer_entropy_profile,
                      write_histogram_csv, write_profile_csv)
from .evaluation import evaluate, measure_throughput
from .model import load_checkpoint
from .tasks import (TASKS, VARIANTS, DatasetSpec, assemble_sequence,
                    load_dataset, load_manifest, vocab_for_dataset,
                    write_dataset)
from .training import (TrainingAborted, format_config, make_variant,
                       parse_config, train)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self.prog + ": error: " + message)


def _out_path(raw) -> Path:
    p = Path(raw)
    root = os.environ.get("SEQVCR_OUTPUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


_current_argv: list[str] = []


def write_run_manifest(out_dir: Path, config_snapshot, dataset_hashes, seed):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": ["seqvcr"] + _current_argv,
        "config": config_snapshot,
        "dataset_sha256": dataset_hashes,
        "code_version": __version__,
        "seed": seed,
        "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    params = {}
    if args.task == "mult":
        params["n_digits"] = args.digits
        if args.reverse_digits:
            params["reverse_digits"] = True
    elif args.task == "arith":
        params["n_operators"] = args.ops
        params["prime"] = args.prime
    else:
        params["seq_len"] = args.len
    spec = DatasetSpec(task=args.task, count=args.count, seed=args.seed,
                       params=params)
    out = _out_path(args.out)
    write_run_manifest(out, dataclasses.asdict(spec), {}, args.seed)
    manifest = write_dataset(out, spec, force=args.force)
    print(f"wrote {sum(manifest['counts'].values())} samples to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


_TRAIN_OVERRIDES = ["learning_rate", "batch_size", "epochs", "seed",
                    "eval_every", "eval_max", "pause_k", "grad_clip",
                    "checkpoint_every", "log_every"]
_MODEL_OVERRIDES = ["d_model", "n_layers", "n_heads", "max_seq_len",
                    "dropout_p", "proj_dim"]
_REG_OVERRIDES = ["lambda1", "lambda2", "eta", "reg_layer", "cov_mode"]


def _build_train_config(args, manifest):
    if args.config:
        cfg = parse_config(Path(args.config).read_text())
        if args.variant and args.variant != cfg.variant:
            raise ValueError("--variant conflicts with the config file")
    else:
        if not args.variant:
            raise ValueError("--variant is required without --config")
        cfg = make_variant(args.variant, manifest["task"])
    for name in _TRAIN_OVERRIDES:
        val = getattr(args, name)
        if val is not None:
            setattr(cfg, name, val)
    for name in _MODEL_OVERRIDES:
        val = getattr(args, name)
        if val is not None:
            setattr(cfg.model, name, val)
    for name in _REG_OVERRIDES:
        val = getattr(args, name)
        if val is not None:
            setattr(cfg.reg, name, val)
    if cfg.model.proj_dim == 0:
        cfg.model.proj_dim = 4 * cfg.model.d_model
    return cfg


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    manifest = load_manifest(data_dir)
    cfg = _build_train_config(args, manifest)

    if args.dump_batch:
        vocab = vocab_for_dataset(manifest)
        for s in load_dataset(data_dir, "train")[:args.dump_batch]:
            ids, mask = assemble_sequence(s, cfg.variant, vocab,
                                          pause_k=cfg.pause_k)
            marks = "".join("^" if m else "." for m in mask)
            print(vocab.decode(ids))
            print(marks)
        return 0

    out = _out_path(args.out)
    write_run_manifest(out, format_config(cfg), manifest["sha256"], cfg.seed)
    (out / "config.txt").write_text(format_config(cfg))
    try:
        ckpt, rows = train(cfg, data_dir, out, resume=args.resume)
    except TrainingAborted as err:
        print(f"aborted: {err} (partial logs kept in {out})", file=sys.stderr)
        return 2
    last = rows[-1] if rows else None
    if last is not None:
        print(f"finished {last['step']} steps; final loss "
              f"{last['loss_total']:.4f}; checkpoint {ckpt}")
    return 0


# ---------------------------------------------------------------------------
# probe / eval helpers


def _load_run(checkpoint, data_dir, variant_flag, pause_flag):
    model, step, _, extra = load_checkpoint(checkpoint)
    manifest = load_manifest(data_dir)
    vocab = vocab_for_dataset(manifest)
    if model.config.vocab_size != len(vocab):
        raise ValueError(
            f"checkpoint vocab size {model.config.vocab_size} does not match "
            f"dataset vocab size {len(vocab)}")
    tc = extra.get("train_config", {})
    variant = variant_flag or tc.get("variant")
    if variant is None:
        raise ValueError("checkpoint records no variant; pass --variant")
    pause_k = pause_flag if pause_flag is not None else tc.get("pause_k", 2)
    return model, manifest, vocab, variant, pause_k


def cmd_probe(args) -> int:
    out = _out_path(args.out)
    model, manifest, vocab, variant, pause_k = _load_run(
        args.checkpoint, args.data, args.variant, args.pause_k)
    write_run_manifest(out, {"alpha": args.alpha, "variant": variant},
                       manifest["sha256"], 0)
    samples = load_dataset(args.data, args.split)[:args.max_samples]
    if not samples:
        raise ValueError(f"split {args.split!r} is empty")
    seqs = [assemble_sequence(s, variant, vocab, pause_k=pause_k)[0]
            for s in samples]
    run_id = args.run_id or Path(args.checkpoint).stem
    profile = layer_entropy_profile(model, seqs, alpha=args.alpha,
                                    pad_id=vocab.pad_id, run_id=run_id)
    write_profile_csv(out / "entropy_profile.csv", [profile])
    per_seq = [layer_entropy_profile(model, [s], alpha=args.alpha,
                                     pad_id=vocab.pad_id, run_id=run_id)
               for s in seqs]
    edges, counts = entropy_histogram(per_seq, n_bins=args.bins)
    write_histogram_csv(out / "entropy_histogram.csv", edges, counts)
    means = ", ".join(f"{v:.4f}" for v in profile.mean_entropy)
    print(f"layer mean entropies (nats): {means}")
    return 0


def cmd_eval(args) -> int:
    out = _out_path(args.out)
    model, manifest, vocab, variant, pause_k = _load_run(
        args.checkpoint, args.data, args.variant, args.pause_k)
    write_run_manifest(out, {"variant": variant}, manifest["sha256"], 0)
    samples = load_dataset(args.data, args.split)[:args.max_samples]
    if not samples:
        raise ValueError(f"split {args.split!r} is empty")

    base_rate = None
    if args.baseline_run:
        base_csv = Path(args.baseline_run) / "eval_report.csv"
        if base_csv.exists():
            for line in base_csv.read_text().splitlines():
                key, _, val = line.partition(",")
                if key == "throughput_examples_per_sec":
                    base_rate = float(val)
        if base_rate is None:
            print("warning: baseline run has no throughput; T_norm omitted",
                  file=sys.stderr)

    kwargs = {"n_examples": min(args.throughput_examples, len(samples)),
              "warmup": min(10, len(samples)), "trials": 3}
    report = evaluate(model, samples, variant, vocab, pause_k=pause_k,
                      with_throughput=args.throughput, base_rate=base_rate,
                      throughput_kwargs=kwargs)
    report.write_csv(out / "eval_report.csv")
    print(f"exact_match {report.exact_match:.4f}; "
          f"tokens/example {report.tokens_decoded_per_example:.2f}"
          + (f"; T_norm {report.t_norm:.3f}" if report.t_norm is not None else ""))
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="seqvcr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a task dataset")
    g.add_argument("--task", choices=TASKS, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--digits", type=int, default=2, help="factor width (mult)")
    g.add_argument("--reverse-digits", action="store_true")
    g.add_argument("--ops", type=int, default=4, help="operator count (arith)")
    g.add_argument("--prime", type=int, default=23, help="field modulus (arith)")
    g.add_argument("--len", type=int, default=50, help="sequence length (lis)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one experiment variant")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--dump-batch", type=int, default=0, metavar="N",
                   help="print N assembled training sequences and exit")
    for name in _TRAIN_OVERRIDES:
        kind = float if name in ("learning_rate", "grad_clip") else int
        t.add_argument("--" + name.replace("_", "-"), type=kind, default=None)
    for name in _MODEL_OVERRIDES:
        kind = float if name == "dropout_p" else int
        t.add_argument("--" + name.replace("_", "-"), type=kind, default=None)
    for name in _REG_OVERRIDES:
        kind = {"reg_layer": int, "cov_mode": str}.get(name, float)
        t.add_argument("--" + name.replace("_", "-"), type=kind, default=None)
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="layer entropy profile of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--max-samples", type=int, default=256)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--pause-k", type=int, default=None)
    p.add_argument("--run-id")
    p.set_defaults(func=cmd_probe)

    e = sub.add_parser("eval", help="accuracy and throughput of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--max-samples", type=int, default=1000)
    e.add_argument("--variant", choices=VARIANTS)
    e.add_argument("--pause-k", type=int, default=None)
    e.add_argument("--throughput", action="store_true")
    e.add_argument("--throughput-examples", type=int, default=200)
    e.add_argument("--baseline-run", help="run directory holding the plain "
                   "baseline's eval_report.csv, enables T_norm")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    global _current_argv
    _current_argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as err:  # argparse usage errors
        if isinstance(err.code, str):
            print(err.code, file=sys.stderr)
            return 1
        return 0 if err.code in (0, None) else 1
    except (ValueError, FileNotFoundError, FileExistsError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
