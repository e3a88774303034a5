"""Experiment runner: optimizer, batching, logging, checkpoint/resume.

Training is bit-reproducible given (config, dataset): epoch shuffles and
per-step dropout streams are derived statelessly from (seed, epoch) and
(seed, step), so resuming from a checkpoint continues the exact run. The
metrics CSV holds only deterministic columns; wall-clock timings go to a
sidecar CSV so the main log stays byte-stable across reruns.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, backward
from .evaluation import exact_match
from .losses import RegConfig, total_loss
from .model import ModelConfig, TransformerLM, load_checkpoint, save_checkpoint
from .tasks import (VARIANTS, assemble_sequence, load_dataset, load_manifest,
                    vocab_for_dataset)

METRICS_COLUMNS = ["step", "epoch", "loss_total", "loss_next", "loss_reg",
                   "eval_exact_match"]

# Regularizer coefficients per task family (multiplication vs the rest).
TASK_LAMBDAS = {"mult": (1.0, 0.004), "arith": (0.1, 0.5), "lis": (0.1, 0.5)}
TASK_BATCH = {"mult": 32, "arith": 128, "lis": 128}


class TrainingAborted(RuntimeError):
    def __init__(self, step, message):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    variant: str
    task: str = ""
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    eval_every: int = 0        # steps; 0 = evaluate only at the end
    eval_max: int = 256
    pause_k: int = 2
    grad_clip: float = 1.0     # 0 disables clipping
    checkpoint_every: int = 0  # steps; 0 = final checkpoint only
    log_every: int = 1
    reg: RegConfig = field(default_factory=RegConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=0))

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.reg.active and self.batch_size < 2:
            raise ValueError("regularized training needs batch_size >= 2")


def make_variant(variant: str, task: str, **overrides) -> TrainConfig:
    """Default configuration for one of the five training variants."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if task not in TASK_LAMBDAS:
        raise ValueError(f"unknown task {task!r}")
    lam1, lam2 = TASK_LAMBDAS[task] if variant in ("seqvcr", "seqvcr_pause") else (0.0, 0.0)
    pause_k = 2 if variant in ("pause", "seqvcr_pause") else 0
    cfg = TrainConfig(
        variant=variant,
        task=task,
        batch_size=TASK_BATCH[task],
        pause_k=pause_k,
        reg=RegConfig(lambda1=lam1, lambda2=lam2),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


# ---------------------------------------------------------------------------
# optimizer


def adamw_step(params: dict, grads: dict, moments: dict, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
    """One decoupled-weight-decay Adam update, in place.

    moments holds {"t": int, "m": {...}, "v": {...}}; decay applies to
    matrix-shaped parameters only (ndim >= 2), never to biases or gains.
    """
    b1, b2 = betas
    moments["t"] += 1
    t = moments["t"]
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = moments["m"][name]
        v = moments["v"][name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay and p.ndim >= 2:
            p -= lr * weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, moments


def init_moments(params: dict) -> dict:
    return {"t": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for name in grads:
            # grad arrays may be shared views; rebind rather than mutate
            grads[name] = grads[name] * scale
    return total


# ---------------------------------------------------------------------------
# batching


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 2, epoch])))
    return rng.permutation(n)


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 3, step])))


def _pad_batch(items, pad_id: int):
    """Right-pad assembled (ids, mask) pairs; build targets and masks."""
    width = max(len(ids) for ids, _ in items)
    n = len(items)
    ids = np.full((n, width), pad_id, dtype=np.int64)
    sup = np.zeros((n, width), dtype=bool)
    for i, (seq, mask) in enumerate(items):
        ids[i, :len(seq)] = seq
        sup[i, :len(mask)] = mask
    targets = np.zeros((n, width), dtype=np.int64)
    targets[:, :-1] = ids[:, 1:]
    target_mask = np.zeros((n, width), dtype=bool)
    target_mask[:, :-1] = sup[:, 1:]   # logits at t are scored against token t+1
    pad_mask = ids != pad_id
    return ids, targets, target_mask, pad_mask


# ---------------------------------------------------------------------------
# the loop


def train(cfg: TrainConfig, data_dir, out_dir, resume=None):
    """Run training; writes metrics.csv, metrics_timing.csv and checkpoints.

    Returns (final checkpoint path, metrics rows). Aborts with
    TrainingAborted on a non-finite loss, after flushing partial logs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(data_dir)
    vocab = vocab_for_dataset(manifest)
    train_samples = load_dataset(data_dir, "train")
    if not train_samples:
        raise ValueError("training split is empty")
    try:
        val_samples = load_dataset(data_dir, "val")
    except FileNotFoundError:
        val_samples = []

    model_cfg = cfg.model
    if model_cfg.vocab_size == 0:
        model_cfg = dataclasses.replace(model_cfg, vocab_size=len(vocab))
    cfg = dataclasses.replace(cfg, model=model_cfg, task=cfg.task or manifest["task"])

    assembled = [assemble_sequence(s, cfg.variant, vocab, pause_k=cfg.pause_k,
                                   max_len=model_cfg.max_seq_len)
                 for s in train_samples]
    steps_per_epoch = len(assembled) // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError("batch size larger than the training split")
    total_steps = cfg.epochs * steps_per_epoch

    if resume is not None:
        model, start_step, opt_state, extra = load_checkpoint(resume)
        if extra.get("train_config") != _config_dict(cfg):
            raise ValueError("checkpoint train config does not match the requested run")
        moments = opt_state
    else:
        model = TransformerLM(model_cfg, seed=cfg.seed)
        start_step = 0
        moments = init_moments({k: v.data for k, v in model.params.items()})

    rows = []
    timing = []
    perm = None
    perm_epoch = -1
    t_start = time.perf_counter()

    def flush():
        _write_metrics(out_dir / "metrics.csv", rows)
        _write_timing(out_dir / "metrics_timing.csv", timing)

    def run_eval():
        if not val_samples:
            return ""
        subset = val_samples[:cfg.eval_max]
        return exact_match(model, subset, cfg.variant, vocab, pause_k=cfg.pause_k)

    ckpt_path = out_dir / "checkpoint.zip"
    for step in range(start_step, total_steps):
        epoch = step // steps_per_epoch
        if epoch != perm_epoch:
            perm = _epoch_permutation(cfg.seed, epoch, len(assembled))
            perm_epoch = epoch
        lo = (step % steps_per_epoch) * cfg.batch_size
        batch = [assembled[i] for i in perm[lo:lo + cfg.batch_size]]
        ids, targets, target_mask, pad_mask = _pad_batch(batch, vocab.pad_id)

        rng = _step_rng(cfg.seed, step)
        model.zero_grad()
        with Tape() as tape:
            res = model.forward(ids, with_projection=cfg.reg.active,
                                train_mode=True, rng=rng,
                                reg_layer=cfg.reg.reg_layer)
            loss, comps = total_loss(res.logits, targets, target_mask,
                                     res.projected, cfg.reg, pad_mask=pad_mask)
        if not np.isfinite(loss.data):
            flush()
            raise TrainingAborted(step, f"non-finite loss at step {step}")
        backward(tape, loss)
        grads = {k: t.grad for k, t in model.params.items() if t.grad is not None}
        if cfg.grad_clip:
            clip_global_norm(grads, cfg.grad_clip)
        adamw_step({k: t.data for k, t in model.params.items()}, grads, moments,
                   lr=cfg.learning_rate)

        if (step + 1) % cfg.log_every == 0 or step + 1 == total_steps:
            em = ""
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                em = run_eval()
            rows.append({"step": step + 1, "epoch": epoch,
                         "loss_total": comps.total, "loss_next": comps.next_token,
                         "loss_reg": comps.regularizer, "eval_exact_match": em})
            timing.append({"step": step + 1,
                           "wall_clock_s": time.perf_counter() - t_start})
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_step{step + 1}.zip", model,
                            step=step + 1, optimizer_state=moments,
                            extra={"train_config": _config_dict(cfg)})

    final_em = run_eval()
    if rows and final_em != "":
        rows[-1]["eval_exact_match"] = final_em
    save_checkpoint(ckpt_path, model, step=total_steps, optimizer_state=moments,
                    extra={"train_config": _config_dict(cfg)})
    flush()
    return ckpt_path, rows


def _config_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def _write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([r["step"], r["epoch"], repr(r["loss_total"]),
                        repr(r["loss_next"]), repr(r["loss_reg"]),
                        "" if r["eval_exact_match"] == "" else repr(r["eval_exact_match"])])


def _write_timing(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "wall_clock_s"])
        for r in rows:
            w.writerow([r["step"], f"{r['wall_clock_s']:.6f}"])


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({
                "step": int(r["step"]),
                "epoch": int(r["epoch"]),
                "loss_total": float(r["loss_total"]),
                "loss_next": float(r["loss_next"]),
                "loss_reg": float(r["loss_reg"]),
                "eval_exact_match": (float(r["eval_exact_match"])
                                     if r["eval_exact_match"] else ""),
            })
    return rows


# ---------------------------------------------------------------------------
# flat key=value config files


_CONFIG_KEYS = {
    "variant": str, "task": str, "learning_rate": float, "batch_size": int,
    "epochs": int, "seed": int, "eval_every": int, "eval_max": int,
    "pause_k": int, "grad_clip": float, "checkpoint_every": int, "log_every": int,
}
_REG_KEYS = {"lambda1": float, "lambda2": float, "eta": float,
             "cov_mode": str, "reg_layer": int}
_MODEL_KEYS = {"vocab_size": int, "d_model": int, "n_layers": int, "n_heads": int,
               "max_seq_len": int, "dropout_p": float, "proj_dim": int}


def format_config(cfg: TrainConfig) -> str:
    lines = [f"{k}={getattr(cfg, k)}" for k in _CONFIG_KEYS]
    lines += [f"{k}={getattr(cfg.reg, k)}" for k in _REG_KEYS]
    lines += [f"{k}={getattr(cfg.model, k)}" for k in _MODEL_KEYS]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> TrainConfig:
    top, reg, mdl = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key in _CONFIG_KEYS:
            top[key] = _CONFIG_KEYS[key](val)
        elif key in _REG_KEYS:
            reg[key] = _REG_KEYS[key](val)
        elif key in _MODEL_KEYS:
            mdl[key] = _MODEL_KEYS[key](val)
        else:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
    if "variant" not in top:
        raise ValueError("config must set variant")
    return TrainConfig(reg=RegConfig(**reg),
                       model=ModelConfig(**{"vocab_size": 0, **mdl}), **top)
