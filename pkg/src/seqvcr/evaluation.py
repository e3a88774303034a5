"""Post-training analyses: exact match, position-wise accuracy, throughput."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .model import TransformerLM
from .tasks import SEP, Sample, Vocab, assemble_sequence, prompt_ids


@dataclass
class EvalReport:
    exact_match: float
    per_position_accuracy: list[float]
    per_position_accuracy_free: list[float]
    tokens_decoded_per_example: float
    throughput_examples_per_sec: float | None = None
    t_norm: float | None = None

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerow(["exact_match", repr(self.exact_match)])
            w.writerow(["tokens_decoded_per_example", repr(self.tokens_decoded_per_example)])
            if self.throughput_examples_per_sec is not None:
                w.writerow(["throughput_examples_per_sec", repr(self.throughput_examples_per_sec)])
            if self.t_norm is not None:
                w.writerow(["t_norm", repr(self.t_norm)])
            for p, v in enumerate(self.per_position_accuracy):
                w.writerow([f"position_accuracy_{p}", repr(v)])
            for p, v in enumerate(self.per_position_accuracy_free):
                w.writerow([f"position_accuracy_free_{p}", repr(v)])


def _continuation_budget(samples, variant, vocab, pause_k) -> int:
    """Longest continuation any example needs, plus room for the stop token.

    For the reasoning-chain variant this covers the whole chain, not just
    the answer — the model has to emit the chain before it can answer.
    """
    longest = 0
    for s in samples:
        full, _ = assemble_sequence(s, variant, vocab, pause_k=pause_k)
        longest = max(longest, len(full) - len(prompt_ids(s, variant, vocab, pause_k)))
    return longest + 1


def _answer_tokens(cont, variant, vocab: Vocab):
    """Answer portion of a decoded continuation.

    Chain-of-thought decodes intermediate steps first; the answer is
    whatever follows the final separator token. Other variants decode the
    answer directly.
    """
    if variant != "cot":
        return cont
    sep_id = vocab.encode(SEP)[0]
    if sep_id not in cont:
        return []
    return cont[len(cont) - 1 - cont[::-1].index(sep_id):][1:]


def _decode_all(model: TransformerLM, samples, variant, vocab: Vocab, pause_k,
                max_new=None):
    """Greedy continuations for every sample, batched by prompt length."""
    if max_new is None:
        max_new = _continuation_budget(samples, variant, vocab, pause_k)
    groups: dict[int, list[int]] = {}
    prompts = []
    for i, s in enumerate(samples):
        p = prompt_ids(s, variant, vocab, pause_k)
        prompts.append(p)
        groups.setdefault(len(p), []).append(i)
    outs: list[list[int]] = [None] * len(samples)
    for length, idxs in sorted(groups.items()):
        batch = np.stack([prompts[i] for i in idxs])
        conts = model.generate_batch(batch, max_new=max_new, stop_token=vocab.eos_id)
        for i, c in zip(idxs, conts):
            outs[i] = c
    return outs


def exact_match(model: TransformerLM, samples: list[Sample], variant: str,
                vocab: Vocab, pause_k: int = 2) -> float:
    """Fraction of examples whose decoded answer string matches exactly."""
    if not samples:
        raise ValueError("evaluation set is empty")
    outs = _decode_all(model, samples, variant, vocab, pause_k)
    hits = 0
    for s, cont in zip(samples, outs):
        if vocab.decode(_answer_tokens(cont, variant, vocab)) == s.answer_text:
            hits += 1
    return hits / len(samples)


def position_accuracy(model: TransformerLM, samples: list[Sample], variant: str,
                      vocab: Vocab, pause_k: int = 2):
    """Per-answer-position accuracy, teacher-forced and free-running.

    Teacher-forced: position p is predicted with gold tokens at all earlier
    positions. Free-running: position p comes from the greedy decode.
    Positions are counted over each example's own answer length; the
    vectors span the longest answer in the set.
    """
    max_ans = max(len(s.answer_text.split()) for s in samples)
    correct_tf = np.zeros(max_ans)
    correct_fr = np.zeros(max_ans)
    totals = np.zeros(max_ans)

    outs = _decode_all(model, samples, variant, vocab, pause_k)
    for s, cont in zip(samples, outs):
        cont = _answer_tokens(cont, variant, vocab)
        ans = vocab.encode(s.answer_text)
        full, _ = assemble_sequence(s, variant, vocab, pause_k=pause_k)
        logits = model.forward(full).logits.data
        start = len(full) - len(ans) - 1  # index of the first answer token
        for p, tok in enumerate(ans):
            totals[p] += 1
            pred = int(np.argmax(logits[start + p - 1]))  # logits at t predict t+1
            if pred == tok:
                correct_tf[p] += 1
            if p < len(cont) and cont[p] == tok:
                correct_fr[p] += 1
    return (correct_tf / totals).tolist(), (correct_fr / totals).tolist()


def operation_count_annotation(n_digits: int, n_pairs: int = 1000, seed: int = 0):
    """Mean per-answer-position work in schoolbook multiplication.

    Counts, for each output digit position (most significant first), the
    digit multiplications plus carry additions that feed that column,
    averaged over random n-digit factor pairs.
    """
    if n_digits < 1:
        raise ValueError("n_digits must be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    lo = 1 if n_digits == 1 else 10 ** (n_digits - 1)
    hi = 10 ** n_digits - 1
    width = 2 * n_digits
    totals = np.zeros(width)
    for _ in range(n_pairs):
        a = int(rng.integers(lo, hi + 1))
        b = int(rng.integers(lo, hi + 1))
        counts = _schoolbook_ops(a, b, n_digits)
        totals += counts
    # trim leading always-zero columns (product may not reach 2n digits)
    return (totals / n_pairs).tolist()


def _schoolbook_ops(a: int, b: int, n: int):
    """Per-column op counts for a*b, columns reported MSB first, width 2n."""
    da = [int(c) for c in reversed(str(a))]
    db = [int(c) for c in reversed(str(b))]
    width = 2 * n
    ops = np.zeros(width)
    col_sum = [0] * width
    col_count = [0] * width
    for i, x in enumerate(da):
        for j, y in enumerate(db):
            col_sum[i + j] += x * y
            col_count[i + j] += 1
    carry = 0
    for k in range(width):
        ops[k] += col_count[k]                  # digit multiplications
        ops[k] += max(0, col_count[k] - 1)      # summing the column's products
        if carry:
            ops[k] += 1                         # folding the incoming carry
        carry = (col_sum[k] + carry) // 10
    return ops[::-1]                            # MSB first


def measure_throughput(model: TransformerLM, samples, variant, vocab, pause_k=2,
                       n_examples: int = 1000, warmup: int = 50, trials: int = 3,
                       max_new: int | None = None):
    """Median-of-trials examples/second for greedy decoding."""
    picked = (samples * ((n_examples + warmup) // len(samples) + 1))[:n_examples + warmup]
    _decode_all(model, picked[:warmup], variant, vocab, pause_k, max_new=max_new)
    rates = []
    body = picked[warmup:warmup + n_examples]
    for _ in range(trials):
        t0 = time.perf_counter()
        _decode_all(model, body, variant, vocab, pause_k, max_new=max_new)
        rates.append(len(body) / (time.perf_counter() - t0))
    return float(np.median(rates))


def normalized_throughput(target_rate: float, base_rate: float) -> float:
    """Relative inference speed of a configuration against the plain baseline."""
    if base_rate <= 0:
        raise ValueError("baseline throughput must be positive")
    return target_rate / base_rate


def mean_tokens_decoded(model, samples, variant, vocab, pause_k=2) -> float:
    outs = _decode_all(model, samples, variant, vocab, pause_k)
    # +1 for the stop token the model still has to emit
    return float(np.mean([len(c) + 1 for c in outs]))


def evaluate(model, samples, variant, vocab, pause_k=2,
             with_throughput: bool = False, base_rate: float | None = None,
             throughput_kwargs: dict | None = None) -> EvalReport:
    em = exact_match(model, samples, variant, vocab, pause_k)
    tf_acc, fr_acc = position_accuracy(model, samples, variant, vocab, pause_k)
    toks = mean_tokens_decoded(model, samples, variant, vocab, pause_k)
    rate = None
    t_norm = None
    if with_throughput:
        rate = measure_throughput(model, samples, variant, vocab, pause_k,
                                  **(throughput_kwargs or {}))
        if base_rate is not None:
            t_norm = normalized_throughput(rate, base_rate)
    return EvalReport(exact_match=em, per_position_accuracy=tf_acc,
                      per_position_accuracy_free=fr_acc,
                      tokens_decoded_per_example=toks,
                      throughput_examples_per_sec=rate, t_norm=t_norm)
