"""Synthetic task generators, tokenizer, and sequence assembly.

Three tasks: multi-digit multiplication, bracketed arithmetic expressions
evaluated in a prime field, and longest strictly increasing subsequence.
All text is whitespace-separated symbols so tokenization is an exact
round trip. Digits are one token each, most significant first.

Assembly variants:
  vanilla / seqvcr      input  answer <eos>
  cot                   input  cot = answer <eos>
  pause / seqvcr_pause  input  </pause_start> <pause>*k </pause_end> answer <eos>

The loss mask marks supervised target tokens: answer plus end-of-sequence
everywhere, plus the chain-of-thought tokens in the cot variant. Pause
frame tokens are never supervised.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
PAUSE, PAUSE_START, PAUSE_END = "<pause>", "</pause_start>", "</pause_end>"
SEP = "="
RESERVED = [PAD, BOS, EOS, PAUSE, PAUSE_START, PAUSE_END, SEP]

TASKS = ("mult", "arith", "lis")
VARIANTS = ("vanilla", "cot", "pause", "seqvcr", "seqvcr_pause")
PAUSE_VARIANTS = ("pause", "seqvcr_pause")

DATASET_FORMAT_VERSION = 1


class Vocab:
    """Dense bidirectional token-string <-> id map with reserved tokens."""

    def __init__(self, symbols):
        self.tokens = list(RESERVED) + [s for s in symbols if s not in RESERVED]
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate symbols in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def eos_id(self):
        return self.index[EOS]

    @property
    def pause_id(self):
        return self.index[PAUSE]

    @property
    def pause_start_id(self):
        return self.index[PAUSE_START]

    @property
    def pause_end_id(self):
        return self.index[PAUSE_END]

    def encode(self, text: str) -> list[int]:
        ids = []
        for sym in text.split():
            if sym not in self.index:
                raise ValueError(f"unknown symbol {sym!r}")
            ids.append(self.index[sym])
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)


def build_vocab(task: str, prime: int = 23, lis_max_value: int = 50) -> Vocab:
    if task == "mult":
        return Vocab([str(d) for d in range(10)] + ["*", "+"])
    if task == "arith":
        return Vocab([str(v) for v in range(prime)] + ["+", "-", "*", "/", "(", ")"])
    if task == "lis":
        return Vocab([str(v) for v in range(1, lis_max_value + 1)])
    raise ValueError(f"unknown task {task!r}")


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return vocab.encode(text)


def detokenize(ids, vocab: Vocab) -> str:
    return vocab.decode(ids)


@dataclass
class Sample:
    input_text: str
    cot_text: str
    answer_text: str
    meta: dict


@dataclass
class DatasetSpec:
    task: str
    count: int
    seed: int
    params: dict = field(default_factory=dict)
    splits: tuple = (0.9, 0.05, 0.05)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.count <= 0:
            raise ValueError("count must be positive")
        if abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


# ---------------------------------------------------------------------------
# multiplication


def _digits(n: int, reverse: bool = False) -> str:
    s = " ".join(str(n))
    return " ".join(reversed(s.split())) if reverse else s


def multiplication_cot(a: int, b: int, reverse_digits: bool = False) -> str:
    """Schoolbook trace: shifted partial products, then running sums."""
    parts = []
    partials = []
    for i, d in enumerate(reversed(str(b))):
        partials.append(a * int(d) * 10 ** i)
    parts.append(" + ".join(_digits(p, reverse_digits) for p in partials))
    sums = []
    acc = partials[0]
    for p in partials[1:]:
        acc += p
        sums.append(acc)
    for s in sums:
        parts.append(_digits(s, reverse_digits))
    return " = ".join(parts)


def gen_multiplication(n_digits: int, count: int, seed: int,
                       unique: bool = True, reverse_digits: bool = False) -> list[Sample]:
    """Uniform n-digit factor pairs; input "a * b =", answer the product."""
    if n_digits < 1:
        raise ValueError("n_digits must be >= 1")
    lo = 1 if n_digits == 1 else 10 ** (n_digits - 1)
    hi = 10 ** n_digits - 1
    space = (hi - lo + 1) ** 2
    if unique and count > space:
        raise ValueError(f"count {count} exceeds {space} distinct factor pairs")
    rng = np.random.Generator(np.random.Philox(seed))
    seen = set()
    samples = []
    while len(samples) < count:
        a = int(rng.integers(lo, hi + 1))
        b = int(rng.integers(lo, hi + 1))
        if unique:
            if (a, b) in seen:
                continue
            seen.add((a, b))
        samples.append(make_multiplication_sample(a, b, reverse_digits))
    return samples


def make_multiplication_sample(a: int, b: int, reverse_digits: bool = False) -> Sample:
    return Sample(
        input_text=f"{_digits(a, reverse_digits)} * {_digits(b, reverse_digits)} =",
        cot_text=multiplication_cot(a, b, reverse_digits),
        answer_text=_digits(a * b, reverse_digits),
        meta={"a": a, "b": b, "product": a * b},
    )


# ---------------------------------------------------------------------------
# arithmetic expressions over a prime field


def _field_eval(node, p):
    if node[0] == "num":
        return node[1] % p
    op, left, right = node
    lv, rv = _field_eval(left, p), _field_eval(right, p)
    if op == "+":
        return (lv + rv) % p
    if op == "-":
        return (lv - rv) % p
    if op == "*":
        return (lv * rv) % p
    if op == "/":
        if rv == 0:
            raise ZeroDivisionError
        return (lv * pow(rv, p - 2, p)) % p
    raise ValueError(op)


def _random_expr(n_ops, rng, p):
    """Random fully bracketed tree; division divisors resampled off zero."""
    if n_ops == 0:
        return ("num", int(rng.integers(0, p)))
    left_ops = int(rng.integers(0, n_ops))
    op = "+-*/"[int(rng.integers(0, 4))]
    left = _random_expr(left_ops, rng, p)
    right = _random_expr(n_ops - 1 - left_ops, rng, p)
    if op == "/":
        while _field_eval(right, p) == 0:
            right = _random_expr(n_ops - 1 - left_ops, rng, p)
    return (op, left, right)


def _render(node, top=True) -> str:
    if node[0] == "num":
        return str(node[1])
    op, left, right = node
    body = f"{_render(left, False)} {op} {_render(right, False)}"
    return body if top else f"( {body} )"


def _reduce_once(node, p):
    """Replace the leftmost innermost operation with its value; None if leaf."""
    if node[0] == "num":
        return None
    op, left, right = node
    if left[0] == "num" and right[0] == "num":
        return ("num", _field_eval(node, p))
    red = _reduce_once(left, p)
    if red is not None:
        return (op, red, right)
    return (op, left, _reduce_once(right, p))


def arithmetic_cot(tree, p) -> str:
    """One reduction per step, full expression re-rendered each time."""
    steps = []
    node = tree
    while node[0] != "num":
        node = _reduce_once(node, p)
        steps.append(_render(node))
    return " = ".join(steps)


def gen_arithmetic_expression(n_operators: int, count: int, seed: int,
                              prime: int = 23) -> list[Sample]:
    if n_operators < 1:
        raise ValueError("n_operators must be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    seen = set()
    samples = []
    while len(samples) < count:
        tree = _random_expr(n_operators, rng, prime)
        text = _render(tree) + " ="
        if text in seen:
            continue
        seen.add(text)
        value = _field_eval(tree, prime)
        samples.append(Sample(
            input_text=text,
            cot_text=arithmetic_cot(tree, prime),
            answer_text=str(value),
            meta={"value": value, "prime": prime, "n_operators": n_operators},
        ))
    return samples


# ---------------------------------------------------------------------------
# longest increasing subsequence


def lis_oracle(seq) -> tuple[int, list[int]]:
    """Quadratic DP: dp[i] = length of the LIS ending at i (strict increase)."""
    if len(seq) == 0:
        raise ValueError("sequence must be nonempty")
    dp = [1] * len(seq)
    for i in range(1, len(seq)):
        for j in range(i):
            if seq[j] < seq[i] and dp[j] + 1 > dp[i]:
                dp[i] = dp[j] + 1
    return max(dp), dp


def gen_lis(seq_len: int, count: int, seed: int,
            value_lo: int = 1, value_hi: int = 50) -> list[Sample]:
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    seen = set()
    samples = []
    while len(samples) < count:
        seq = [int(v) for v in rng.integers(value_lo, value_hi + 1, size=seq_len)]
        text = " ".join(str(v) for v in seq) + " ="
        if text in seen:
            continue
        seen.add(text)
        length, dp = lis_oracle(seq)
        samples.append(Sample(
            input_text=text,
            cot_text=" ".join(str(v) for v in dp) + f" = {length}",
            answer_text=str(length),
            meta={"sequence": seq, "dp": dp, "length": length},
        ))
    return samples


# ---------------------------------------------------------------------------
# assembly


def assemble_sequence(sample: Sample, variant: str, vocab: Vocab,
                      pause_k: int = 2, max_len: int | None = None):
    """Token ids plus a loss mask marking supervised target tokens."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if pause_k < 0:
        raise ValueError("pause count must be >= 0")
    inp = vocab.encode(sample.input_text)
    answer = vocab.encode(sample.answer_text) + [vocab.eos_id]
    ids = list(inp)
    mask = [False] * len(inp)
    if variant in PAUSE_VARIANTS:
        frame = [vocab.pause_start_id] + [vocab.pause_id] * pause_k + [vocab.pause_end_id]
        ids += frame
        mask += [False] * len(frame)
    elif variant == "cot":
        cot = vocab.encode(sample.cot_text) + [vocab.index[SEP]]
        ids += cot
        mask += [True] * len(cot)
    ids += answer
    mask += [True] * len(answer)
    if max_len is not None and len(ids) > max_len:
        raise ValueError(f"assembled length {len(ids)} exceeds limit {max_len}")
    return np.array(ids, dtype=np.int64), np.array(mask, dtype=bool)


def prompt_ids(sample: Sample, variant: str, vocab: Vocab, pause_k: int = 2):
    """Decode-time prompt: input plus the pause frame where configured."""
    ids = vocab.encode(sample.input_text)
    if variant in PAUSE_VARIANTS:
        ids += [vocab.pause_start_id] + [vocab.pause_id] * pause_k + [vocab.pause_end_id]
    return np.array(ids, dtype=np.int64)


# ---------------------------------------------------------------------------
# dataset generation with disjoint splits


def _generate_all(spec: DatasetSpec) -> list[Sample]:
    p = spec.params
    if spec.task == "mult":
        return gen_multiplication(p.get("n_digits", 2), spec.count, spec.seed,
                                  unique=p.get("unique", True),
                                  reverse_digits=p.get("reverse_digits", False))
    if spec.task == "arith":
        return gen_arithmetic_expression(p.get("n_operators", 4), spec.count,
                                         spec.seed, prime=p.get("prime", 23))
    return gen_lis(p.get("seq_len", 50), spec.count, spec.seed,
                   value_lo=p.get("value_lo", 1), value_hi=p.get("value_hi", 50))


def _split_sizes(count, fracs):
    sizes = [int(round(count * f)) for f in fracs]
    sizes[0] += count - sum(sizes)
    return sizes


def generate_dataset(spec: DatasetSpec) -> dict[str, list[Sample]]:
    """Split datasets with input strings disjoint across splits.

    When the requested count exceeds the distinct-input space (only
    possible for small multiplication settings), the distinct inputs are
    partitioned across splits first and each split is filled by sampling
    with replacement from its own partition, preserving disjointness.
    """
    rng = np.random.Generator(np.random.Philox(spec.seed + 1))
    sizes = _split_sizes(spec.count, spec.splits)
    names = ["train", "val", "test"]
    if spec.task == "mult":
        n_digits = spec.params.get("n_digits", 2)
        lo = 1 if n_digits == 1 else 10 ** (n_digits - 1)
        hi = 10 ** n_digits - 1
        space = (hi - lo + 1) ** 2
        if spec.count > space:
            rev = spec.params.get("reverse_digits", False)
            pairs = [(a, b) for a in range(lo, hi + 1) for b in range(lo, hi + 1)]
            order = rng.permutation(len(pairs))
            part_sizes = _split_sizes(space, spec.splits)
            out = {}
            start = 0
            for name, psize, want in zip(names, part_sizes, sizes):
                chunk = [pairs[i] for i in order[start:start + psize]]
                start += psize
                picks = rng.integers(0, len(chunk), size=want)
                out[name] = [make_multiplication_sample(*chunk[i], rev) for i in picks]
            return out
    samples = _generate_all(spec)
    order = rng.permutation(len(samples))
    out = {}
    start = 0
    for name, size in zip(names, sizes):
        out[name] = [samples[i] for i in order[start:start + size]]
        start += size
    return out


# ---------------------------------------------------------------------------
# file formats: JSONL records plus a sidecar manifest


def _record_line(s: Sample) -> str:
    return json.dumps({"input": s.input_text, "cot": s.cot_text,
                       "answer": s.answer_text, "meta": s.meta},
                      separators=(",", ":"))


def write_dataset(out_dir, spec: DatasetSpec, force: bool = False) -> dict:
    """Write train/val/test JSONL files and a manifest; returns the manifest."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists; pass force=True to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = generate_dataset(spec)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "task": spec.task,
        "params": spec.params,
        "count": spec.count,
        "seed": spec.seed,
        "splits": list(spec.splits),
        "counts": {},
        "sha256": {},
    }
    for name, samples in splits.items():
        path = out_dir / f"{name}.jsonl"
        payload = "".join(_record_line(s) + "\n" for s in samples).encode("utf-8")
        path.write_bytes(payload)
        manifest["counts"][name] = len(samples)
        manifest["sha256"][name] = hashlib.sha256(payload).hexdigest()
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


def load_dataset(data_dir, split: str) -> list[Sample]:
    path = Path(data_dir) / f"{split}.jsonl"
    samples = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        samples.append(Sample(input_text=rec["input"], cot_text=rec["cot"],
                              answer_text=rec["answer"], meta=rec["meta"]))
    return samples


def vocab_for_dataset(manifest: dict) -> Vocab:
    params = manifest.get("params", {})
    return build_vocab(manifest["task"], prime=params.get("prime", 23),
                       lis_max_value=params.get("value_hi", 50))
