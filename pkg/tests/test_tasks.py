"""Generator soundness vs independent oracles; tokenizer round trips; assembly."""

from bisect import bisect_left

import numpy as np
import pytest

from seqvcr.tasks import (DatasetSpec, Sample, Vocab, assemble_sequence,
                          build_vocab, detokenize, gen_arithmetic_expression,
                          gen_lis, gen_multiplication, generate_dataset,
                          lis_oracle, load_dataset, load_manifest,
                          make_multiplication_sample, prompt_ids, tokenize,
                          write_dataset)


def patience_lis(seq):
    """O(n log n) strict-LIS oracle via patience sorting."""
    tails = []
    for v in seq:
        i = bisect_left(tails, v)
        if i == len(tails):
            tails.append(v)
        else:
            tails[i] = v
    return len(tails)


def field_eval_text(text, p=23):
    """Independent recursive-descent evaluator over the rendered expression."""
    toks = text.replace("=", "").split()
    pos = [0]

    def atom():
        t = toks[pos[0]]
        if t == "(":
            pos[0] += 1
            v = expr()
            assert toks[pos[0]] == ")"
            pos[0] += 1
            return v
        pos[0] += 1
        return int(t) % p

    def expr():
        v = atom()
        while pos[0] < len(toks) and toks[pos[0]] in "+-*/":
            op = toks[pos[0]]
            pos[0] += 1
            r = atom()
            if op == "+":
                v = (v + r) % p
            elif op == "-":
                v = (v - r) % p
            elif op == "*":
                v = (v * r) % p
            else:
                v = (v * pow(r, p - 2, p)) % p
        return v

    return expr()


# ---------------------------------------------------------------------------
# tokenizer


def test_tokenize_round_trip():
    v = build_vocab("mult")
    assert tokenize("", v) == []
    assert detokenize([], v) == ""
    text = "1 2 * 3 4 ="
    assert detokenize(tokenize(text, v), v) == text


def test_unknown_symbol_named_in_error():
    v = build_vocab("mult")
    with pytest.raises(ValueError, match="'q'"):
        tokenize("1 q", v)


def test_vocab_reserved_tokens_dense_ids():
    for task in ("mult", "arith", "lis"):
        v = build_vocab(task)
        assert sorted(v.index.values()) == list(range(len(v)))
        for t in ("<pad>", "<eos>", "<pause>", "</pause_start>", "</pause_end>", "="):
            assert t in v.index


# ---------------------------------------------------------------------------
# multiplication


def test_paper_example_product():
    s = make_multiplication_sample(12345, 67890)
    assert s.answer_text.replace(" ", "") == "838102050"
    assert s.input_text == "1 2 3 4 5 * 6 7 8 9 0 ="


def test_one_digit_identity():
    s = make_multiplication_sample(1, 1)
    assert s.answer_text == "1"


def test_multiplication_against_bigint_oracle():
    samples = gen_multiplication(5, 1000, seed=11)
    for s in samples:
        a, b = s.meta["a"], s.meta["b"]
        assert int(s.answer_text.replace(" ", "")) == a * b
        assert 10000 <= a <= 99999 and 10000 <= b <= 99999


def test_multiplication_unique_and_space_guard():
    samples = gen_multiplication(1, 81, seed=0)
    assert len({s.input_text for s in samples}) == 81
    with pytest.raises(ValueError, match="distinct"):
        gen_multiplication(1, 82, seed=0)


def test_multiplication_cot_sums_to_product():
    for s in gen_multiplication(4, 20, seed=5):
        chunks = s.cot_text.split(" = ")
        partials = [int(x.replace(" ", "")) for x in chunks[0].split(" + ")]
        assert sum(partials) == s.meta["product"]
        assert int(chunks[-1].replace(" ", "")) == s.meta["product"]


def test_multiplication_determinism():
    a = gen_multiplication(3, 50, seed=9)
    b = gen_multiplication(3, 50, seed=9)
    assert [s.input_text for s in a] == [s.input_text for s in b]


# ---------------------------------------------------------------------------
# arithmetic expressions


def test_arithmetic_simple_value():
    assert field_eval_text("( 2 + 3 ) * 4 =") == 20
    assert field_eval_text("7 =") == 7


def test_arithmetic_against_independent_evaluator():
    for s in gen_arithmetic_expression(6, 300, seed=3):
        assert field_eval_text(s.input_text) == s.meta["value"]
        assert s.answer_text == str(s.meta["value"])


def test_arithmetic_cot_steps_reduce_one_op():
    for s in gen_arithmetic_expression(5, 30, seed=8):
        steps = [s.input_text.rstrip(" =")] + s.cot_text.split(" = ")
        for prev, cur in zip(steps, steps[1:]):
            # one operation disappears per step, value is preserved
            ops_prev = sum(prev.count(o) for o in "+-*/".replace("", " ").split())
            n_prev = sum(prev.split().count(o) for o in "+-*/")
            n_cur = sum(cur.split().count(o) for o in "+-*/")
            assert n_cur == n_prev - 1
            assert field_eval_text(cur + " =") == s.meta["value"]
        assert steps[-1] == s.answer_text


def test_arithmetic_tokens_all_in_vocab():
    v = build_vocab("arith")
    for s in gen_arithmetic_expression(4, 50, seed=1):
        ids = tokenize(s.input_text + " " + s.cot_text + " " + s.answer_text, v)
        assert detokenize(ids, v)


# ---------------------------------------------------------------------------
# LIS


def test_lis_oracle_hand_cases():
    assert lis_oracle([3, 1, 2]) == (2, [1, 1, 2])
    assert lis_oracle([1, 2, 3]) == (3, [1, 2, 3])
    assert lis_oracle([5, 5, 5]) == (1, [1, 1, 1])
    assert lis_oracle([9, 7, 5]) == (1, [1, 1, 1])


def test_lis_dp_vs_patience_sorting():
    rng = np.random.default_rng(4)
    for _ in range(300):
        seq = rng.integers(1, 51, size=100).tolist()
        length, dp = lis_oracle(seq)
        assert length == patience_lis(seq)


def test_lis_samples_sound():
    for s in gen_lis(50, 100, seed=6):
        length, dp = lis_oracle(s.meta["sequence"])
        assert s.answer_text == str(length)
        assert s.meta["dp"] == dp


# ---------------------------------------------------------------------------
# assembly


def test_assemble_vanilla_layout():
    v = build_vocab("mult")
    s = make_multiplication_sample(12, 34)
    ids, mask = assemble_sequence(s, "vanilla", v)
    n_in = len(s.input_text.split())
    n_ans = len(s.answer_text.split()) + 1  # + eos
    assert len(ids) == n_in + n_ans
    assert not mask[:n_in].any() and mask[n_in:].all()
    assert ids[-1] == v.eos_id


def test_assemble_pause_frame_layout():
    v = build_vocab("mult")
    s = make_multiplication_sample(12345, 67890)
    ids, mask = assemble_sequence(s, "seqvcr_pause", v, pause_k=2)
    n_in = len(s.input_text.split())
    n_ans = len(s.answer_text.split()) + 1
    assert len(ids) == n_in + 4 + n_ans  # k=2 frame adds exactly 4 tokens
    frame = ids[n_in:n_in + 4]
    assert list(frame) == [v.pause_start_id, v.pause_id, v.pause_id, v.pause_end_id]
    assert not mask[:n_in + 4].any()  # pause tokens never supervised


def test_assemble_pause_zero_reduces_to_empty_brackets():
    v = build_vocab("mult")
    s = make_multiplication_sample(3, 7)
    ids, _ = assemble_sequence(s, "pause", v, pause_k=0)
    vanilla, _ = assemble_sequence(s, "vanilla", v)
    assert list(ids) == (list(vanilla[:len(s.input_text.split())])
                         + [v.pause_start_id, v.pause_end_id]
                         + list(vanilla[len(s.input_text.split()):]))


def test_assemble_cot_supervises_cot_tokens():
    v = build_vocab("mult")
    s = make_multiplication_sample(12, 34)
    ids, mask = assemble_sequence(s, "cot", v)
    n_in = len(s.input_text.split())
    assert mask[n_in:].all() and not mask[:n_in].any()
    assert len(ids) > len(assemble_sequence(s, "vanilla", v)[0])


def test_assemble_rejects_overlong():
    v = build_vocab("mult")
    s = make_multiplication_sample(12345, 67890)
    with pytest.raises(ValueError, match="exceeds"):
        assemble_sequence(s, "cot", v, max_len=10)


def test_prompt_includes_frame_only_for_pause_variants():
    v = build_vocab("mult")
    s = make_multiplication_sample(12, 34)
    assert len(prompt_ids(s, "vanilla", v)) == len(s.input_text.split())
    assert len(prompt_ids(s, "seqvcr_pause", v, pause_k=3)) == len(s.input_text.split()) + 5


# ---------------------------------------------------------------------------
# dataset files


def test_dataset_write_deterministic(tmp_path):
    spec = DatasetSpec(task="lis", count=40, seed=7, params={"seq_len": 20})
    m1 = write_dataset(tmp_path / "a", spec)
    m2 = write_dataset(tmp_path / "b", spec)
    assert m1["sha256"] == m2["sha256"]
    with pytest.raises(FileExistsError):
        write_dataset(tmp_path / "a", spec)
    write_dataset(tmp_path / "a", spec, force=True)


def test_dataset_split_disjoint(tmp_path):
    spec = DatasetSpec(task="arith", count=100, seed=2, params={"n_operators": 4})
    splits = generate_dataset(spec)
    inputs = {k: {s.input_text for s in v} for k, v in splits.items()}
    assert not (inputs["train"] & inputs["test"])
    assert not (inputs["train"] & inputs["val"])
    assert sum(len(v) for v in splits.values()) == 100


def test_dataset_oversampled_small_space_disjoint():
    # more samples than distinct inputs: duplicates allowed inside a split,
    # but split input sets stay disjoint
    spec = DatasetSpec(task="mult", count=20000, seed=3, params={"n_digits": 2})
    splits = generate_dataset(spec)
    assert len(splits["train"]) == 18000
    tr = {s.input_text for s in splits["train"]}
    te = {s.input_text for s in splits["test"]}
    assert tr and te and not (tr & te)


def test_dataset_round_trip(tmp_path):
    spec = DatasetSpec(task="mult", count=50, seed=1, params={"n_digits": 3})
    write_dataset(tmp_path, spec)
    manifest = load_manifest(tmp_path)
    assert manifest["task"] == "mult"
    train = load_dataset(tmp_path, "train")
    assert len(train) == manifest["counts"]["train"]
    v = build_vocab("mult")
    for s in train:
        assert detokenize(tokenize(s.input_text, v), v) == s.input_text
        assert int(s.answer_text.replace(" ", "")) == s.meta["a"] * s.meta["b"]
