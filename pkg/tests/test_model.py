"""Transformer forward semantics, causality, gradient checks, checkpoints."""

import numpy as np
import pytest

import seqvcr.autodiff as ad
from seqvcr.autodiff import Tape, Tensor, backward
from seqvcr.losses import RegConfig, total_loss
from seqvcr.model import (ModelConfig, TransformerLM, load_checkpoint,
                          save_checkpoint)

from util import rel_err

RNG = np.random.default_rng(777)


def small_model(**kw):
    args = dict(vocab_size=11, d_model=16, n_layers=2, n_heads=4,
                max_seq_len=32, dropout_p=0.0)
    args.update(kw)
    return TransformerLM(ModelConfig(**args), seed=3)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=8, n_heads=4, dropout_p=1.0)


def test_embed_zero_tables_give_zero():
    m = small_model()
    m.params["tok_emb"].data[:] = 0.0
    m.params["pos_emb"].data[:] = 0.0
    out = m.embed(np.array([1, 2, 3]))
    assert np.all(out.data == 0.0)


def test_embed_row_reproduction():
    m = small_model()
    m.params["tok_emb"].data[:] = 0.0
    m.params["pos_emb"].data[:] = 0.0
    row = RNG.normal(size=16)
    m.params["tok_emb"].data[4] = row
    out = m.embed(np.array([4, 1, 4]))
    assert np.array_equal(out.data[0], row)
    assert np.array_equal(out.data[2], row)


def test_embed_is_token_plus_position():
    m = small_model()
    toks = np.array([5, 0, 9, 2])
    out = m.embed(toks)
    for t, tok in enumerate(toks):
        expected = m.params["tok_emb"].data[tok] + m.params["pos_emb"].data[t]
        assert np.abs(out.data[t] - expected).max() < 1e-15


def test_embed_rejects_overlong_and_bad_ids():
    m = small_model()
    with pytest.raises(ValueError, match="max_seq_len"):
        m.embed(np.zeros(33, dtype=int))
    with pytest.raises(ValueError, match="out of range"):
        m.embed(np.array([0, 11]))


def test_decoder_block_zeroed_is_identity():
    m = small_model()
    m.params["block0.attn_out_w"].data[:] = 0.0
    m.params["block0.attn_out_b"].data[:] = 0.0
    m.params["block0.mlp_w2"].data[:] = 0.0
    m.params["block0.mlp_b2"].data[:] = 0.0
    h = Tensor(RNG.normal(size=(5, 16)))
    out = m.decoder_block(h, 0)
    assert np.abs(out.data - h.data).max() < 1e-15


def test_decoder_block_causality_bit_exact():
    m = small_model()
    toks = RNG.integers(0, 11, size=8)
    h = m.embed(toks)
    out1 = m.decoder_block(h, 0).data.copy()
    toks2 = toks.copy()
    toks2[6] = (toks2[6] + 1) % 11  # perturb a late token
    out2 = m.decoder_block(m.embed(toks2), 0).data
    assert np.array_equal(out1[:6], out2[:6])


def test_decoder_block_matches_straightline_reimplementation():
    m = small_model(n_heads=2)
    c = m.config
    h = RNG.normal(size=(3, 16))
    out = m.decoder_block(Tensor(h), 0).data

    # independent straight-line numpy reimplementation
    def ln(a, g, b):
        mu = a.mean(-1, keepdims=True)
        var = a.var(-1, keepdims=True)
        return (a - mu) / np.sqrt(var + c.ln_eps) * g + b

    p = {k.replace("block0.", ""): v.data for k, v in m.params.items()
         if k.startswith("block0.")}
    x = ln(h, p["ln1_g"], p["ln1_b"])
    qkv = x @ p["attn_qkv_w"] + p["attn_qkv_b"]
    hd = c.d_model // c.n_heads
    heads = []
    for i in range(c.n_heads):
        q = qkv[:, i * hd:(i + 1) * hd]
        k = qkv[:, c.d_model + i * hd:c.d_model + (i + 1) * hd]
        v = qkv[:, 2 * c.d_model + i * hd:2 * c.d_model + (i + 1) * hd]
        s = q @ k.T / np.sqrt(hd)
        s = s + np.triu(np.full((3, 3), -1e30), k=1)
        e = np.exp(s - s.max(-1, keepdims=True))
        a = e / e.sum(-1, keepdims=True)
        heads.append(a @ v)
    ctx = np.concatenate(heads, axis=-1)
    h2 = h + ctx @ p["attn_out_w"] + p["attn_out_b"]
    x = ln(h2, p["ln2_g"], p["ln2_b"])
    from scipy.special import erf
    u = x @ p["mlp_w1"] + p["mlp_b1"]
    u = u * 0.5 * (1 + erf(u / np.sqrt(2)))
    expected = h2 + u @ p["mlp_w2"] + p["mlp_b2"]
    assert np.abs(out - expected).max() < 1e-10


def test_forward_degenerate_no_layers():
    m = small_model(n_layers=0)
    toks = np.array([1, 2, 3])
    res = m.forward(toks)
    emb = m.embed(toks)
    final = ad.layer_norm(emb, m.params["ln_f_g"], m.params["ln_f_b"], m.config.ln_eps)
    expected = final.data @ m.params["cls_w"].data + m.params["cls_b"].data
    assert np.abs(res.logits.data - expected).max() < 1e-12
    assert len(res.layer_activations) == 1


def test_forward_causality_over_random_inputs():
    m = small_model()
    for _ in range(5):
        toks = RNG.integers(0, 11, size=10)
        base = m.forward(toks).logits.data.copy()
        t = int(RNG.integers(1, 9))
        toks2 = toks.copy()
        toks2[t + 1:] = RNG.integers(0, 11, size=len(toks) - t - 1)
        pert = m.forward(toks2).logits.data
        assert np.array_equal(base[:t + 1], pert[:t + 1])


def test_forward_deterministic():
    m = small_model()
    toks = RNG.integers(0, 11, size=7)
    a = m.forward(toks).logits.data
    b = m.forward(toks).logits.data
    assert np.array_equal(a, b)


def test_forward_captures_all_activations():
    m = small_model()
    res = m.forward(np.array([1, 2, 3]), with_projection=True)
    assert len(res.layer_activations) == m.config.n_layers + 1
    assert res.projected.data.shape == (3, m.config.proj_dim)


def test_param_count_formula():
    for kw in [{}, {"n_layers": 3, "d_model": 24, "n_heads": 3}, {"proj_dim": 7}]:
        m = small_model(**kw)
        assert m.param_count() == m.expected_param_count()


def test_projection_identity_and_zero():
    m = small_model(proj_dim=16)
    m.params["proj_w"].data[:] = np.eye(16)
    m.params["proj_b"].data[:] = 0.0
    h = Tensor(RNG.normal(size=(4, 16)))
    assert np.abs(m.project_for_reg(h).data - h.data).max() < 1e-15
    m.params["proj_w"].data[:] = 0.0
    assert np.all(m.project_for_reg(h).data == 0.0)


def test_projection_gradient_isolation():
    # next-token loss only: projection weights get exactly zero gradient
    m = small_model()
    toks = RNG.integers(0, 11, size=(2, 6))
    targets = RNG.integers(0, 11, size=(2, 6))
    cfg = RegConfig(lambda1=0.0, lambda2=0.0)
    m.zero_grad()
    with Tape() as tape:
        res = m.forward(toks, with_projection=True)
        loss, _ = total_loss(res.logits, targets, np.ones((2, 6), dtype=bool),
                             res.projected, cfg)
    backward(tape, loss)
    assert m.params["proj_w"].grad is None or np.all(m.params["proj_w"].grad == 0.0)
    assert m.params["cls_w"].grad is not None and np.any(m.params["cls_w"].grad != 0.0)


def test_regularizer_reaches_trunk_but_not_classifier():
    m = small_model()
    toks = RNG.integers(0, 11, size=(4, 6))
    m.zero_grad()
    with Tape() as tape:
        res = m.forward(toks, with_projection=True)
        from seqvcr.losses import per_position_covariance, seq_vcr_loss
        loss = seq_vcr_loss(per_position_covariance(res.projected),
                            RegConfig(lambda1=1.0, lambda2=0.1))
    backward(tape, loss)
    assert np.any(m.params["proj_w"].grad != 0.0)
    assert np.any(m.params["tok_emb"].grad != 0.0)  # flows into the trunk
    assert m.params["cls_w"].grad is None           # classifier untouched


def test_full_model_gradcheck_sampled_params():
    """Finite-difference check through the whole model + total loss."""
    m = small_model(d_model=8, n_heads=2, n_layers=2, proj_dim=6)
    toks = RNG.integers(0, 11, size=(2, 5))
    targets = RNG.integers(0, 11, size=(2, 5))
    mask = np.ones((2, 5), dtype=bool)
    cfg = RegConfig(lambda1=0.7, lambda2=0.3)

    def loss_value():
        res = m.forward(toks, with_projection=True)
        loss, _ = total_loss(res.logits, targets, mask, res.projected, cfg)
        return loss

    m.zero_grad()
    with Tape() as tape:
        loss = loss_value()
    backward(tape, loss)

    h = 1e-4
    rng = np.random.default_rng(0)
    names = list(m.params)
    for _ in range(40):
        name = names[rng.integers(len(names))]
        p = m.params[name]
        idx = tuple(rng.integers(s) for s in p.data.shape)
        orig = p.data[idx]
        p.data[idx] = orig + h
        fp = loss_value().item()
        p.data[idx] = orig - h
        fm = loss_value().item()
        p.data[idx] = orig
        fd = (fp - fm) / (2 * h)
        an = p.grad[idx] if p.grad is not None else 0.0
        denom = max(abs(fd), abs(an), 1e-8)
        assert abs(fd - an) / denom < 1e-4, f"{name}{idx}: fd={fd}, autodiff={an}"


def test_generate_stop_token_and_zero_budget():
    m = small_model()
    m.params["cls_b"].data[:] = 0.0
    m.params["cls_b"].data[7] = 100.0  # always favor token 7
    assert m.generate([1, 2, 3], max_new=5, stop_token=7) == []
    assert m.generate([1, 2, 3], max_new=0) == []


def test_generate_rejects_overlong_prompt():
    m = small_model()
    with pytest.raises(ValueError):
        m.generate(list(range(5)) * 6, max_new=5)


def test_generate_batch_matches_serial():
    m = small_model()
    prompts = RNG.integers(0, 11, size=(4, 5))
    batch = m.generate_batch(prompts, max_new=6, stop_token=7)
    for row, cont in zip(prompts, batch):
        assert cont == m.generate(row, max_new=6, stop_token=7)


def test_dropout_only_in_train_mode():
    m = small_model(dropout_p=0.5)
    toks = RNG.integers(0, 11, size=6)
    a = m.forward(toks).logits.data
    b = m.forward(toks).logits.data
    assert np.array_equal(a, b)
    rng = np.random.Generator(np.random.Philox(1))
    c = m.forward(toks, train_mode=True, rng=rng).logits.data
    assert not np.array_equal(a, c)


def test_checkpoint_bit_exact_roundtrip(tmp_path):
    m = small_model()
    opt = {"t": 17,
           "m": {k: RNG.normal(size=v.data.shape) for k, v in m.params.items()},
           "v": {k: np.abs(RNG.normal(size=v.data.shape)) for k, v in m.params.items()}}
    path = tmp_path / "ckpt.zip"
    save_checkpoint(path, m, step=123, optimizer_state=opt, extra={"note": "x"})
    m2, step, opt2, extra = load_checkpoint(path)
    assert step == 123 and extra == {"note": "x"}
    assert m2.config == m.config
    for k in m.params:
        assert np.array_equal(m.params[k].data, m2.params[k].data)
        assert np.array_equal(opt["m"][k], opt2["m"][k])
        assert np.array_equal(opt["v"][k], opt2["v"][k])
    assert opt2["t"] == 17
