"""Decoder-only transformer built on the autodiff engine.

Pre-norm residual blocks (causal self-attention + GELU MLP of width
4*d_model), learned token and absolute positional embeddings, a final
layer norm, a linear classifier head, and a linear projection branch used
only by the regularizer. The projection branch hangs off a configurable
layer's activation and is never on the path to the logits, so next-token
gradients cannot reach it.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 256
    dropout_p: float = 0.1
    proj_dim: int = 0   # 0 -> default 4*d_model
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.proj_dim == 0:
            self.proj_dim = 4 * self.d_model


@dataclass
class ForwardResult:
    logits: Tensor                    # (..., T, vocab)
    layer_activations: list[Tensor]   # length n_layers + 1: embedding out, then each block
    projected: Tensor | None          # (..., T, proj_dim) when requested


class TransformerLM:
    """Model parameters plus forward / generate."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.Generator(np.random.Philox(seed)))

    def _add(self, name, array):
        self.params[name] = Tensor(array, requires_grad=True)

    def _init_params(self, rng):
        c = self.config
        std = 0.02

        def normal(*shape):
            return rng.normal(0.0, std, size=shape)

        self._add("tok_emb", normal(c.vocab_size, c.d_model))
        self._add("pos_emb", normal(c.max_seq_len, c.d_model))
        for i in range(c.n_layers):
            p = f"block{i}."
            self._add(p + "ln1_g", np.ones(c.d_model))
            self._add(p + "ln1_b", np.zeros(c.d_model))
            self._add(p + "attn_qkv_w", normal(c.d_model, 3 * c.d_model))
            self._add(p + "attn_qkv_b", np.zeros(3 * c.d_model))
            self._add(p + "attn_out_w", normal(c.d_model, c.d_model))
            self._add(p + "attn_out_b", np.zeros(c.d_model))
            self._add(p + "ln2_g", np.ones(c.d_model))
            self._add(p + "ln2_b", np.zeros(c.d_model))
            self._add(p + "mlp_w1", normal(c.d_model, 4 * c.d_model))
            self._add(p + "mlp_b1", np.zeros(4 * c.d_model))
            self._add(p + "mlp_w2", normal(4 * c.d_model, c.d_model))
            self._add(p + "mlp_b2", np.zeros(c.d_model))
        self._add("ln_f_g", np.ones(c.d_model))
        self._add("ln_f_b", np.zeros(c.d_model))
        self._add("cls_w", normal(c.d_model, c.vocab_size))
        self._add("cls_b", np.zeros(c.vocab_size))
        self._add("proj_w", normal(c.d_model, c.proj_dim))
        self._add("proj_b", np.zeros(c.proj_dim))

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def expected_param_count(self) -> int:
        c = self.config
        per_block = (2 * c.d_model                       # ln1
                     + 3 * c.d_model * c.d_model + 3 * c.d_model   # qkv
                     + c.d_model * c.d_model + c.d_model           # attn out
                     + 2 * c.d_model                     # ln2
                     + 4 * c.d_model * c.d_model + 4 * c.d_model   # mlp in
                     + 4 * c.d_model * c.d_model + c.d_model)      # mlp out
        return (c.vocab_size * c.d_model + c.max_seq_len * c.d_model
                + c.n_layers * per_block
                + 2 * c.d_model                          # final ln
                + c.d_model * c.vocab_size + c.vocab_size
                + c.d_model * c.proj_dim + c.proj_dim)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # ------------------------------------------------------------------
    # forward

    def embed(self, tokens) -> Tensor:
        """Token + positional embedding for (T,) or (N, T) int tokens."""
        tokens = np.asarray(tokens)
        t = tokens.shape[-1]
        if t > self.config.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {self.config.max_seq_len}")
        tok = ad.embedding(self.params["tok_emb"], tokens)
        pos = ad.embedding(self.params["pos_emb"], np.arange(t))
        return ad.add(tok, pos)

    def decoder_block(self, h: Tensor, layer_index: int, train_mode: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
        if not (0 <= layer_index < self.config.n_layers):
            raise ValueError(f"layer index {layer_index} out of range")
        c = self.config
        p = f"block{layer_index}."
        t = h.data.shape[-2]
        nh, hd = c.n_heads, c.d_model // c.n_heads
        batched = h.data.ndim == 3
        n = h.data.shape[0] if batched else 1

        x = ad.layer_norm(h, self.params[p + "ln1_g"], self.params[p + "ln1_b"], c.ln_eps)
        qkv = ad.linear(x, self.params[p + "attn_qkv_w"], self.params[p + "attn_qkv_b"])
        qkv = ad.reshape(qkv, (n, t, 3, nh, hd))
        qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))      # (3, N, nh, T, hd)
        q_, k_, v_ = (_index_axis0(qkv, i) for i in range(3))
        scores = ad.mul(ad.matmul(q_, ad.transpose(k_, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        mask = np.triu(np.full((t, t), -1e30), k=1)
        att = ad.softmax(ad.add(scores, mask), axis=-1)
        if train_mode and c.dropout_p > 0:
            att = ad.dropout(att, c.dropout_p, rng)
        ctx = ad.matmul(att, v_)                      # (N, nh, T, hd)
        ctx = ad.transpose(ctx, (0, 2, 1, 3))
        ctx = ad.reshape(ctx, (n, t, c.d_model) if batched else (t, c.d_model))
        attn_out = ad.linear(ctx, self.params[p + "attn_out_w"], self.params[p + "attn_out_b"])
        if train_mode and c.dropout_p > 0:
            attn_out = ad.dropout(attn_out, c.dropout_p, rng)
        h = ad.add(h, attn_out)

        x = ad.layer_norm(h, self.params[p + "ln2_g"], self.params[p + "ln2_b"], c.ln_eps)
        x = ad.gelu(ad.linear(x, self.params[p + "mlp_w1"], self.params[p + "mlp_b1"]))
        x = ad.linear(x, self.params[p + "mlp_w2"], self.params[p + "mlp_b2"])
        if train_mode and c.dropout_p > 0:
            x = ad.dropout(x, c.dropout_p, rng)
        return ad.add(h, x)

    def forward(self, tokens, with_projection: bool = False, train_mode: bool = False,
                rng: np.random.Generator | None = None,
                reg_layer: int = -1) -> ForwardResult:
        """Full forward pass; captures every layer's activation.

        reg_layer selects which activation feeds the projection branch
        (-1 = final block output, 0 = embedding output, etc.).
        """
        c = self.config
        if train_mode and c.dropout_p > 0 and rng is None:
            raise ValueError("train_mode with dropout needs an rng")
        h = self.embed(tokens)
        if train_mode and c.dropout_p > 0:
            h = ad.dropout(h, c.dropout_p, rng)
        acts = [h]
        for i in range(c.n_layers):
            h = self.decoder_block(h, i, train_mode=train_mode, rng=rng)
            acts.append(h)
        final = ad.layer_norm(h, self.params["ln_f_g"], self.params["ln_f_b"], c.ln_eps)
        logits = ad.linear(final, self.params["cls_w"], self.params["cls_b"])
        projected = None
        if with_projection:
            projected = self.project_for_reg(acts[reg_layer])
        return ForwardResult(logits=logits, layer_activations=acts, projected=projected)

    def project_for_reg(self, h: Tensor) -> Tensor:
        return ad.linear(h, self.params["proj_w"], self.params["proj_b"])

    # ------------------------------------------------------------------
    # decoding

    def generate(self, prompt, max_new: int, stop_token: int | None = None):
        """Greedy decoding; returns only the continuation, stop token excluded."""
        prompt = list(np.asarray(prompt).reshape(-1))
        if len(prompt) + max_new > self.config.max_seq_len:
            raise ValueError(
                f"prompt length {len(prompt)} + max_new {max_new} exceeds "
                f"max_seq_len {self.config.max_seq_len}")
        seq = list(prompt)
        out = []
        for _ in range(max_new):
            logits = self.forward(np.asarray(seq)).logits
            nxt = int(np.argmax(logits.data[-1]))
            if stop_token is not None and nxt == stop_token:
                break
            out.append(nxt)
            seq.append(nxt)
        return out

    def generate_batch(self, prompts: np.ndarray, max_new: int, stop_token: int | None = None):
        """Greedy decoding for a batch of equal-length prompts.

        Returns a list of continuations (stop token excluded). Matches
        ``generate`` output for each row.
        """
        n, t0 = prompts.shape
        if t0 + max_new > self.config.max_seq_len:
            raise ValueError("prompt + max_new exceeds max_seq_len")
        seq = np.asarray(prompts)
        done = np.zeros(n, dtype=bool)
        outs = [[] for _ in range(n)]
        for _ in range(max_new):
            logits = self.forward(seq).logits
            nxt = np.argmax(logits.data[:, -1, :], axis=-1).astype(seq.dtype)
            for j in range(n):
                if done[j]:
                    continue
                if stop_token is not None and nxt[j] == stop_token:
                    done[j] = True
                else:
                    outs[j].append(int(nxt[j]))
            if done.all():
                break
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
        return outs


def _index_axis0(x: Tensor, i: int) -> Tensor:
    """Select index i along the leading axis, with scatter-back gradient."""
    out_data = x.data[i]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return ad._record("index_axis0", (x,), out_data, vjp)


# ---------------------------------------------------------------------------
# checkpoint serialization: zip of raw little-endian float64 arrays + JSON meta


def save_checkpoint(path, model: TransformerLM, step: int = 0,
                    optimizer_state: dict | None = None, extra: dict | None = None):
    """Versioned container: model config, parameters, optional optimizer
    moments, step counter. Bit-exact round trip (raw float64 payloads)."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "step": step,
        "param_names": list(model.params.keys()),
        "shapes": {k: list(v.data.shape) for k, v in model.params.items()},
        "has_optimizer": optimizer_state is not None,
        "extra": extra or {},
    }
    def entry(zf, name, payload):
        # fixed timestamp so identical runs produce byte-identical archives
        info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, payload)

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, t in model.params.items():
            entry(zf, "param/" + name, _tobytes(t.data))
        if optimizer_state is not None:
            meta["optimizer_keys"] = sorted(optimizer_state["m"].keys())
            meta["optimizer_t"] = optimizer_state["t"]
            for name in meta["optimizer_keys"]:
                entry(zf, "adam_m/" + name, _tobytes(optimizer_state["m"][name]))
                entry(zf, "adam_v/" + name, _tobytes(optimizer_state["v"][name]))
        entry(zf, "meta.json", json.dumps(meta, sort_keys=True))


def load_checkpoint(path):
    """Returns (model, step, optimizer_state or None, extra dict)."""
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        config = ModelConfig(**meta["config"])
        model = TransformerLM(config, seed=0)
        for name in meta["param_names"]:
            shape = tuple(meta["shapes"][name])
            arr = np.frombuffer(zf.read("param/" + name), dtype="<f8").reshape(shape).copy()
            model.params[name] = Tensor(arr, requires_grad=True)
        opt = None
        if meta.get("has_optimizer"):
            opt = {"t": meta["optimizer_t"], "m": {}, "v": {}}
            for name in meta["optimizer_keys"]:
                shape = tuple(meta["shapes"][name])
                opt["m"][name] = np.frombuffer(zf.read("adam_m/" + name), dtype="<f8").reshape(shape).copy()
                opt["v"][name] = np.frombuffer(zf.read("adam_v/" + name), dtype="<f8").reshape(shape).copy()
        return model, meta["step"], opt, meta.get("extra", {})


def _tobytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()
