"""Encoder, FourierNAT decoder, length head, autoregressive baseline, checkpoints.

All sub-layers are pre-norm residual blocks.  Public entry points accept
either a single id sequence or a ``B x S`` batch; internally everything is
batched.
"""

from __future__ import annotations

import json
import math
import struct
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BOS, EOS, MASK, PAD
from .spectral import GatePair, is_power_of_two, spectral_mix
from .tensor import ConfigError, Parameter, Rng, Tensor

ARCHS = ("fouriernat", "fouriernat-nogate", "ar-baseline")
DRAFT_INITS = ("zeros", "mask_embedding")
MAGIC = b"FNAT1\n"
NEG_INF = -1e9


class VocabularyError(ValueError):
    pass


class LengthError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    vocab: int = 36
    t_max: int = 16
    s_max: int = 32
    dropout: float = 0.1
    draft_init: str = "mask_embedding"
    combine_imag: bool = False
    arch: str = "fouriernat"
    dtype: str = "float64"
    ln_eps: float = 1e-5

    def validate(self):
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if not is_power_of_two(self.t_max):
            raise ConfigError(f"t_max={self.t_max} must be a power of two")
        if self.vocab < 5:
            raise ConfigError("vocab must hold 4 specials plus content")
        if self.draft_init not in DRAFT_INITS:
            raise ConfigError(f"draft_init must be one of {DRAFT_INITS}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        return self

    @classmethod
    def full_scale(cls, **kw):
        base = dict(d=512, n_layers=6, n_heads=8, d_ff=2048, t_max=64, s_max=128)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self):
        return asdict(self)


@dataclass
class EncoderState:
    h: Tensor              # B x S x d
    pad_mask: np.ndarray   # B x S, True at PAD


@dataclass
class DecoderTrace:
    z_per_layer: list
    logits: Tensor         # B x T x V


# ---------------------------------------------------------------------------
# building blocks


def linear(x, w, b):
    return T.affine(x, w, b)


def ffn(x, p, prefix):
    return linear(T.relu(linear(x, p[prefix + ".w1"], p[prefix + ".b1"])), p[prefix + ".w2"], p[prefix + ".b2"])


def ln(x, p, prefix, eps):
    return T.layer_norm(x, p[prefix + ".gain"], p[prefix + ".bias"], eps)


def _split_heads(x, h):
    B, L, d = x.shape
    return T.transpose(T.reshape(x, (B, L, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x):
    B, h, L, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, h * dh))


def attention_bias(key_pad_mask, n_queries, causal=False, dtype=np.float64):
    """Additive score mask of shape B x 1 x Tq x Tk (or broadcastable)."""
    bias = np.where(key_pad_mask, NEG_INF, 0.0).astype(dtype)[:, None, None, :]
    if causal:
        Tk = key_pad_mask.shape[-1]
        fut = np.triu(np.ones((n_queries, Tk), dtype=bool), k=1)
        bias = bias + np.where(fut, NEG_INF, 0.0).astype(dtype)[None, None]
    return bias


def multi_head_attention(q_in, kv_in, p, prefix, n_heads, bias):
    """Scaled dot-product attention; queries from ``q_in``, keys/values from ``kv_in``."""
    q = _split_heads(linear(q_in, p[prefix + ".wq"], p[prefix + ".bq"]), n_heads)
    k = _split_heads(linear(kv_in, p[prefix + ".wk"], p[prefix + ".bk"]), n_heads)
    v = _split_heads(linear(kv_in, p[prefix + ".wv"], p[prefix + ".bv"]), n_heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
    if bias is not None:
        scores = scores + bias
    w = T.softmax(scores, axis=-1)
    return linear(_merge_heads(T.matmul(w, v)), p[prefix + ".wo"], p[prefix + ".bo"])


def _as_batch(ids) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    return arr[None, :] if arr.ndim == 1 else arr


# ---------------------------------------------------------------------------
# models


class Seq2Seq:
    """Parameter registry plus the shared Transformer encoder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        self.dtype = np.dtype(config.dtype)
        self.params: dict[str, Parameter] = {}
        self.frozen: set[str] = set()
        self.decoder_forwards = 0
        self._count_lock = threading.Lock()
        self._rng = Rng(seed)
        c = config
        self._add("src_emb", self._rng.normal((c.vocab, c.d)))
        self._add("src_pos", self._rng.normal((c.s_max, c.d)))
        for l in range(c.n_layers):
            pre = f"enc.{l}"
            self._ln(pre + ".ln_attn")
            self._attn(pre + ".attn")
            self._ln(pre + ".ln_ffn")
            self._ffn(pre + ".ffn")
        self._ln("enc.ln_out")

    # -- registry helpers
    def _add(self, name, value):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(name, np.asarray(value, dtype=self.dtype))
        return self.params[name]

    def _ln(self, pre):
        self._add(pre + ".gain", np.ones(self.config.d))
        self._add(pre + ".bias", np.zeros(self.config.d))

    def _attn(self, pre):
        d = self.config.d
        for m in ("q", "k", "v", "o"):
            self._add(f"{pre}.w{m}", T.xavier(self._rng, d, d))
            self._add(f"{pre}.b{m}", np.zeros(d))

    def _ffn(self, pre):
        d, f = self.config.d, self.config.d_ff
        self._add(pre + ".w1", T.xavier(self._rng, d, f))
        self._add(pre + ".b1", np.zeros(f))
        self._add(pre + ".w2", T.xavier(self._rng, f, d))
        self._add(pre + ".b2", np.zeros(d))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if n not in self.frozen]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _count_forward(self):
        with self._count_lock:
            self.decoder_forwards += 1

    def _drop(self, x, training, rng):
        return T.dropout(x, self.config.dropout, rng, training)

    # -- encoder
    def embed(self, ids, which="source", training=False, rng=None):
        ids = _as_batch(ids)
        table = self.params["src_emb" if which == "source" else "tgt_emb"]
        pos = self.params["src_pos" if which == "source" else "tgt_pos"]
        if ids.size and (ids.max() >= self.config.vocab or ids.min() < 0):
            raise VocabularyError(f"token id out of range for vocab {self.config.vocab}")
        L = ids.shape[1]
        if L > pos.shape[0]:
            raise LengthError(f"sequence length {L} exceeds positional table {pos.shape[0]}")
        x = T.embedding(table, ids) + T.embedding(pos, np.arange(L))
        return self._drop(x, training, rng)

    def encode(self, src_ids, training=False, rng=None) -> EncoderState:
        ids = _as_batch(src_ids)
        c = self.config
        if ids.shape[1] > c.s_max:
            raise LengthError(f"source length {ids.shape[1]} exceeds s_max={c.s_max}")
        pad = ids == PAD
        if ids.shape[1] == 0 or pad.all(axis=1).any():
            raise LengthError("empty source sequence")
        x = self.embed(ids, "source", training, rng)
        bias = attention_bias(pad, ids.shape[1], dtype=self.dtype)
        p = self.params
        for l in range(c.n_layers):
            pre = f"enc.{l}"
            a = ln(x, p, pre + ".ln_attn", c.ln_eps)
            x = x + self._drop(multi_head_attention(a, a, p, pre + ".attn", c.n_heads, bias), training, rng)
            x = x + self._drop(ffn(ln(x, p, pre + ".ln_ffn", c.ln_eps), p, pre + ".ffn"), training, rng)
        return EncoderState(ln(x, p, "enc.ln_out", c.ln_eps), pad)

    def cross_attention(self, z, enc: EncoderState, prefix):
        bias = attention_bias(enc.pad_mask, z.shape[1], dtype=self.dtype)
        return multi_head_attention(z, enc.h, self.params, prefix, self.config.n_heads, bias)

    # -- state
    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state):
        for n, p in self.params.items():
            if n not in state:
                raise KeyError(f"missing parameter {n}")
            if tuple(state[n].shape) != p.shape:
                raise ValueError(f"shape mismatch for {n}: {state[n].shape} vs {p.shape}")
            p.data = np.array(state[n], dtype=self.dtype)
            p.grad = np.zeros_like(p.data)


class FourierNAT(Seq2Seq):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config, seed)
        c = config
        self._add("tgt_emb", self._rng.normal((c.vocab, c.d)))
        self._add("tgt_pos", self._rng.normal((c.t_max, c.d)))
        self._add("mask_emb", self._rng.normal(c.d) if c.draft_init == "mask_embedding" else np.zeros(c.d))
        if c.draft_init == "zeros":
            self.frozen.add("mask_emb")
        gate_val = 0.0 if c.arch == "fouriernat-nogate" else 1.0
        for l in range(c.n_layers):
            pre = f"dec.{l}"
            self._ln(pre + ".ln_cross")
            self._attn(pre + ".cross")
            self._ln(pre + ".ln_mix")
            self._add(pre + ".mix.g_real", np.full((c.t_max, c.d), gate_val))
            self._add(pre + ".mix.g_imag", np.full((c.t_max, c.d), gate_val))
            if c.arch == "fouriernat-nogate":
                self.frozen.update({pre + ".mix.g_real", pre + ".mix.g_imag"})
            if c.combine_imag:
                # starts as [I; 0] so the sub-layer is still an identity at init
                self._add(pre + ".mix.w_comb", np.vstack([np.eye(c.d), np.zeros((c.d, c.d))]))
            self._ln(pre + ".ln_ffn")
            self._ffn(pre + ".ffn")
        self._ln("dec.ln_out")
        self._add("out.w", T.xavier(self._rng, c.d, c.vocab))
        self._add("out.b", np.zeros(c.vocab))
        self._add("len.w", T.xavier(self._rng, c.d, c.t_max))
        self._add("len.b", np.zeros(c.t_max))

    def gates(self, layer: int) -> GatePair:
        return GatePair(self.params[f"dec.{layer}.mix.g_real"], self.params[f"dec.{layer}.mix.g_imag"])

    def gate_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if ".mix.g_" in n]

    def draft(self, batch_size, tokens=None, masked=None, training=False, rng=None):
        """Z^(0): MASK (or zero) rows plus target positions.

        With ``tokens``/``masked`` (B x T), unmasked positions carry the
        target embedding of their token instead (refinement input).
        """
        c = self.config
        base = T.reshape(self.params["mask_emb"], (1, 1, c.d))
        pos = T.reshape(self.params["tgt_pos"], (1, c.t_max, c.d))
        if tokens is None:
            z = base + pos
            z = z + np.zeros((batch_size, c.t_max, c.d), dtype=self.dtype)
        else:
            tokens = np.asarray(tokens, dtype=np.int64)
            keep = (~np.asarray(masked, dtype=bool))[..., None].astype(self.dtype)
            tok = T.embedding(self.params["tgt_emb"], tokens)
            z = tok * keep + base * (1.0 - keep) + pos
        return self._drop(z, training, rng)

    def mix(self, x, layer):
        p, pre = self.params, f"dec.{layer}.mix"
        out = spectral_mix(x, p[pre + ".g_real"], p[pre + ".g_imag"], keep_imag=self.config.combine_imag)
        if self.config.combine_imag:
            out = T.matmul(out, p[pre + ".w_comb"])
        return out

    def decoder_layer(self, z, enc: EncoderState, layer, training=False, rng=None):
        c, p, pre = self.config, self.params, f"dec.{layer}"
        if z.shape[1] != c.t_max:
            raise LengthError(f"decoder length {z.shape[1]} must equal t_max={c.t_max}")
        z1 = z + self._drop(self.cross_attention(ln(z, p, pre + ".ln_cross", c.ln_eps), enc, pre + ".cross"),
                            training, rng)
        z2 = z1 + self._drop(self.mix(ln(z1, p, pre + ".ln_mix", c.ln_eps), layer), training, rng)
        return z2 + self._drop(ffn(ln(z2, p, pre + ".ln_ffn", c.ln_eps), p, pre + ".ffn"), training, rng)

    def decode_parallel(self, enc: EncoderState, tokens=None, masked=None, training=False, rng=None) -> DecoderTrace:
        self._count_forward()
        B = enc.h.shape[0]
        z = self.draft(B, tokens, masked, training, rng)
        trace = [z]
        for l in range(self.config.n_layers):
            z = self.decoder_layer(z, enc, l, training, rng)
            trace.append(z)
        z = ln(z, self.params, "dec.ln_out", self.config.ln_eps)
        return DecoderTrace(trace, linear(z, self.params["out.w"], self.params["out.b"]))

    def length_logits(self, enc: EncoderState) -> Tensor:
        keep = (~enc.pad_mask).astype(self.dtype)
        weights = keep / keep.sum(axis=1, keepdims=True)
        pooled = T.tsum(enc.h * weights[..., None], axis=1)
        return linear(pooled, self.params["len.w"], self.params["len.b"])

    def predict_length(self, enc: EncoderState) -> np.ndarray:
        """Distribution over content lengths 1..t_max (column i is length i+1)."""
        with T.no_grad():
            return T.softmax(self.length_logits(enc), axis=-1).data


class ARTransformer(Seq2Seq):
    """Left-to-right baseline: causal self-attention, cross-attention, FFN."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config, seed)
        c = config
        self._add("tgt_emb", self._rng.normal((c.vocab, c.d)))
        self._add("tgt_pos", self._rng.normal((c.t_max, c.d)))
        for l in range(c.n_layers):
            pre = f"dec.{l}"
            self._ln(pre + ".ln_self")
            self._attn(pre + ".self")
            self._ln(pre + ".ln_cross")
            self._attn(pre + ".cross")
            self._ln(pre + ".ln_ffn")
            self._ffn(pre + ".ffn")
        self._ln("dec.ln_out")
        self._add("out.w", T.xavier(self._rng, c.d, c.vocab))
        self._add("out.b", np.zeros(c.vocab))

    def decode_teacher(self, enc: EncoderState, prefix_ids, training=False, rng=None) -> Tensor:
        """Logits for every prefix position (B x P x V); position i predicts token i+1."""
        c, p = self.config, self.params
        ids = _as_batch(prefix_ids)
        if ids.shape[1] > c.t_max:
            raise LengthError(f"prefix length {ids.shape[1]} exceeds t_max={c.t_max}")
        z = self.embed(ids, "target", training, rng)
        self_bias = attention_bias(np.zeros(ids.shape, dtype=bool), ids.shape[1], causal=True, dtype=self.dtype)
        for l in range(c.n_layers):
            pre = f"dec.{l}"
            a = ln(z, p, pre + ".ln_self", c.ln_eps)
            z = z + self._drop(multi_head_attention(a, a, p, pre + ".self", c.n_heads, self_bias), training, rng)
            z = z + self._drop(self.cross_attention(ln(z, p, pre + ".ln_cross", c.ln_eps), enc, pre + ".cross"),
                               training, rng)
            z = z + self._drop(ffn(ln(z, p, pre + ".ln_ffn", c.ln_eps), p, pre + ".ffn"), training, rng)
        z = ln(z, p, "dec.ln_out", c.ln_eps)
        return linear(z, p["out.w"], p["out.b"])

    def ar_decode_step(self, enc: EncoderState, prefix_ids) -> np.ndarray:
        """Next-token logits (B x V) from a full recomputation over the prefix."""
        ids = _as_batch(prefix_ids)
        if ids.shape[1] == 0:
            raise LengthError("prefix must start with BOS")
        self._count_forward()
        with T.no_grad():
            return self.decode_teacher(enc, ids).data[:, -1]

    # -- incremental decoding with cached keys/values
    def start_cache(self, enc: EncoderState) -> dict:
        p, c = self.params, self.config
        cache = {"len": 0, "self": [], "cross": []}
        h = enc.h.data
        for l in range(c.n_layers):
            pre = f"dec.{l}.cross"
            k = h @ p[pre + ".wk"].data + p[pre + ".bk"].data
            v = h @ p[pre + ".wv"].data + p[pre + ".bv"].data
            cache["cross"].append((_heads_np(k, c.n_heads), _heads_np(v, c.n_heads)))
            cache["self"].append(([], []))
        cache["cross_bias"] = np.where(enc.pad_mask, NEG_INF, 0.0)[:, None, None, :].astype(self.dtype)
        return cache

    def ar_decode_step_cached(self, cache: dict, last_ids) -> np.ndarray:
        """Feed one token per row; returns next-token logits (B x V)."""
        c, p = self.config, self.params
        pos = cache["len"]
        if pos >= c.t_max:
            raise LengthError(f"prefix length exceeds t_max={c.t_max}")
        self._count_forward()
        ids = np.asarray(last_ids, dtype=np.int64)
        z = (p["tgt_emb"].data[ids] + p["tgt_pos"].data[pos])[:, None, :]
        for l in range(c.n_layers):
            pre = f"dec.{l}"
            a = _ln_np(z, p, pre + ".ln_self", c.ln_eps)
            q = _heads_np(a @ p[pre + ".self.wq"].data + p[pre + ".self.bq"].data, c.n_heads)
            ks, vs = cache["self"][l]
            ks.append(_heads_np(a @ p[pre + ".self.wk"].data + p[pre + ".self.bk"].data, c.n_heads))
            vs.append(_heads_np(a @ p[pre + ".self.wv"].data + p[pre + ".self.bv"].data, c.n_heads))
            z = z + _attend_np(q, np.concatenate(ks, axis=2), np.concatenate(vs, axis=2), None,
                               p, pre + ".self")
            a = _ln_np(z, p, pre + ".ln_cross", c.ln_eps)
            q = _heads_np(a @ p[pre + ".cross.wq"].data + p[pre + ".cross.bq"].data, c.n_heads)
            kc, vc = cache["cross"][l]
            z = z + _attend_np(q, kc, vc, cache["cross_bias"], p, pre + ".cross")
            a = _ln_np(z, p, pre + ".ln_ffn", c.ln_eps)
            hdn = np.maximum(a @ p[pre + ".ffn.w1"].data + p[pre + ".ffn.b1"].data, 0.0)
            z = z + hdn @ p[pre + ".ffn.w2"].data + p[pre + ".ffn.b2"].data
        z = _ln_np(z, p, "dec.ln_out", c.ln_eps)
        cache["len"] = pos + 1
        return (z @ p["out.w"].data + p["out.b"].data)[:, 0]


def _heads_np(x, h):
    B, L, d = x.shape
    return x.reshape(B, L, h, d // h).transpose(0, 2, 1, 3)


def _ln_np(x, p, pre, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * p[pre + ".gain"].data + p[pre + ".bias"].data


def _attend_np(q, k, v, bias, p, pre):
    s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(q.shape[-1])
    if bias is not None:
        s = s + bias
    s = np.exp(s - s.max(-1, keepdims=True))
    s /= s.sum(-1, keepdims=True)
    o = s @ v
    B, h, L, dh = o.shape
    o = o.transpose(0, 2, 1, 3).reshape(B, L, h * dh)
    return o @ p[pre + ".wo"].data + p[pre + ".bo"].data


def build_model(config: ModelConfig, seed: int = 0) -> Seq2Seq:
    config.validate()
    if config.arch == "ar-baseline":
        return ARTransformer(config, seed)
    return FourierNAT(config, seed)


def cast_model(model: Seq2Seq, dtype: str) -> Seq2Seq:
    """Copy of ``model`` with parameters stored in ``dtype``."""
    if dtype == model.config.dtype:
        return model
    config = ModelConfig.from_dict({**model.config.to_dict(), "dtype": dtype})
    out = build_model(config)
    out.load_state_dict(model.state_dict())
    return out


# ---------------------------------------------------------------------------
# checkpoint container: magic line, u64 header length, JSON header, raw <f8 values


def save_checkpoint(model: Seq2Seq, path, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"config": model.config.to_dict(), "params": entries, "meta": meta or {}},
                        sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not an FNAT1 checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        flat = np.frombuffer(fh.read(), dtype="<f8")
    state = {}
    for e in header["params"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        state[e["name"]] = flat[e["offset"]:e["offset"] + size].reshape(e["shape"]).copy()
    return ModelConfig.from_dict(header["config"]), state, header.get("meta", {})


def load_checkpoint(path) -> Seq2Seq:
    config, state, meta = read_checkpoint(path)
    model = build_model(config)
    model.load_state_dict(state)
    model.meta = meta
    return model
