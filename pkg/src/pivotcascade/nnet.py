"""Transformer building blocks: encoder, autoregressive and non-autoregressive decoders.

Parameters live in flat dictionaries keyed by dotted names such as
``encoder.layers.0.self_attn.q.weight``. All forward functions are pure
functions of ``(cfg, params, inputs)``; dropout is active only when a
numpy ``Generator`` is passed as ``rng``.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4
NON_CONTENT = (PAD, BOS, EOS, MASK)


def content_argmax(scores: np.ndarray) -> np.ndarray:
    """Argmax over the last axis, never picking a token that cannot fill a content slot."""
    scores = np.array(scores, copy=True)
    scores[..., list(NON_CONTENT)] = -np.inf
    return scores.argmax(axis=-1)

Params = dict[str, Tensor]


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size_src: int
    vocab_size_tgt: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    dropout_rate: float = 0.1
    max_positions: int = 128
    seed: int = 1

    def __post_init__(self):
        for name in ("vocab_size_src", "vocab_size_tgt", "d_model", "n_heads", "d_ff", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_enc_layers < 0 or self.n_dec_layers <= 0:
            raise ValueError("layer counts must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TransformerConfig":
        return cls(**dict(d))


@dataclass
class EncoderOutput:
    states: Tensor  # [B, J, d]
    padding_mask: np.ndarray  # [B, J], True at padding


@dataclass
class DecoderOutput:
    states: Tensor  # [B, T, d]
    logits: Tensor  # [B, T, V]
    padding_mask: np.ndarray | None = None

    @cached_property
    def posteriors(self) -> Tensor:
        return ad.softmax(self.logits)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def _xavier(seed: int, name: str, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return _param_rng(seed, name).uniform(-bound, bound, size=shape)


def _param_shapes(cfg: TransformerConfig, kind: str) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {"encoder.embed.weight": (cfg.vocab_size_src, d)}

    def attn(pre):
        for m in ("q", "k", "v", "o"):
            shapes[f"{pre}.{m}.weight"] = (d, d)
            shapes[f"{pre}.{m}.bias"] = (d,)

    def norm(pre):
        shapes[f"{pre}.weight"] = (d,)
        shapes[f"{pre}.bias"] = (d,)

    def ffn(pre):
        shapes[f"{pre}.fc1.weight"] = (d, f)
        shapes[f"{pre}.fc1.bias"] = (f,)
        shapes[f"{pre}.fc2.weight"] = (f, d)
        shapes[f"{pre}.fc2.bias"] = (d,)

    for i in range(cfg.n_enc_layers):
        pre = f"encoder.layers.{i}"
        attn(f"{pre}.self_attn")
        norm(f"{pre}.norm1")
        ffn(f"{pre}.ffn")
        norm(f"{pre}.norm2")
    shapes["decoder.embed.weight"] = (cfg.vocab_size_tgt, d)
    for i in range(cfg.n_dec_layers):
        pre = f"decoder.layers.{i}"
        attn(f"{pre}.self_attn")
        norm(f"{pre}.norm1")
        attn(f"{pre}.cross_attn")
        norm(f"{pre}.norm2")
        ffn(f"{pre}.ffn")
        norm(f"{pre}.norm3")
    shapes["decoder.out_proj.weight"] = (d, cfg.vocab_size_tgt)
    shapes["decoder.out_proj.bias"] = (cfg.vocab_size_tgt,)
    if kind == "nat":
        shapes["length.proj.weight"] = (d, cfg.max_positions)
        shapes["length.proj.bias"] = (cfg.max_positions,)
    elif kind != "ar":
        raise ValueError(f"unknown model kind {kind!r}")
    return shapes


def param_shapes(cfg: TransformerConfig, kind: str) -> dict[str, tuple[int, ...]]:
    return _param_shapes(cfg, kind)


def init_params(cfg: TransformerConfig, kind: str, prefix: str = "", seed: int | None = None) -> Params:
    """Fresh parameters. Each tensor's values depend only on (seed, full name)."""
    seed = cfg.seed if seed is None else seed
    params: Params = {}
    dt = ad.get_default_dtype()
    for name, shape in _param_shapes(cfg, kind).items():
        full = prefix + name
        if name.endswith(".bias"):
            value = np.zeros(shape)
        elif ".norm" in name and name.endswith(".weight"):
            value = np.ones(shape)
        else:
            value = _xavier(seed, full, shape[0], shape[1], shape)
        params[name] = Tensor(value.astype(dt), requires_grad=True, name=full)
    return params


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

_PE_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def positional_encoding(length: int, d_model: int, dtype=None) -> np.ndarray:
    """Sinusoidal position table [length, d_model]."""
    dtype = np.dtype(dtype or ad.get_default_dtype())
    key = (length, d_model, dtype.str)
    if key not in _PE_CACHE:
        pos = np.arange(length)[:, None]
        i = np.arange(0, d_model, 2)[None, :]
        angle = pos / np.power(10000.0, i / d_model)
        pe = np.zeros((length, d_model))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
        _PE_CACHE[key] = pe.astype(dtype)
    return _PE_CACHE[key]


def embed_positions(x: Tensor, cfg: TransformerConfig) -> Tensor:
    """Scale by sqrt(d_model) and add sinusoidal positions."""
    T = x.shape[1]
    if T > cfg.max_positions:
        raise ValueError(f"sequence length {T} exceeds max_positions={cfg.max_positions}")
    return ad.add(ad.mul(x, math.sqrt(cfg.d_model)), positional_encoding(T, cfg.d_model, x.dtype))


def embed_tokens(cfg: TransformerConfig, weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.shape[1] > cfg.max_positions:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_positions={cfg.max_positions}")
    return embed_positions(ad.embedding(weight, ids), cfg)


def multi_head_attention(cfg: TransformerConfig, p: Mapping[str, Tensor], pre: str,
                         xq: Tensor, xkv: Tensor, mask: np.ndarray | None) -> Tensor:
    B, Tq, d = xq.shape
    Tk = xkv.shape[1]
    h = cfg.n_heads
    dh = d // h

    def heads(x, m, T):
        y = ad.linear(x, p[f"{pre}.{m}.weight"], p[f"{pre}.{m}.bias"])
        return ad.transpose(ad.reshape(y, (B, T, h, dh)), (0, 2, 1, 3))

    q, k, v = heads(xq, "q", Tq), heads(xkv, "k", Tk), heads(xkv, "v", Tk)
    o = ad.attention(q, k, v, mask)
    o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (B, Tq, d))
    return ad.linear(o, p[f"{pre}.o.weight"], p[f"{pre}.o.bias"])


def _ffn(p, pre, x):
    hdn = ad.relu(ad.linear(x, p[f"{pre}.fc1.weight"], p[f"{pre}.fc1.bias"]))
    return ad.linear(hdn, p[f"{pre}.fc2.weight"], p[f"{pre}.fc2.bias"])


def _norm(p, pre, x):
    return ad.layer_norm(x, p[f"{pre}.weight"], p[f"{pre}.bias"])


def _residual(p, pre, x, sub, cfg, rng):
    return _norm(p, pre, ad.add(x, ad.dropout(sub, cfg.dropout_rate, rng is not None, rng)))


def _key_mask(padding_mask: np.ndarray) -> np.ndarray:
    return ~padding_mask[:, None, None, :]


def encoder_layers(cfg: TransformerConfig, params: Mapping[str, Tensor], x: Tensor,
                   padding_mask: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
    """Post-norm encoder stack applied to already-embedded inputs [B, J, d]."""
    if x.shape[-1] != cfg.d_model:
        raise ValueError(f"encoder input width {x.shape[-1]} != d_model {cfg.d_model}")
    mask = _key_mask(padding_mask)
    for i in range(cfg.n_enc_layers):
        pre = f"encoder.layers.{i}"
        x = _residual(params, f"{pre}.norm1", x,
                      multi_head_attention(cfg, params, f"{pre}.self_attn", x, x, mask), cfg, rng)
        x = _residual(params, f"{pre}.norm2", x, _ffn(params, f"{pre}.ffn", x), cfg, rng)
    return x


def encode(cfg: TransformerConfig, params: Mapping[str, Tensor], src_ids: np.ndarray,
           pad_mask: np.ndarray | None = None, rng: np.random.Generator | None = None) -> EncoderOutput:
    src_ids = np.asarray(src_ids)
    if src_ids.size and src_ids.max() >= cfg.vocab_size_src:
        raise ValueError(f"source id {src_ids.max()} >= vocab_size_src={cfg.vocab_size_src}")
    pad_mask = (src_ids == PAD) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    x = embed_tokens(cfg, params["encoder.embed.weight"], src_ids)
    x = ad.dropout(x, cfg.dropout_rate, rng is not None, rng)
    return EncoderOutput(encoder_layers(cfg, params, x, pad_mask, rng), pad_mask)


def _decoder_stack(cfg, params, x, self_mask, enc: EncoderOutput, rng) -> DecoderOutput:
    cross_mask = _key_mask(enc.padding_mask)
    for i in range(cfg.n_dec_layers):
        pre = f"decoder.layers.{i}"
        x = _residual(params, f"{pre}.norm1", x,
                      multi_head_attention(cfg, params, f"{pre}.self_attn", x, x, self_mask), cfg, rng)
        x = _residual(params, f"{pre}.norm2", x,
                      multi_head_attention(cfg, params, f"{pre}.cross_attn", x, enc.states, cross_mask), cfg, rng)
        x = _residual(params, f"{pre}.norm3", x, _ffn(params, f"{pre}.ffn", x), cfg, rng)
    logits = ad.linear(x, params["decoder.out_proj.weight"], params["decoder.out_proj.bias"])
    return DecoderOutput(x, logits)


def decode_ar(cfg: TransformerConfig, params: Mapping[str, Tensor], enc: EncoderOutput,
              prefix_ids: np.ndarray, rng: np.random.Generator | None = None) -> DecoderOutput:
    """Causal decoder; logits at position i predict token i+1 of the prefix."""
    prefix_ids = np.asarray(prefix_ids)
    if prefix_ids.ndim != 2 or prefix_ids.shape[1] == 0:
        raise ValueError("decode_ar needs a non-empty [batch, length] prefix")
    pad = prefix_ids == PAD
    T = prefix_ids.shape[1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    self_mask = causal[None, None, :, :] & _key_mask(pad)
    x = embed_tokens(cfg, params["decoder.embed.weight"], prefix_ids)
    x = ad.dropout(x, cfg.dropout_rate, rng is not None, rng)
    out = _decoder_stack(cfg, params, x, self_mask, enc, rng)
    out.padding_mask = pad
    return out


def decode_na(cfg: TransformerConfig, params: Mapping[str, Tensor], enc: EncoderOutput,
              dec_input_ids: np.ndarray, rng: np.random.Generator | None = None) -> DecoderOutput:
    """Bidirectional decoder producing all positions in a single pass."""
    dec_input_ids = np.asarray(dec_input_ids)
    if dec_input_ids.shape[1] > cfg.max_positions:
        raise ValueError(f"pivot length {dec_input_ids.shape[1]} exceeds max_positions={cfg.max_positions}")
    pad = dec_input_ids == PAD
    x = embed_tokens(cfg, params["decoder.embed.weight"], dec_input_ids)
    x = ad.dropout(x, cfg.dropout_rate, rng is not None, rng)
    out = _decoder_stack(cfg, params, x, _key_mask(pad), enc, rng)
    out.padding_mask = pad
    return out


def predict_length(cfg: TransformerConfig, params: Mapping[str, Tensor], enc: EncoderOutput) -> Tensor:
    """Logits over lengths 1..max_positions (column i is length i+1)."""
    keep = (~enc.padding_mask).astype(enc.states.dtype)
    counts = np.maximum(keep.sum(axis=1, keepdims=True), 1.0)
    weights = (keep / counts)[:, None, :]
    pooled = ad.matmul(weights, enc.states)
    pooled = ad.reshape(pooled, (pooled.shape[0], pooled.shape[2]))
    return ad.linear(pooled, params["length.proj.weight"], params["length.proj.bias"])


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass
class TransformerModel:
    """A standalone encoder-decoder: ``kind`` is ``"ar"`` or ``"nat"``."""

    cfg: TransformerConfig
    kind: str
    params: Params = field(default_factory=dict)
    src_vocab_hash: str = ""
    tgt_vocab_hash: str = ""

    @classmethod
    def create(cls, cfg: TransformerConfig, kind: str, src_vocab_hash: str = "", tgt_vocab_hash: str = ""):
        return cls(cfg, kind, init_params(cfg, kind), src_vocab_hash, tgt_vocab_hash)

    def encode(self, src_ids, rng=None) -> EncoderOutput:
        return encode(self.cfg, self.params, src_ids, rng=rng)

    def decode(self, enc: EncoderOutput, ids, rng=None) -> DecoderOutput:
        fn = decode_ar if self.kind == "ar" else decode_na
        return fn(self.cfg, self.params, enc, ids, rng=rng)

    def predict_length(self, enc: EncoderOutput) -> Tensor:
        if self.kind != "nat":
            raise ValueError("only non-autoregressive models have a length head")
        return predict_length(self.cfg, self.params, enc)

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "config": self.cfg.to_dict(),
            "src_vocab_hash": self.src_vocab_hash,
            "tgt_vocab_hash": self.tgt_vocab_hash,
        }
