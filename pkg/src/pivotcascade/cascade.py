"""End-to-end differentiable src -> piv -> trg cascades.

A non-autoregressive (or autoregressive) src->piv model is joined to an
autoregressive piv->trg model through either its final decoder states or its
output posteriors. Integrated parameter names carry a side prefix, e.g.
``s2p.encoder.layers.0.ffn.fc1.weight``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .nnet import (
    BOS,
    EOS,
    MASK,
    PAD,
    DecoderOutput,
    EncoderOutput,
    TransformerConfig,
    TransformerModel,
    content_argmax,
    embed_positions,
    encoder_layers,
    init_params,
    param_shapes,
)

SIDES = ("s2p", "p2t")
GROUPS = ("s2p.encoder", "s2p.decoder", "s2p.length", "p2t.encoder", "p2t.decoder")


class VocabMismatchError(ValueError):
    """Posteriors interface assembled from models with different pivot vocabularies."""


# ---------------------------------------------------------------------------
# configuration types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InterfaceKind:
    kind: str = "decoder_posteriors"
    with_p2t_encoder: bool = True

    def __post_init__(self):
        if self.kind not in ("decoder_states", "decoder_posteriors"):
            raise ValueError(f"unknown interface {self.kind!r}")
        if self.kind == "decoder_posteriors" and not self.with_p2t_encoder:
            raise ValueError("the posteriors interface always feeds the p2t encoder")

    @classmethod
    def parse(cls, text: str, with_p2t_encoder: bool = True) -> "InterfaceKind":
        name = text.strip().lower().replace("-", "_")
        if name in ("states", "decoder_states"):
            return cls("decoder_states", with_p2t_encoder)
        if name in ("states_noenc", "states_no_encoder"):
            return cls("decoder_states", False)
        if name in ("posteriors", "decoder_posteriors"):
            return cls("decoder_posteriors", True)
        raise ValueError(f"unknown interface {text!r}; use states, states-noenc or posteriors")

    @property
    def label(self) -> str:
        if self.kind == "decoder_posteriors":
            return "posteriors"
        return "states" if self.with_p2t_encoder else "states-noenc"


@dataclass(frozen=True)
class LengthPolicy:
    """How the pivot length K is chosen for the non-autoregressive pass."""

    kind: str = "source"
    lo: int = 2
    hi: int = 100

    def __post_init__(self):
        if self.kind not in ("random", "source", "target_oracle", "predicted"):
            raise ValueError(f"unknown length policy {self.kind!r}")
        if self.kind == "random" and not 1 <= self.lo < self.hi:
            raise ValueError(f"random length interval [{self.lo}, {self.hi}) is empty")

    @classmethod
    def parse(cls, text: str, lo: int = 2, hi: int = 100) -> "LengthPolicy":
        name = text.strip().lower().replace("-", "_")
        if name == "target":
            name = "target_oracle"
        return cls(name, lo, hi)

    def lengths(self, src_lengths: np.ndarray, trg_lengths: np.ndarray | None = None,
                length_logits: Tensor | None = None, rng: np.random.Generator | None = None,
                max_len: int | None = None) -> np.ndarray:
        """Pivot content lengths; predicted lengths are clipped to ``max_len``."""
        src_lengths = np.asarray(src_lengths)
        if self.kind == "source":
            k = src_lengths
        elif self.kind == "target_oracle":
            if trg_lengths is None:
                raise ValueError("target_oracle length policy needs reference target lengths")
            k = np.asarray(trg_lengths)
        elif self.kind == "predicted":
            if length_logits is None:
                raise ValueError("predicted length policy needs length-head logits")
            k = length_logits.data.argmax(axis=-1) + 1
            if max_len is not None:
                k = np.minimum(k, max_len)
        else:
            if rng is None:
                raise ValueError("random length policy needs a seeded rng")
            k = rng.integers(self.lo, self.hi, size=src_lengths.shape)
        return np.maximum(np.asarray(k, dtype=np.int64), 1)


@dataclass(frozen=True)
class InitScheme:
    """Which component groups are copied from pre-trained checkpoints."""

    groups: frozenset = frozenset()

    NAMED = {
        "none": (),
        "s2p": ("s2p.encoder", "s2p.decoder", "s2p.length"),
        "p2t": ("p2t.encoder", "p2t.decoder"),
        "both": GROUPS,
        "all": GROUPS,
    }

    @classmethod
    def parse(cls, text: str | Iterable[str]) -> "InitScheme":
        items = text.split(",") if isinstance(text, str) else list(text)
        groups: set[str] = set()
        for item in (i.strip() for i in items):
            if not item:
                continue
            if item in cls.NAMED:
                groups.update(cls.NAMED[item])
            elif item in GROUPS:
                groups.add(item)
            else:
                raise ValueError(f"unknown init group {item!r}; choose from {', '.join([*cls.NAMED, *GROUPS])}")
        return cls(frozenset(groups))

    @property
    def label(self) -> str:
        for name, groups in self.NAMED.items():
            if set(groups) == set(self.groups):
                return name
        return ",".join(sorted(self.groups))


def param_group(name: str) -> str:
    """``s2p.encoder.layers.0.ffn.fc1.weight`` -> ``s2p.encoder``."""
    parts = name.split(".")
    return ".".join(parts[:2])


# ---------------------------------------------------------------------------
# integrated model
# ---------------------------------------------------------------------------

@dataclass
class IntegratedModel:
    s2p: TransformerModel
    p2t: TransformerModel
    interface: InterfaceKind
    length_policy: LengthPolicy = field(default_factory=LengthPolicy)
    seed: int = 1
    frozen: frozenset = frozenset()
    init: InitScheme = field(default_factory=InitScheme)

    def __post_init__(self):
        if self.p2t.kind != "ar":
            raise ValueError("the piv->trg side must be autoregressive")
        if self.s2p.cfg.d_model != self.p2t.cfg.d_model:
            raise ValueError(f"d_model mismatch: s2p {self.s2p.cfg.d_model} vs p2t {self.p2t.cfg.d_model}")
        if self.interface.kind == "decoder_posteriors":
            check_pivot_vocab(self.s2p, self.p2t)
        unknown = set(self.frozen) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown frozen group(s): {sorted(unknown)}")

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for side, model in (("s2p", self.s2p), ("p2t", self.p2t)):
            for name, t in model.params.items():
                out[f"{side}.{name}"] = t
        return out

    def unused_parameters(self) -> set[str]:
        """Names that receive no gradient from the integrated loss by construction."""
        unused = {n for n in self.named_parameters() if n.startswith("s2p.length.")}
        if self.interface.kind == "decoder_states":
            unused |= {"s2p.decoder.out_proj.weight", "s2p.decoder.out_proj.bias"}
            if self.interface.with_p2t_encoder:
                unused.add("p2t.encoder.embed.weight")
        return unused

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_parameters().items() if param_group(n) not in self.frozen}

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for n in self.named_parameters():
            out.setdefault(param_group(n), []).append(n)
        return out

    def meta(self) -> dict:
        return {
            "kind": "integrated",
            "interface": {"kind": self.interface.kind, "with_p2t_encoder": self.interface.with_p2t_encoder},
            "length_policy": {"kind": self.length_policy.kind, "lo": self.length_policy.lo,
                              "hi": self.length_policy.hi},
            "seed": self.seed,
            "frozen": sorted(self.frozen),
            "init": sorted(self.init.groups),
            "s2p": self.s2p.meta(),
            "p2t": self.p2t.meta(),
        }


def check_pivot_vocab(s2p: TransformerModel, p2t: TransformerModel) -> None:
    if s2p.tgt_vocab_hash != p2t.src_vocab_hash:
        raise VocabMismatchError(
            f"posteriors interface needs a shared pivot vocabulary: s2p target vocab {s2p.tgt_vocab_hash!r} "
            f"!= p2t source vocab {p2t.src_vocab_hash!r}")
    if s2p.cfg.vocab_size_tgt != p2t.cfg.vocab_size_src:
        raise VocabMismatchError(
            f"pivot vocabulary sizes differ: {s2p.cfg.vocab_size_tgt} vs {p2t.cfg.vocab_size_src}")


# ---------------------------------------------------------------------------
# bridges
# ---------------------------------------------------------------------------

def bridge_states(dec_out: DecoderOutput, p2t_cfg: TransformerConfig, p2t_params: Mapping[str, Tensor],
                  padding_mask: np.ndarray, with_p2t_encoder: bool = True,
                  rng: np.random.Generator | None = None) -> EncoderOutput:
    """Feed s2p decoder states straight into the p2t encoder layers (no embedding, no positions)."""
    d = dec_out.states.shape[-1]
    if d != p2t_cfg.d_model:
        raise ValueError(f"d_model mismatch: s2p states have width {d}, p2t expects {p2t_cfg.d_model}")
    if not with_p2t_encoder:
        return EncoderOutput(dec_out.states, padding_mask)
    return EncoderOutput(encoder_layers(p2t_cfg, p2t_params, dec_out.states, padding_mask, rng), padding_mask)


def wrap_posteriors(post: Tensor, lengths: np.ndarray, add_bos: bool = True, add_eos: bool = True) -> tuple[Tensor, np.ndarray]:
    """Place per-sentence posterior rows between one-hot BOS / EOS rows.

    Returns the [B, T, V] distribution sequence and its padding mask; padding
    rows are one-hot PAD. Selection is done with 0/1 matrices so one-hot
    inputs stay exactly one-hot.
    """
    B, K, V = post.shape
    lengths = np.asarray(lengths)
    T = K + int(add_bos) + int(add_eos)
    off = int(add_bos)
    select = np.zeros((B, T, K), dtype=post.dtype)
    const = np.zeros((B, T, V), dtype=post.dtype)
    pad = np.ones((B, T), dtype=bool)
    for b in range(B):
        k = int(lengths[b])
        select[b, np.arange(k) + off, np.arange(k)] = 1
        if add_bos:
            const[b, 0, BOS] = 1
        end = k + off
        if add_eos:
            const[b, end, EOS] = 1
            end += 1
        const[b, end:, PAD] = 1
        pad[b, :end] = False
    return ad.add(ad.matmul(select, post), const), pad


def soft_embed(dist: Tensor, p2t_params: Mapping[str, Tensor]) -> Tensor:
    """Expected embedding sum_v E_v p(v): a full matrix product with the embedding table."""
    E = p2t_params["encoder.embed.weight"]
    if dist.shape[-1] != E.shape[0]:
        raise VocabMismatchError(f"posterior width {dist.shape[-1]} != p2t source vocabulary size {E.shape[0]}")
    return ad.matmul(dist, E)


def harden(post: Tensor) -> Tensor:
    """Replace each distribution by the one-hot vector of its best content token (no gradient)."""
    out = np.zeros(post.shape, dtype=post.dtype)
    np.put_along_axis(out, content_argmax(post.data)[..., None], 1, axis=-1)
    return Tensor(out)


def bridge_posteriors(dec_out: DecoderOutput, p2t_cfg: TransformerConfig, p2t_params: Mapping[str, Tensor],
                      lengths: np.ndarray, add_bos: bool = True, add_eos: bool = True,
                      hardened: bool = False, rng: np.random.Generator | None = None) -> EncoderOutput:
    post = harden(dec_out.posteriors) if hardened else dec_out.posteriors
    dist, pad = wrap_posteriors(post, lengths, add_bos, add_eos)
    x = embed_positions(soft_embed(dist, p2t_params), p2t_cfg)
    x = ad.dropout(x, p2t_cfg.dropout_rate, rng is not None, rng)
    return EncoderOutput(encoder_layers(p2t_cfg, p2t_params, x, pad, rng), pad)


# ---------------------------------------------------------------------------
# integrated forward
# ---------------------------------------------------------------------------

def content_lengths(ids: np.ndarray) -> np.ndarray:
    """Number of tokens that are not PAD/BOS/EOS per row."""
    ids = np.asarray(ids)
    return ((ids != PAD) & (ids != BOS) & (ids != EOS)).sum(axis=1)


def masked_pivot_input(lengths: np.ndarray) -> np.ndarray:
    """[B, max K] ids: MASK inside each sentence's length, PAD after it."""
    lengths = np.asarray(lengths)
    K = int(lengths.max()) if lengths.size else 1
    return np.where(np.arange(K)[None, :] < lengths[:, None], MASK, PAD).astype(np.int64)


@dataclass
class PivotPass:
    """Everything the s2p side hands over: the p2t-ready encoding plus pivot diagnostics."""

    encoder_out: EncoderOutput
    s2p_out: DecoderOutput
    lengths: np.ndarray


def pivot_lengths(model: IntegratedModel, src_ids: np.ndarray, enc: EncoderOutput,
                  trg_ids: np.ndarray | None = None, rng: np.random.Generator | None = None,
                  policy: LengthPolicy | None = None) -> np.ndarray:
    policy = policy or model.length_policy
    trg_len = content_lengths(trg_ids) if trg_ids is not None else None
    logits = None
    if policy.kind == "predicted":
        with ad.no_grad():
            logits = model.s2p.predict_length(enc)
    # the bridged pivot carries BOS and EOS into the p2t side
    limit = min(model.s2p.cfg.max_positions, model.p2t.cfg.max_positions - 2)
    k = policy.lengths(content_lengths(src_ids), trg_len, logits, rng, max_len=limit)
    if k.max() > limit:
        raise ValueError(f"pivot length {k.max()} exceeds the limit {limit} set by max_positions")
    return k


def integrated_pivot(model: IntegratedModel, src_ids: np.ndarray, *, trg_ids: np.ndarray | None = None,
                     pivot_ids: np.ndarray | None = None, lengths: np.ndarray | None = None,
                     rng: np.random.Generator | None = None, length_rng: np.random.Generator | None = None,
                     hardened: bool = False) -> PivotPass:
    """Run the s2p side and the bridge; the result conditions the p2t decoder.

    For an NA s2p model the decoder input is a fully masked sequence of the
    policy's length (one pass, no iterations). For an AR s2p model the given
    ``pivot_ids`` (BOS-prefixed, e.g. synthetic pivots) are teacher-forced.
    """
    s2p, p2t = model.s2p, model.p2t
    enc = s2p.encode(src_ids, rng=rng)
    if s2p.kind == "nat":
        if lengths is None:
            lengths = pivot_lengths(model, src_ids, enc, trg_ids, length_rng if length_rng is not None else rng)
        dec = s2p.decode(enc, masked_pivot_input(lengths), rng=rng)
        add_eos = True
    else:
        if pivot_ids is None:
            raise ValueError("an autoregressive s2p model needs pivot_ids (e.g. synthetic pivots)")
        pivot_ids = np.asarray(pivot_ids)
        dec = s2p.decode(enc, pivot_ids, rng=rng)
        lengths = (pivot_ids != PAD).sum(axis=1)
        add_eos = False
    if model.interface.kind == "decoder_states":
        pad = dec.padding_mask
        bridged = bridge_states(dec, p2t.cfg, p2t.params, pad, model.interface.with_p2t_encoder, rng)
    else:
        bridged = bridge_posteriors(dec, p2t.cfg, p2t.params, lengths, add_bos=True, add_eos=add_eos,
                                    hardened=hardened, rng=rng)
    return PivotPass(bridged, dec, np.asarray(lengths))


def forward_integrated(model: IntegratedModel, src_ids: np.ndarray, trg_prefix: np.ndarray, *,
                       trg_ids: np.ndarray | None = None, pivot_ids: np.ndarray | None = None,
                       rng: np.random.Generator | None = None,
                       length_rng: np.random.Generator | None = None) -> DecoderOutput:
    """Integrated src -> trg forward pass, teacher-forced on ``trg_prefix``."""
    piv = integrated_pivot(model, src_ids, trg_ids=trg_ids, pivot_ids=pivot_ids, rng=rng, length_rng=length_rng)
    return model.p2t.decode(piv.encoder_out, trg_prefix, rng=rng)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def concatenate(s2p_ckpt: TransformerModel | None, p2t_ckpt: TransformerModel | None,
                scheme: InitScheme, interface: InterfaceKind, *,
                length_policy: LengthPolicy | None = None,
                s2p_cfg: TransformerConfig | None = None, p2t_cfg: TransformerConfig | None = None,
                s2p_kind: str | None = None, seed: int = 1, frozen: Iterable[str] = ()) -> IntegratedModel:
    """Build an integrated model, copying pre-trained weights for the groups in ``scheme``.

    Groups not in the scheme are freshly initialised from ``seed``.
    """
    s2p_cfg = s2p_cfg or (s2p_ckpt.cfg if s2p_ckpt else None)
    p2t_cfg = p2t_cfg or (p2t_ckpt.cfg if p2t_ckpt else None)
    if s2p_cfg is None or p2t_cfg is None:
        raise ValueError("need a checkpoint or a config for both sides")
    s2p_kind = s2p_kind or (s2p_ckpt.kind if s2p_ckpt else "nat")
    if s2p_ckpt is not None and s2p_ckpt.kind != s2p_kind:
        raise ValueError(f"s2p checkpoint is {s2p_ckpt.kind!r}, expected {s2p_kind!r}")
    if p2t_ckpt is not None and p2t_ckpt.kind != "ar":
        raise ValueError("p2t checkpoint must be autoregressive")

    def side_model(side, cfg, kind, source):
        params = init_params(cfg, kind, prefix=f"{side}.", seed=seed)
        shapes = param_shapes(cfg, kind)
        for name in params:
            group = param_group(f"{side}.{name}")
            if group not in scheme.groups:
                continue
            if source is None:
                raise ValueError(f"init scheme copies {group} but no {side} checkpoint was given")
            if name not in source.params:
                raise ckpt.CheckpointError(f"{side} checkpoint is missing parameter {name!r}")
            value = source.params[name].data
            if value.shape != shapes[name]:
                raise ckpt.CheckpointError(
                    f"{side} parameter {name!r} has shape {value.shape}, expected {shapes[name]}")
            params[name] = Tensor(np.array(value, dtype=ad.get_default_dtype()), requires_grad=True,
                                  name=f"{side}.{name}")
        src_hash = source.src_vocab_hash if source else ""
        tgt_hash = source.tgt_vocab_hash if source else ""
        return TransformerModel(cfg, kind, params, src_hash, tgt_hash)

    s2p = side_model("s2p", s2p_cfg, s2p_kind, s2p_ckpt)
    p2t = side_model("p2t", p2t_cfg, "ar", p2t_ckpt)
    # vocab identity comes from whichever checkpoints exist, even for unflagged groups
    if s2p_ckpt is not None:
        s2p.src_vocab_hash, s2p.tgt_vocab_hash = s2p_ckpt.src_vocab_hash, s2p_ckpt.tgt_vocab_hash
    if p2t_ckpt is not None:
        p2t.src_vocab_hash, p2t.tgt_vocab_hash = p2t_ckpt.src_vocab_hash, p2t_ckpt.tgt_vocab_hash
    if interface.kind == "decoder_posteriors":
        check_pivot_vocab(s2p, p2t)
    if interface.kind == "decoder_states" and not interface.with_p2t_encoder:
        p2t.params = {n: t for n, t in p2t.params.items() if not n.startswith("encoder.")}
    return IntegratedModel(s2p, p2t, interface, length_policy or LengthPolicy(), seed,
                           frozenset(frozen), scheme)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(model: TransformerModel | IntegratedModel, path) -> Path:
    params = model.named_parameters() if isinstance(model, IntegratedModel) else model.params
    path = ckpt.save_checkpoint(params, path)
    ckpt.save_meta(path, model.meta())
    return path


def _model_from_meta(meta: Mapping, store: Mapping[str, np.ndarray], prefix: str = "") -> TransformerModel:
    cfg = TransformerConfig.from_dict(meta["config"])
    expected = {prefix + n: s for n, s in param_shapes(cfg, meta["kind"]).items()}
    own = {n: a for n, a in store.items() if n.startswith(prefix)}
    if prefix == "p2t." and not any(n.startswith("p2t.encoder.") for n in own):
        # three-component variant: the p2t encoder was dropped at assembly
        expected = {n: s for n, s in expected.items() if not n.startswith("p2t.encoder.")}
    ckpt.check_store(own, expected, "checkpoint")
    dt = ad.get_default_dtype()
    params = {n[len(prefix):]: Tensor(np.array(store[n], dtype=dt), requires_grad=True, name=n) for n in expected}
    return TransformerModel(cfg, meta["kind"], params, meta.get("src_vocab_hash", ""),
                            meta.get("tgt_vocab_hash", ""))


def load_model(path) -> TransformerModel | IntegratedModel:
    meta = ckpt.load_meta(path)
    store = ckpt.load_checkpoint(path)
    if meta["kind"] != "integrated":
        return _model_from_meta(meta, store)
    s2p = _model_from_meta(meta["s2p"], store, "s2p.")
    p2t = _model_from_meta(meta["p2t"], store, "p2t.")
    iface = InterfaceKind(meta["interface"]["kind"], meta["interface"]["with_p2t_encoder"])
    lp = meta["length_policy"]
    return IntegratedModel(s2p, p2t, iface, LengthPolicy(lp["kind"], lp["lo"], lp["hi"]), meta["seed"],
                           frozenset(meta.get("frozen", ())), InitScheme(frozenset(meta.get("init", ()))))
