"""Inference: beam search, Mask-Predict, two-pass cascades and integrated decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .cascade import (
    IntegratedModel,
    LengthPolicy,
    PivotPass,
    bridge_posteriors,
    bridge_states,
    integrated_pivot,
    masked_pivot_input,
    pivot_lengths,
)
from .data import Vocabulary
from .nnet import BOS, EOS, MASK, PAD, EncoderOutput, TransformerModel, content_argmax

# log-probabilities of the next token for each (sentence row, prefix) pair
StepFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    truncated: bool = False

    @property
    def length(self) -> int:
        return max(len(self.tokens) - 1, 1)

    @property
    def normalized_score(self) -> float:
        return self.score / self.length

    @property
    def content(self) -> tuple[int, ...]:
        """Tokens between BOS and the final EOS."""
        end = len(self.tokens) - 1 if self.tokens and self.tokens[-1] == EOS and not self.truncated else len(self.tokens)
        start = 1 if self.tokens and self.tokens[0] == BOS else 0
        return self.tokens[start:end]


@dataclass
class NBestList:
    hypotheses: list[Hypothesis] = field(default_factory=list)
    normalized: bool = True

    def __len__(self) -> int:
        return len(self.hypotheses)

    def __iter__(self):
        return iter(self.hypotheses)

    def __getitem__(self, i) -> Hypothesis:
        return self.hypotheses[i]

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]

    def scores(self) -> list[float]:
        return [h.normalized_score if self.normalized else h.score for h in self.hypotheses]


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 4
    n_best: int = 1
    max_len_a: float = 1.5
    max_len_b: int = 5
    normalize: bool = True
    iterations: int = 5
    pivot_length: str = "predicted"

    def max_lengths(self, src_lengths: np.ndarray) -> np.ndarray:
        return np.maximum((self.max_len_a * np.asarray(src_lengths) + self.max_len_b).astype(int), 1)


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------

def beam_search_steps(step_fn: StepFn, batch_size: int, beam_size: int, n_best: int,
                      max_len, normalize: bool = True, bos: int = BOS, eos: int = EOS) -> list[NBestList]:
    """Batched beam search over an arbitrary next-token scorer.

    ``max_len`` (int or per-sentence array) bounds the number of generated
    tokens; unfinished beams are returned with ``truncated=True`` at the limit.
    A sentence stops once ``beam_size`` hypotheses have finished. With
    ``beam_size=1`` this is exactly a greedy argmax rollout.
    """
    if not beam_size >= n_best >= 1:
        raise ValueError(f"need beam_size >= n_best >= 1, got beam_size={beam_size}, n_best={n_best}")
    max_len = np.broadcast_to(np.asarray(max_len, dtype=int), (batch_size,))
    if batch_size and max_len.min() < 1:
        raise ValueError("max_len must be >= 1")
    W = beam_size
    alive: list[list[tuple[list[int], float]]] = [[([bos], 0.0)] for _ in range(batch_size)]
    finished: list[list[Hypothesis]] = [[] for _ in range(batch_size)]
    done = np.zeros(batch_size, dtype=bool)
    step = 0
    while not done.all():
        step += 1
        active = np.flatnonzero(~done)
        rows = np.concatenate([np.full(len(alive[b]), b) for b in active])
        prefixes = np.array([toks for b in active for toks, _ in alive[b]], dtype=np.int64)
        logp = np.asarray(step_fn(rows, prefixes), dtype=np.float64)
        V = logp.shape[-1]
        offset = 0
        for b in active:
            beams = alive[b]
            block = logp[offset:offset + len(beams)]
            offset += len(beams)
            cand = (np.array([s for _, s in beams])[:, None] + block).reshape(-1)
            order = np.argsort(-cand, kind="stable")
            nxt: list[tuple[list[int], float]] = []
            for rank, idx in enumerate(order[:2 * W]):
                score = float(cand[idx])
                if not math.isfinite(score):
                    break
                w, v = divmod(int(idx), V)
                toks = beams[w][0] + [v]
                if v == eos:
                    if rank < W:
                        finished[b].append(Hypothesis(tuple(toks), score))
                else:
                    nxt.append((toks, score))
                if len(nxt) == W:
                    break
            if step >= max_len[b]:
                finished[b].extend(Hypothesis(tuple(t), s, truncated=True) for t, s in nxt)
                done[b] = True
            elif len(finished[b]) >= W or not nxt:
                done[b] = True
            alive[b] = nxt
    out = []
    for hyps in finished:
        key = (lambda h: h.normalized_score) if normalize else (lambda h: h.score)
        ranked = sorted(hyps, key=key, reverse=True)
        unique, seen = [], set()
        for h in ranked:
            if h.tokens not in seen:
                seen.add(h.tokens)
                unique.append(h)
        out.append(NBestList(unique[:n_best], normalize))
    return out


def _select_rows(enc: EncoderOutput, rows: np.ndarray) -> EncoderOutput:
    return EncoderOutput(ad.Tensor(enc.states.data[rows]), enc.padding_mask[rows])


def ar_step_fn(model: TransformerModel, enc: EncoderOutput) -> StepFn:
    def step(rows, prefixes):
        with ad.no_grad():
            out = model.decode(_select_rows(enc, rows), prefixes)
        return _last_log_softmax(out.logits.data)
    return step


def _last_log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits[:, -1, :].astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> np.ndarray:
    T = max((len(s) for s in seqs), default=1)
    out = np.full((len(seqs), max(T, 1)), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def _as_batch(src) -> np.ndarray:
    if isinstance(src, np.ndarray) and src.ndim == 2:
        return src
    return pad_batch(src)


def _content_len(batch: np.ndarray) -> np.ndarray:
    return ((batch != PAD) & (batch != BOS) & (batch != EOS)).sum(axis=1)


def beam_search_encoded(model: TransformerModel, enc: EncoderOutput, beam_size: int = 4, n_best: int = 1,
                        max_len=50, normalize: bool = True) -> list[NBestList]:
    return beam_search_steps(ar_step_fn(model, enc), enc.states.shape[0], beam_size, n_best, max_len, normalize)


def beam_search(model: TransformerModel, src, beam_size: int = 4, n_best: int = 1, max_len=None,
                normalize: bool = True, cfg: DecodeConfig | None = None) -> list[NBestList]:
    """Decode a batch of BOS/EOS-wrapped source id sequences with an AR model."""
    if model.kind != "ar":
        raise ValueError("beam_search needs an autoregressive model")
    batch = _as_batch(src)
    if max_len is None:
        max_len = (cfg or DecodeConfig()).max_lengths(_content_len(batch))
    with ad.no_grad():
        enc = model.encode(batch)
    return beam_search_encoded(model, enc, beam_size, n_best, max_len, normalize)


# ---------------------------------------------------------------------------
# Mask-Predict
# ---------------------------------------------------------------------------

def remask_count(length: int, iteration: int, iterations: int) -> int:
    """Positions re-masked after ``iteration`` (1-based) of ``iterations``."""
    return int(math.ceil(length * (iterations - iteration) / iterations))


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def mask_predict_encoded(model: TransformerModel, enc: EncoderOutput, lengths: np.ndarray,
                         iterations: int) -> tuple[list[Hypothesis], np.ndarray]:
    """Mask-Predict on an encoded batch. Also returns the last decoder input."""
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.min() < 1:
        raise ValueError("pivot length must be >= 1")
    dec_in = masked_pivot_input(lengths)
    B, K = dec_in.shape
    real = dec_in != PAD
    tokens = dec_in.copy()
    logprob = np.zeros((B, K))
    last_input = dec_in.copy()
    for t in range(1, iterations + 1):
        last_input = tokens.copy()
        with ad.no_grad():
            out = model.decode(enc, tokens)
        lp = _log_softmax_np(out.logits.data)
        best = content_argmax(lp)
        best_lp = np.take_along_axis(lp, best[..., None], axis=-1)[..., 0]
        upd = tokens == MASK
        tokens = np.where(upd, best, tokens)
        logprob = np.where(upd, best_lp, logprob)
        if t == iterations:
            break
        for b in range(B):
            n = remask_count(int(lengths[b]), t, iterations)
            if n <= 0:
                continue
            cand = np.where(real[b], logprob[b], np.inf)
            worst = np.argsort(cand, kind="stable")[:n]
            tokens[b, worst] = MASK
    hyps = [Hypothesis((BOS, *tokens[b, :lengths[b]].tolist(), EOS), float(logprob[b, :lengths[b]].sum()))
            for b in range(B)]
    return hyps, last_input


def mask_predict(model: TransformerModel, src, iterations: int, length) -> list[Hypothesis]:
    """Iterative NAT decoding; ``iterations=1`` is a single fully-masked pass."""
    if model.kind != "nat":
        raise ValueError("mask_predict needs a non-autoregressive model")
    batch = _as_batch(src)
    lengths = np.broadcast_to(np.asarray(length, dtype=np.int64), (batch.shape[0],))
    if lengths.min() < 1:
        raise ValueError("length must be >= 1")
    with ad.no_grad():
        enc = model.encode(batch)
    return mask_predict_encoded(model, enc, lengths, iterations)[0]


def nat_lengths(model: TransformerModel, src, policy: str | LengthPolicy = "predicted",
                trg=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Pivot lengths for a standalone NAT model under a length policy."""
    policy = LengthPolicy.parse(policy) if isinstance(policy, str) else policy
    batch = _as_batch(src)
    logits = None
    if policy.kind == "predicted":
        with ad.no_grad():
            logits = model.predict_length(model.encode(batch))
    trg_len = _content_len(_as_batch(trg)) if trg is not None else None
    return policy.lengths(_content_len(batch), trg_len, logits, rng, max_len=model.cfg.max_positions - 2)


# ---------------------------------------------------------------------------
# cascades
# ---------------------------------------------------------------------------

def remap_ids(ids: Sequence[int], src_vocab: Vocabulary | None, dst_vocab: Vocabulary | None) -> list[int]:
    """Map ids between vocabularies through their surface forms (identity if shared)."""
    ids = [int(i) for i in ids]
    if src_vocab is None or dst_vocab is None or src_vocab.hash == dst_vocab.hash:
        return ids
    return [dst_vocab.index.get(src_vocab.tokens[i], 3) if i >= 5 else i for i in ids]


def pivot_input(hyp: Hypothesis) -> list[int]:
    """The p2t encoder input for a pivot hypothesis: ``[BOS, content..., EOS]``."""
    return [BOS, *hyp.content, EOS]


def decode_pivots(s2p: TransformerModel, src, cfg: DecodeConfig, trg=None,
                  rng: np.random.Generator | None = None, n_best: int = 1) -> list[NBestList]:
    batch = _as_batch(src)
    if s2p.kind == "ar":
        return beam_search(s2p, batch, max(cfg.beam, n_best), n_best, normalize=cfg.normalize, cfg=cfg)
    lengths = nat_lengths(s2p, batch, cfg.pivot_length, trg, rng)
    return [NBestList([h]) for h in mask_predict(s2p, batch, cfg.iterations, lengths)]


def two_pass_decode(s2p: TransformerModel, p2t: TransformerModel, src, cfg: DecodeConfig | None = None, *,
                    s2p_vocab: Vocabulary | None = None, p2t_vocab: Vocabulary | None = None,
                    trg=None, rng: np.random.Generator | None = None) -> list[tuple[Hypothesis, Hypothesis]]:
    """Decode the pivot first, then the target from the discrete pivot."""
    cfg = cfg or DecodeConfig()
    pivots = [nb.best for nb in decode_pivots(s2p, src, cfg, trg, rng)]
    targets = translate_pivots(p2t, pivots, cfg, s2p_vocab, p2t_vocab)
    return list(zip(pivots, targets))


def translate_pivots(p2t: TransformerModel, pivots: Sequence[Hypothesis], cfg: DecodeConfig,
                     s2p_vocab: Vocabulary | None = None, p2t_vocab: Vocabulary | None = None) -> list[Hypothesis]:
    inputs = [remap_ids(pivot_input(h), s2p_vocab, p2t_vocab) for h in pivots]
    return [nb.best for nb in beam_search(p2t, inputs, cfg.beam, 1, normalize=cfg.normalize, cfg=cfg)]


def decode_integrated(model: IntegratedModel, src, beam_size: int = 4, *, cfg: DecodeConfig | None = None,
                      hardened: bool = False, iterations: int = 1, trg=None,
                      rng: np.random.Generator | None = None) -> list[Hypothesis]:
    """One NA pass on a fully masked pivot, bridge, then beam search on the p2t decoder.

    ``iterations > 1`` refines the pivot with Mask-Predict first and bridges
    the final pass; training only ever sees the single-pass case.
    """
    cfg = cfg or DecodeConfig(beam=beam_size)
    batch = _as_batch(src)
    trg_batch = _as_batch(trg) if trg is not None else None
    with ad.no_grad():
        if model.s2p.kind == "nat":
            enc = model.s2p.encode(batch)
            lengths = pivot_lengths(model, batch, enc, trg_batch, rng)
            if iterations > 1:
                piv = _refined_pivot(model, batch, enc, lengths, iterations, hardened)
            else:
                piv = integrated_pivot(model, batch, lengths=lengths, hardened=hardened)
        else:
            pivots = [nb.best for nb in beam_search(model.s2p, batch, beam_size, 1, normalize=cfg.normalize, cfg=cfg)]
            prefix = pad_batch([[BOS, *h.content] for h in pivots])
            piv = integrated_pivot(model, batch, pivot_ids=prefix, hardened=hardened)
    max_len = cfg.max_lengths(_content_len(batch))
    return [nb.best for nb in beam_search_encoded(model.p2t, piv.encoder_out, beam_size, 1, max_len, cfg.normalize)]


def _refined_pivot(model: IntegratedModel, batch, enc, lengths, iterations, hardened):
    _, last_input = mask_predict_encoded(model.s2p, enc, lengths, iterations)
    dec = model.s2p.decode(enc, last_input)
    p2t = model.p2t
    if model.interface.kind == "decoder_states":
        bridged = bridge_states(dec, p2t.cfg, p2t.params, dec.padding_mask, model.interface.with_p2t_encoder)
    else:
        bridged = bridge_posteriors(dec, p2t.cfg, p2t.params, lengths, hardened=hardened)
    return PivotPass(bridged, dec, lengths)
