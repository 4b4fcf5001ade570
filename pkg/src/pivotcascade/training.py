"""Losses, Adam with warmup/inverse-sqrt schedule, token-budget batching and the training recipes."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .bleu import corpus_bleu
from .cascade import IntegratedModel, content_lengths, forward_integrated, param_group, save_model
from .data import DataError, ParallelCorpus, Vocabulary, decode_line, encode_line
from .decoding import DecodeConfig, beam_search, decode_integrated, mask_predict, nat_lengths, pad_batch
from .nnet import BOS, EOS, MASK, PAD, TransformerConfig, TransformerModel

log = logging.getLogger(__name__)

PRETRAIN_LR = 5e-4
FINETUNE_LR = 0.5e-5


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = PRETRAIN_LR
    warmup: int = 4000
    betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    dropout: float | None = None          # overrides the model's dropout for this run
    max_tokens: int = 4096                # padded target tokens per micro-batch
    update_freq: int = 1                  # micro-batches accumulated per update
    max_updates: int = 1000
    max_epochs: int | None = None
    label_smoothing: float | None = None  # None: 0.1 for AR pre-training, else 0
    length_loss_factor: float = 0.1
    seed: int = 1
    eval_interval: int = 500
    log_interval: int = 10
    dev_beam: int = 1
    dev_iterations: int = 1
    snapshot_fractions: tuple[float, ...] = ()
    max_consecutive_skips: int = 100
    precision: str | None = None          # "float32" / "float64"; None keeps the parameter dtype

    def __post_init__(self):
        if self.warmup < 1:
            raise ValueError(f"warmup must be >= 1, got {self.warmup}")
        if self.max_tokens < 1 or self.update_freq < 1 or self.max_updates < 0:
            raise ValueError("max_tokens and update_freq must be >= 1, max_updates >= 0")
        if not 0.0 <= (self.label_smoothing or 0.0) < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.eval_interval < 1 or self.log_interval < 1:
            raise ValueError("eval_interval and log_interval must be >= 1")
        if any(not 0.0 < f <= 1.0 for f in self.snapshot_fractions):
            raise ValueError(f"snapshot fractions must be in (0, 1]: {self.snapshot_fractions}")
        if self.precision not in (None, "float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["snapshot_fractions"] = list(self.snapshot_fractions)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if "snapshot_fractions" in d:
            d["snapshot_fractions"] = tuple(d["snapshot_fractions"])
        return cls(**d)


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def lr_schedule(update: int, warmup: int, peak: float) -> float:
    """Linear warmup to ``peak`` then inverse square root decay."""
    if update < 1:
        raise ValueError(f"update must be >= 1, got {update}")
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    return peak * min(update / warmup, math.sqrt(warmup / update))


@dataclass
class TrainState:
    update: int = 0
    adam_step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    skipped_steps: int = 0
    consecutive_skips: int = 0
    best_score: float | None = None
    best_path: str | None = None
    best_update: int | None = None
    last_grad_norm: float = 0.0
    group_grad_norms: dict[str, float] = field(default_factory=dict)


def grad_norm(params: Mapping[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def adam_step(params: Mapping[str, Tensor], state: TrainState, lr: float,
              betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-8) -> bool:
    """Bias-corrected Adam update in place; clears grads.

    A step with any non-finite gradient is rejected (counted in
    ``state.skipped_steps``) and leaves parameters and moments untouched.
    """
    grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped_steps += 1
        state.consecutive_skips += 1
        log.warning("non-finite gradient at update %d; step skipped", state.update + 1)
        ad.zero_grad(params.values())
        return False
    b1, b2 = betas
    state.adam_step += 1
    t = state.adam_step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if name in state.moments:
            m, v = state.moments[name]
        else:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.moments[name] = (m, v)
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    state.consecutive_skips = 0
    ad.zero_grad(params.values())
    return True


# ---------------------------------------------------------------------------
# examples and batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Example:
    index: int
    src: tuple[int, ...]                 # BOS ... EOS
    tgt: tuple[int, ...]                 # content only
    piv: tuple[int, ...] | None = None   # content only (synthetic pivots)

    @property
    def target_tokens(self) -> int:
        return len(self.tgt) + 1


@dataclass(frozen=True)
class Batch:
    indices: tuple[int, ...]
    src: np.ndarray        # [B, J]  BOS..EOS, PAD after
    tgt_in: np.ndarray     # [B, K+1] BOS + content
    tgt_out: np.ndarray    # [B, K+1] content + EOS
    tgt: np.ndarray        # [B, K]  content
    piv_in: np.ndarray | None = None  # [B, K'+1] BOS + pivot content

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def padded_target_tokens(self) -> int:
        return int(self.tgt_out.size)

    @property
    def n_target_tokens(self) -> int:
        return int((self.tgt_out != PAD).sum())


def make_examples(corpus: ParallelCorpus, src_side: str, tgt_side: str, src_vocab: Vocabulary,
                  tgt_vocab: Vocabulary, piv_side: str | None = None,
                  piv_vocab: Vocabulary | None = None) -> list[Example]:
    if len(corpus) == 0:
        raise DataError("training corpus is empty")
    out = []
    for i in range(len(corpus)):
        src = tuple(encode_line(src_vocab, corpus[src_side][i]))
        tgt = tuple(encode_line(tgt_vocab, corpus[tgt_side][i])[1:-1])
        piv = None
        if piv_side is not None:
            piv = tuple(encode_line(piv_vocab or tgt_vocab, corpus[piv_side][i])[1:-1])
        if len(tgt) == 0:
            raise DataError(f"empty {tgt_side} line {i + 1}")
        out.append(Example(i, src, tgt, piv))
    return out


def collate(examples: Sequence[Example]) -> Batch:
    tgt_in = pad_batch([(BOS, *e.tgt) for e in examples])
    tgt_out = pad_batch([(*e.tgt, EOS) for e in examples])
    tgt = pad_batch([e.tgt for e in examples])
    piv = None
    if all(e.piv is not None for e in examples):
        piv = pad_batch([(BOS, *e.piv) for e in examples])
    return Batch(tuple(e.index for e in examples), pad_batch([e.src for e in examples]),
                 tgt_in, tgt_out, tgt, piv)


def make_batches(examples: Sequence[Example], max_tokens: int,
                 rng: np.random.Generator | None = None) -> list[Batch]:
    """Pack whole sentences so that each batch's padded target size stays within ``max_tokens``.

    Sentences are grouped by length (ties shuffled by ``rng``) and the batch
    order is shuffled when ``rng`` is given.
    """
    if not examples:
        return []
    longest = max(e.target_tokens for e in examples)
    if longest > max_tokens:
        raise ValueError(f"token budget {max_tokens} is smaller than the longest target ({longest} tokens)")
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    order = sorted(order, key=lambda i: (examples[i].target_tokens, len(examples[i].src)))
    groups: list[list[Example]] = []
    cur: list[Example] = []
    width = 0
    for i in order:
        ex = examples[i]
        w = max(width, ex.target_tokens)
        if cur and w * (len(cur) + 1) > max_tokens:
            groups.append(cur)
            cur, w = [], ex.target_tokens
        cur.append(ex)
        width = w
    if cur:
        groups.append(cur)
    if rng is not None:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return [collate(g) for g in groups]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def ar_loss(model: TransformerModel, batch: Batch, rng: np.random.Generator | None = None,
            label_smoothing: float = 0.0) -> tuple[Tensor, int]:
    """Teacher-forced cross-entropy summed over real target positions, and the token count."""
    enc = model.encode(batch.src, rng=rng)
    out = model.decode(enc, batch.tgt_in, rng=rng)
    weights = (batch.tgt_out != PAD)
    return ad.cross_entropy(out.logits, batch.tgt_out, weights, label_smoothing), int(weights.sum())


def sample_nat_masks(lengths: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Boolean [B, max K]: per sentence, a uniform count in [1, K] of distinct positions."""
    lengths = np.asarray(lengths, dtype=np.int64)
    K = int(lengths.max())
    mask = np.zeros((len(lengths), K), dtype=bool)
    for b, k in enumerate(lengths):
        n = int(rng.integers(1, k + 1))
        mask[b, rng.choice(int(k), size=n, replace=False)] = True
    return mask


def nat_loss(model: TransformerModel, batch: Batch, rng: np.random.Generator,
             length_loss_factor: float = 0.1, dropout_rng: np.random.Generator | None = None,
             ) -> tuple[Tensor, Tensor, int]:
    """CMLM loss: token cross-entropy on masked positions (summed) and length loss (summed).

    Returns ``(token_loss, length_loss, n_masked)``; the length loss is
    already multiplied by ``length_loss_factor``.
    """
    lengths = content_lengths(batch.tgt)
    mask = sample_nat_masks(lengths, rng)
    dec_in = np.where(mask, MASK, batch.tgt)
    limit = model.cfg.max_positions
    if lengths.max() > limit:
        raise DataError(f"target length {lengths.max()} exceeds max_positions={limit}")
    enc = model.encode(batch.src, rng=dropout_rng)
    out = model.decode(enc, dec_in, rng=dropout_rng)
    tok = ad.cross_entropy(out.logits, batch.tgt, mask)
    len_logits = model.predict_length(enc)
    length = ad.cross_entropy(len_logits, lengths - 1) * length_loss_factor
    return tok, length, int(mask.sum())


def integrated_loss(model: IntegratedModel, batch: Batch, rng: np.random.Generator | None = None,
                    length_rng: np.random.Generator | None = None) -> tuple[Tensor, int]:
    if model.s2p.kind == "ar" and batch.piv_in is None:
        raise DataError("an autoregressive s2p side needs synthetic pivots in the training data")
    out = forward_integrated(model, batch.src, batch.tgt_in, trg_ids=batch.tgt, pivot_ids=batch.piv_in,
                             rng=rng, length_rng=length_rng)
    weights = (batch.tgt_out != PAD)
    return ad.cross_entropy(out.logits, batch.tgt_out, weights), int(weights.sum())


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

METRIC_FIELDS = ("update", "split", "loss", "lr", "bleu", "grad_norm", "skipped_steps")


class MetricsLogger:
    """Metric records kept in memory and mirrored to JSONL and CSV files."""

    def __init__(self, jsonl_path=None, csv_path=None):
        self.records: list[dict] = []
        self.jsonl_path = Path(jsonl_path) if jsonl_path else None
        self.csv_path = Path(csv_path) if csv_path else None
        for p in (self.jsonl_path, self.csv_path):
            if p is not None:
                p.parent.mkdir(parents=True, exist_ok=True)
                p.write_text("", encoding="utf-8")
        if self.csv_path is not None:
            with self.csv_path.open("w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(METRIC_FIELDS)

    @classmethod
    def in_dir(cls, run_dir) -> "MetricsLogger":
        run_dir = Path(run_dir)
        return cls(run_dir / "metrics.jsonl", run_dir / "metrics.csv")

    def log(self, **record) -> dict:
        unknown = set(record) - set(METRIC_FIELDS)
        if unknown:
            raise KeyError(f"unknown metric field(s): {sorted(unknown)}")
        rec = {k: record[k] for k in METRIC_FIELDS if k in record and record[k] is not None}
        self.records.append(rec)
        if self.jsonl_path is not None:
            with self.jsonl_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        if self.csv_path is not None:
            with self.csv_path.open("a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow([repr(rec[k]) if isinstance(rec.get(k), float) else rec.get(k, "")
                                         for k in METRIC_FIELDS])
        return rec

    def of_split(self, split: str) -> list[dict]:
        return [r for r in self.records if r["split"] == split]


# ---------------------------------------------------------------------------
# generic loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: TransformerModel | IntegratedModel
    state: TrainState
    metrics: MetricsLogger
    snapshots: dict[float, dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def train_losses(self) -> list[float]:
        return [r["loss"] for r in self.metrics.of_split("train")]

    @property
    def dev_scores(self) -> list[float]:
        return [r["bleu"] for r in self.metrics.of_split("dev") if "bleu" in r]


def _rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(4)
    return {k: np.random.default_rng(s) for k, s in zip(("batch", "dropout", "mask", "length"), children)}


def _copy_params(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in params.items()}


def _restore(params: Mapping[str, Tensor], values: Mapping[str, np.ndarray]) -> None:
    for n, p in params.items():
        p.data = values[n].copy()


LossFn = Callable[[Batch, dict], tuple[Tensor, int]]


def run_training(params: Mapping[str, Tensor], trainable: Mapping[str, Tensor], loss_fn: LossFn,
                 examples: Sequence[Example], cfg: TrainConfig, *, dev_fn: Callable[[], float] | None = None,
                 metrics: MetricsLogger | None = None, save_fn: Callable[[Path], Path] | None = None,
                 checkpoint_dir=None, group_of: Callable[[str], str] | None = None,
                 ) -> tuple[TrainState, MetricsLogger, dict[float, dict[str, np.ndarray]]]:
    """Shared update loop.

    ``loss_fn(batch, rngs)`` returns a scalar loss and the normaliser for
    that micro-batch. Each micro-batch loss is divided by its normaliser and
    by ``update_freq`` before backward, so an update averages over
    micro-batches. Parameters in ``params`` but not in ``trainable`` get no
    gradient. When ``dev_fn`` is given, the parameters with the best dev
    score are restored at the end.
    """
    if not examples:
        raise DataError("training corpus is empty")
    metrics = metrics or MetricsLogger()
    state = TrainState()
    rngs = _rngs(cfg.seed)
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    frozen = [p for n, p in params.items() if n not in trainable]
    saved_flags = {n: p.requires_grad for n, p in params.items()}
    for p in frozen:
        p.requires_grad = False
    for p in trainable.values():
        p.requires_grad = True
    snap_at = {max(1, int(round(f * cfg.max_updates))): f for f in cfg.snapshot_fractions}
    snapshots: dict[float, dict[str, np.ndarray]] = {}
    best: dict[str, np.ndarray] | None = None
    dev_ok = dev_fail = 0
    window: list[float] = []
    last_lr = 0.0

    def evaluate():
        nonlocal best, dev_ok, dev_fail
        try:
            with ad.no_grad():
                score = float(dev_fn())
        except (ValueError, FloatingPointError, IndexError) as err:
            dev_fail += 1
            log.warning("dev evaluation failed at update %d: %s", state.update, err)
            return
        dev_ok += 1
        metrics.log(update=state.update, split="dev", lr=last_lr, bleu=score,
                    grad_norm=state.last_grad_norm, skipped_steps=state.skipped_steps)
        if state.best_score is None or score > state.best_score:
            state.best_score, state.best_update = score, state.update
            best = _copy_params(params)
            if ckdir is not None and save_fn is not None:
                state.best_path = str(save_fn(ckdir / "best.csc"))

    try:
        epoch = 0
        micro: list[Batch] = []
        done = cfg.max_updates == 0
        while not done:
            if cfg.max_epochs is not None and epoch >= cfg.max_epochs:
                break
            epoch += 1
            for batch in make_batches(examples, cfg.max_tokens, rngs["batch"]):
                micro.append(batch)
                if len(micro) < cfg.update_freq:
                    continue
                total = 0.0
                for b in micro:
                    loss, norm = loss_fn(b, rngs)
                    value = float(loss.item())
                    total += value / max(norm, 1) / len(micro)
                    if math.isfinite(value):
                        ad.backward(loss * (1.0 / (max(norm, 1) * len(micro))))
                micro = []
                state.last_grad_norm = grad_norm(trainable)
                if group_of is not None:
                    norms: dict[str, float] = {}
                    for n, p in trainable.items():
                        if p.grad is not None:
                            g = group_of(n)
                            norms[g] = norms.get(g, 0.0) + float(np.sum(np.square(p.grad, dtype=np.float64)))
                    state.group_grad_norms = {g: math.sqrt(v) for g, v in norms.items()}
                lr = lr_schedule(state.update + 1, cfg.warmup, cfg.lr)
                if math.isfinite(total):
                    applied = adam_step(trainable, state, lr, cfg.betas, cfg.adam_eps)
                else:
                    log.warning("non-finite loss at update %d; step skipped", state.update + 1)
                    state.skipped_steps += 1
                    state.consecutive_skips += 1
                    ad.zero_grad(trainable.values())
                    applied = False
                if not applied:
                    if state.consecutive_skips >= cfg.max_consecutive_skips:
                        raise NonFiniteError(
                            f"{state.consecutive_skips} consecutive non-finite steps at update {state.update}")
                    continue
                state.update += 1
                last_lr = lr
                window.append(total)
                if state.update % cfg.log_interval == 0 or state.update == cfg.max_updates:
                    metrics.log(update=state.update, split="train", loss=float(np.mean(window)), lr=lr,
                                grad_norm=state.last_grad_norm, skipped_steps=state.skipped_steps)
                    window = []
                if state.update in snap_at:
                    snapshots[snap_at[state.update]] = _copy_params(params)
                    if ckdir is not None and save_fn is not None:
                        save_fn(ckdir / f"update{state.update}.csc")
                if dev_fn is not None and state.update % cfg.eval_interval == 0:
                    evaluate()
                if state.update >= cfg.max_updates:
                    done = True
                    break
        if window:
            metrics.log(update=state.update, split="train", loss=float(np.mean(window)), lr=last_lr,
                        grad_norm=state.last_grad_norm, skipped_steps=state.skipped_steps)
        if dev_fn is not None and (state.update == 0 or state.update % cfg.eval_interval != 0):
            evaluate()
        if dev_fn is not None:
            if dev_ok == 0:
                raise TrainingError(f"all {dev_fail} dev evaluations failed")
            _restore(params, best)
        if ckdir is not None and save_fn is not None:
            save_fn(ckdir / "last.csc")
    finally:
        for n, p in params.items():
            p.requires_grad = saved_flags[n]
            p.grad = None
    return state, metrics, snapshots


def _prepare(model: TransformerModel, cfg: TrainConfig) -> None:
    if cfg.dropout is not None:
        model.cfg = replace(model.cfg, dropout_rate=cfg.dropout)
    if cfg.precision is not None:
        dt = np.dtype(cfg.precision)
        for p in model.params.values():
            p.data = p.data.astype(dt)


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------

def _dev_lines(dev: ParallelCorpus | None, src_side: str, tgt_side: str):
    if dev is None:
        return None
    if len(dev) == 0:
        raise DataError("dev corpus is empty")
    return dev[src_side], dev[tgt_side]


def pretrain_ar(model_cfg: TransformerConfig | TransformerModel, corpus: ParallelCorpus, cfg: TrainConfig, *,
                src_vocab: Vocabulary, tgt_vocab: Vocabulary, src_side: str = "piv", tgt_side: str = "trg",
                dev: ParallelCorpus | None = None, metrics: MetricsLogger | None = None,
                checkpoint_dir=None) -> TrainResult:
    """Train an autoregressive model with teacher-forced (optionally label-smoothed) cross-entropy."""
    model = (model_cfg if isinstance(model_cfg, TransformerModel)
             else TransformerModel.create(model_cfg, "ar", src_vocab.hash, tgt_vocab.hash))
    if model.kind != "ar":
        raise ValueError("pretrain_ar needs an autoregressive model")
    _prepare(model, cfg)
    ls = 0.1 if cfg.label_smoothing is None else cfg.label_smoothing
    examples = make_examples(corpus, src_side, tgt_side, src_vocab, tgt_vocab)
    dev_lines = _dev_lines(dev, src_side, tgt_side)

    def loss_fn(batch, rngs):
        return ar_loss(model, batch, rngs["dropout"], ls)

    dev_fn = None
    if dev_lines is not None:
        def dev_fn():
            hyps = translate_lines(model, dev_lines[0], src_vocab, tgt_vocab, beam=cfg.dev_beam)
            return corpus_bleu(hyps, dev_lines[1]).score

    with ad.default_dtype(cfg.precision or next(iter(model.params.values())).dtype):
        state, metrics, snaps = run_training(model.params, model.params, loss_fn, examples, cfg, dev_fn=dev_fn,
                                             metrics=metrics, save_fn=lambda p: save_model(model, p),
                                             checkpoint_dir=checkpoint_dir)
    return TrainResult(model, state, metrics, snaps)


def pretrain_nat(model_cfg: TransformerConfig | TransformerModel, corpus: ParallelCorpus, cfg: TrainConfig, *,
                 src_vocab: Vocabulary, tgt_vocab: Vocabulary, src_side: str = "src", tgt_side: str = "piv",
                 dev: ParallelCorpus | None = None, metrics: MetricsLogger | None = None,
                 checkpoint_dir=None) -> TrainResult:
    """Train a CMLM: random masking of the decoder input plus a jointly trained length head."""
    model = (model_cfg if isinstance(model_cfg, TransformerModel)
             else TransformerModel.create(model_cfg, "nat", src_vocab.hash, tgt_vocab.hash))
    if model.kind != "nat":
        raise ValueError("pretrain_nat needs a non-autoregressive model")
    _prepare(model, cfg)
    examples = make_examples(corpus, src_side, tgt_side, src_vocab, tgt_vocab)
    dev_lines = _dev_lines(dev, src_side, tgt_side)
    ls = cfg.label_smoothing or 0.0
    if ls:
        log.info("label smoothing is not used for CMLM training")

    def loss_fn(batch, rngs):
        tok, length, n = nat_loss(model, batch, rngs["mask"], cfg.length_loss_factor, rngs["dropout"])
        # token loss is averaged over masked positions, length loss over sentences
        return tok + length * (n / batch.size), n

    dev_fn = None
    if dev_lines is not None:
        def dev_fn():
            hyps = nat_translate_lines(model, dev_lines[0], src_vocab, tgt_vocab, cfg.dev_iterations,
                                       oracle=dev_lines[1])
            return corpus_bleu(hyps, dev_lines[1]).score

    with ad.default_dtype(cfg.precision or next(iter(model.params.values())).dtype):
        state, metrics, snaps = run_training(model.params, model.params, loss_fn, examples, cfg, dev_fn=dev_fn,
                                             metrics=metrics, save_fn=lambda p: save_model(model, p),
                                             checkpoint_dir=checkpoint_dir)
    return TrainResult(model, state, metrics, snaps)


def finetune_integrated(model: IntegratedModel, corpus: ParallelCorpus, cfg: TrainConfig, *,
                        src_vocab: Vocabulary, trg_vocab: Vocabulary, piv_vocab: Vocabulary | None = None,
                        src_side: str = "src", trg_side: str = "trg", piv_side: str | None = None,
                        dev: ParallelCorpus | None = None, metrics: MetricsLogger | None = None,
                        checkpoint_dir=None) -> TrainResult:
    """End-to-end fine-tuning of an assembled model on src -> trg data.

    Frozen groups (``model.frozen``) are left untouched. With an AR s2p side,
    ``piv_side`` must name pre-generated synthetic pivots, which are
    teacher-forced and never regenerated.
    """
    if cfg.dropout is not None:
        model.s2p.cfg = replace(model.s2p.cfg, dropout_rate=cfg.dropout)
        model.p2t.cfg = replace(model.p2t.cfg, dropout_rate=cfg.dropout)
    if cfg.precision is not None:
        dt = np.dtype(cfg.precision)
        for p in model.named_parameters().values():
            p.data = p.data.astype(dt)
    if model.s2p.kind == "ar" and piv_side is None:
        raise DataError("an autoregressive s2p side needs synthetic pivots (piv_side)")
    examples = make_examples(corpus, src_side, trg_side, src_vocab, trg_vocab, piv_side, piv_vocab)
    dev_lines = _dev_lines(dev, src_side, trg_side)
    params = model.named_parameters()
    trainable = {n: p for n, p in model.trainable_parameters().items() if n not in model.unused_parameters()}

    def loss_fn(batch, rngs):
        return integrated_loss(model, batch, rngs["dropout"], rngs["length"])

    dev_fn = None
    if dev_lines is not None:
        def dev_fn():
            hyps = integrated_translate_lines(model, dev_lines[0], src_vocab, trg_vocab, beam=cfg.dev_beam,
                                              refs=dev_lines[1], seed=cfg.seed)
            return corpus_bleu(hyps, dev_lines[1]).score

    with ad.default_dtype(cfg.precision or next(iter(params.values())).dtype):
        state, metrics, snaps = run_training(params, trainable, loss_fn, examples, cfg, dev_fn=dev_fn,
                                             metrics=metrics, save_fn=lambda p: save_model(model, p),
                                             checkpoint_dir=checkpoint_dir, group_of=param_group)
    return TrainResult(model, state, metrics, snaps)


# ---------------------------------------------------------------------------
# line-level translation helpers
# ---------------------------------------------------------------------------

def _chunks(n: int, size: int) -> Iterator[range]:
    for i in range(0, n, size):
        yield range(i, min(n, i + size))


def translate_lines(model: TransformerModel, lines: Sequence[str], src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                    beam: int = 4, chunk: int = 64, decode_cfg: DecodeConfig | None = None) -> list[str]:
    """Beam-search each line; a failing line becomes an empty output and is logged."""
    cfg = decode_cfg or DecodeConfig(beam=beam)
    out: list[str] = []
    for idx in _chunks(len(lines), chunk):
        ids = [encode_line(src_vocab, lines[i]) for i in idx]
        try:
            res = beam_search(model, ids, beam, 1, normalize=cfg.normalize, cfg=cfg)
            out.extend(decode_line(tgt_vocab, nb.best.tokens) for nb in res)
        except (ValueError, FloatingPointError) as err:
            for i, one in zip(idx, ids):
                try:
                    nb = beam_search(model, [one], beam, 1, normalize=cfg.normalize, cfg=cfg)[0]
                    out.append(decode_line(tgt_vocab, nb.best.tokens))
                except (ValueError, FloatingPointError):
                    log.warning("decoding failed on line %d: %s", i + 1, err)
                    out.append("")
    return out


def nat_translate_lines(model: TransformerModel, lines: Sequence[str], src_vocab: Vocabulary,
                        tgt_vocab: Vocabulary, iterations: int, *, oracle: Sequence[str] | None = None,
                        lengths: Sequence[int] | None = None, chunk: int = 64) -> list[str]:
    """Mask-Predict each line with oracle, given or predicted lengths."""
    out: list[str] = []
    for idx in _chunks(len(lines), chunk):
        ids = [encode_line(src_vocab, lines[i]) for i in idx]
        if oracle is not None:
            k = np.array([max(1, len(oracle[i].split())) for i in idx])
        elif lengths is not None:
            k = np.array([lengths[i] for i in idx])
        else:
            k = nat_lengths(model, ids, "predicted")
        hyps = mask_predict(model, ids, iterations, k)
        out.extend(decode_line(tgt_vocab, h.tokens) for h in hyps)
    return out


def integrated_translate_lines(model: IntegratedModel, lines: Sequence[str], src_vocab: Vocabulary,
                               trg_vocab: Vocabulary, beam: int = 4, *, refs: Sequence[str] | None = None,
                               hardened: bool = False, iterations: int = 1, seed: int = 1,
                               chunk: int = 64, decode_cfg: DecodeConfig | None = None) -> list[str]:
    cfg = decode_cfg or DecodeConfig(beam=beam)
    rng = np.random.default_rng(seed)
    out: list[str] = []
    for idx in _chunks(len(lines), chunk):
        ids = [encode_line(src_vocab, lines[i]) for i in idx]
        trg = [encode_line(trg_vocab, refs[i]) for i in idx] if refs is not None else None
        hyps = decode_integrated(model, ids, beam, cfg=cfg, hardened=hardened, iterations=iterations,
                                 trg=trg, rng=rng)
        out.extend(decode_line(trg_vocab, h.tokens) for h in hyps)
    return out


# ---------------------------------------------------------------------------
# auxiliary corpora
# ---------------------------------------------------------------------------

PLACEHOLDER = "<unk>"


def _decode_all(model: TransformerModel, lines: Sequence[str], src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                beam: int) -> tuple[list[str], list[int]]:
    outputs: list[str] = []
    failed: list[int] = []
    for i, line in enumerate(lines):
        try:
            nb = beam_search(model, [encode_line(src_vocab, line)], beam, 1)[0]
            text = decode_line(tgt_vocab, nb.best.tokens)
        except (ValueError, FloatingPointError) as err:
            log.warning("decoding failed on line %d (%s); writing placeholder", i + 1, err)
            text = ""
        if not text:
            failed.append(i)
            text = PLACEHOLDER
        outputs.append(text)
    return outputs, failed


def generate_synthetic_pivots(s2p: TransformerModel, src_lines: Sequence[str], src_vocab: Vocabulary,
                              piv_vocab: Vocabulary, beam: int = 4) -> tuple[list[str], list[int]]:
    """One pivot hypothesis per source line, decoded once by an AR src->piv model.

    Returns the pivot lines and the indices of lines that got a placeholder.
    """
    if s2p.kind != "ar":
        raise ValueError("synthetic pivots need an autoregressive src->piv model")
    return _decode_all(s2p, src_lines, src_vocab, piv_vocab, beam)


def distill_corpus(teacher: TransformerModel, corpus: ParallelCorpus, src_side: str, tgt_side: str,
                   src_vocab: Vocabulary, tgt_vocab: Vocabulary, beam: int = 4) -> tuple[ParallelCorpus, list[int]]:
    """Sequence-level distillation: replace targets with the teacher's best beam output."""
    if teacher.kind != "ar":
        raise ValueError("the distillation teacher must be autoregressive")
    outputs, failed = _decode_all(teacher, corpus[src_side], src_vocab, tgt_vocab, beam)
    return ParallelCorpus({src_side: list(corpus[src_side]), tgt_side: outputs}), failed
