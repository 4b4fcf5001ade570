"""Scoring, error-propagation analysis and study sweeps."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .bleu import BleuReport, corpus_bleu, sentence_bleu
from .cascade import InitScheme, InterfaceKind, LengthPolicy, concatenate
from .config import stable_hash
from .data import DataError, ParallelCorpus, Vocabulary, decode_line, encode_line, partition_corpus
from .decoding import DecodeConfig, Hypothesis, NBestList, beam_search
from .nnet import TransformerModel
from .training import TrainConfig, finetune_integrated, translate_lines

log = logging.getLogger(__name__)

__all__ = [
    "BleuReport", "corpus_bleu", "sentence_bleu", "char_noise", "oracle_select", "SweepRow", "SweepResult",
    "error_propagation_sweep", "StudySetup", "study_sweep", "NOISE_GRID", "SWEEP_CONDITIONS",
]

NOISE_GRID = (0.0, 0.05, 0.1, 0.2)
SWEEP_CONDITIONS = {
    "data_size": (1.0, 0.5, 0.3, 0.1),
    "init_scheme": ("none", "s2p", "p2t", "both"),
    "length_policy": ("random", "source", "target_oracle", "predicted"),
}
CSV_HEADER = ("condition", "pivot_bleu", "e2e_bleu", "config_hash")


def char_noise(sentence: str, p_noise: float, seed) -> str:
    """Replace each character, with probability ``p_noise``, by a uniform draw from the sentence's own characters."""
    if not 0.0 <= p_noise <= 1.0:
        raise ValueError(f"p_noise must be in [0, 1], got {p_noise}")
    if not sentence or p_noise == 0.0:
        return sentence
    rng = np.random.default_rng(seed)
    charset = sorted(set(sentence))
    hit = rng.random(len(sentence)) < p_noise
    draws = rng.integers(0, len(charset), len(sentence))
    return "".join(charset[d] if h else c for c, h, d in zip(sentence, hit, draws))


def _as_text(h, detok: Callable[[Hypothesis], str] | None) -> str:
    if isinstance(h, str):
        return h
    if detok is not None:
        return detok(h)
    return " ".join(str(t) for t in h.content)


def oracle_select(nbest: NBestList | Sequence, pivot_ref, detok: Callable[[Hypothesis], str] | None = None):
    """The n-best entry with the highest sentence BLEU against the reference; ties keep the earlier rank."""
    items = list(nbest)
    if not items:
        raise ValueError("oracle_select needs a nonempty n-best list")
    ref = pivot_ref if isinstance(pivot_ref, str) else " ".join(str(t) for t in pivot_ref)
    best, best_score = items[0], sentence_bleu(_as_text(items[0], detok), ref)
    for h in items[1:]:
        s = sentence_bleu(_as_text(h, detok), ref)
        if s > best_score:
            best, best_score = h, s
    return best


@dataclass(frozen=True)
class SweepRow:
    condition: str
    pivot_bleu: float | None
    e2e_bleu: float
    config_hash: str


@dataclass
class SweepResult:
    kind: str
    rows: list[SweepRow] = field(default_factory=list)

    def add(self, condition: str, pivot_bleu: float | None, e2e_bleu: float, config: Mapping) -> SweepRow:
        row = SweepRow(condition, pivot_bleu, e2e_bleu, stable_hash(dict(config)))
        self.rows.append(row)
        return row

    def __getitem__(self, condition: str) -> SweepRow:
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    @property
    def conditions(self) -> list[str]:
        return [r.condition for r in self.rows]

    def e2e(self, conditions: Sequence[str] | None = None) -> list[float]:
        return [self[c].e2e_bleu for c in (conditions or self.conditions)]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r.condition, "" if r.pivot_bleu is None else f"{r.pivot_bleu:.4f}",
                            f"{r.e2e_bleu:.4f}", r.config_hash])
        return path

    @classmethod
    def from_csv(cls, path, kind: str = "") -> "SweepResult":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rd = csv.reader(fh)
            header = tuple(next(rd))
            if header != CSV_HEADER:
                raise DataError(f"{path}: bad sweep header {header}")
            rows = [SweepRow(c, float(p) if p else None, float(e), h) for c, p, e, h in rd]
        return cls(kind, rows)


# ---------------------------------------------------------------------------
# error propagation
# ---------------------------------------------------------------------------

def _pivot_texts(nbests: Sequence[NBestList], vocab: Vocabulary) -> list[str]:
    return [decode_line(vocab, nb.best.tokens) for nb in nbests]


def error_propagation_sweep(s2p_variants: Mapping[str, TransformerModel], p2t: TransformerModel,
                            test: ParallelCorpus, *, src_vocab: Vocabulary, piv_vocab: Vocabulary,
                            trg_vocab: Vocabulary, beam: int = 4, noise_grid: Sequence[float] = NOISE_GRID,
                            n_best: int = 10, seed: int = 1, baseline: str = "baseline",
                            decode_cfg: DecodeConfig | None = None) -> SweepResult:
    """Degrade the first stage in controlled ways and measure pivot and end-to-end BLEU.

    ``s2p_variants`` maps a label to an AR src->piv model; ``baseline`` names
    the fully trained one. Rows: noise levels on the baseline's pivot output,
    every other variant (e.g. earlier checkpoints), greedy decoding of the
    baseline, and the n-best oracle selection against the pivot reference.
    """
    for side in ("src", "piv", "trg"):
        if side not in test.sides:
            raise DataError(f"error propagation needs a three-way test set; missing {side!r} side")
    if baseline not in s2p_variants:
        raise ValueError(f"no s2p variant named {baseline!r}")
    cfg = decode_cfg or DecodeConfig(beam=beam)
    src, piv_ref, trg_ref = test["src"], test["piv"], test["trg"]
    src_ids = [encode_line(src_vocab, s) for s in src]
    result = SweepResult("error-prop")
    base_conf = {"beam": beam, "seed": seed, "n_best": n_best, "n": len(src)}

    def score(pivots: list[str]) -> tuple[float, float]:
        out = translate_lines(p2t, pivots, piv_vocab, trg_vocab, beam=beam, decode_cfg=cfg)
        return corpus_bleu(pivots, piv_ref).score, corpus_bleu(out, trg_ref).score

    base = s2p_variants[baseline]
    nbests = beam_search(base, src_ids, max(beam, n_best), n_best, normalize=cfg.normalize, cfg=cfg)
    base_piv = _pivot_texts(nbests, piv_vocab)
    for p in noise_grid:
        pivots = base_piv if p == 0 else [char_noise(s, p, [seed, i]) for i, s in enumerate(base_piv)]
        label = baseline if p == 0 else f"noise={p:g}"
        result.add(label, *score(pivots), {**base_conf, "condition": label, "p_noise": p})
    for label, model in s2p_variants.items():
        if label == baseline:
            continue
        pivots = translate_lines(model, src, src_vocab, piv_vocab, beam=beam, decode_cfg=cfg)
        result.add(label, *score(pivots), {**base_conf, "condition": label})
    greedy = translate_lines(base, src, src_vocab, piv_vocab, beam=1, decode_cfg=replace(cfg, beam=1))
    result.add("greedy", *score(greedy), {**base_conf, "condition": "greedy"})
    detok = lambda h: decode_line(piv_vocab, h.tokens)  # noqa: E731
    oracle = [decode_line(piv_vocab, oracle_select(nb, ref, detok).tokens) for nb, ref in zip(nbests, piv_ref)]
    result.add(f"oracle-{n_best}best", *score(oracle), {**base_conf, "condition": "oracle"})
    return result


# ---------------------------------------------------------------------------
# study sweeps
# ---------------------------------------------------------------------------

@dataclass
class StudySetup:
    """Everything a fine-tuning sweep condition needs besides the varied factor."""

    s2p: TransformerModel
    p2t: TransformerModel
    train: ParallelCorpus
    dev: ParallelCorpus
    src_vocab: Vocabulary
    trg_vocab: Vocabulary
    train_cfg: TrainConfig
    interface: InterfaceKind = field(default_factory=lambda: InterfaceKind("decoder_posteriors"))
    init: InitScheme = field(default_factory=lambda: InitScheme.parse("both"))
    length_policy: LengthPolicy = field(default_factory=LengthPolicy)
    seed: int = 1

    def describe(self) -> dict:
        return {"train": self.train_cfg.to_dict(), "interface": self.interface.label, "init": self.init.label,
                "length": self.length_policy.kind, "seed": self.seed, "n_train": len(self.train),
                "n_dev": len(self.dev), "s2p": self.s2p.meta(), "p2t": self.p2t.meta()}


def _finetune_condition(setup: StudySetup, train: ParallelCorpus, init: InitScheme,
                        length: LengthPolicy) -> float:
    model = concatenate(setup.s2p, setup.p2t, init, setup.interface, length_policy=length, seed=setup.seed)
    res = finetune_integrated(model, train, setup.train_cfg, src_vocab=setup.src_vocab, trg_vocab=setup.trg_vocab,
                              dev=setup.dev)
    return float(res.state.best_score)


def study_sweep(kind: str, setup: StudySetup, conditions: Sequence | None = None) -> SweepResult:
    """Fine-tune once per condition and report the selected dev BLEU."""
    if kind not in SWEEP_CONDITIONS:
        raise ValueError(f"unknown sweep kind {kind!r}; choose from {', '.join(SWEEP_CONDITIONS)}")
    conditions = tuple(conditions or SWEEP_CONDITIONS[kind])
    result = SweepResult(kind)
    base = setup.describe()
    for cond in conditions:
        train, init, length = setup.train, setup.init, setup.length_policy
        if kind == "data_size":
            train = partition_corpus(setup.train, float(cond), setup.seed)
            label = f"{float(cond):g}"
        elif kind == "init_scheme":
            init = InitScheme.parse(cond)
            label = init.label
        else:
            length = LengthPolicy.parse(cond, setup.length_policy.lo, setup.length_policy.hi)
            label = length.kind
        log.info("sweep %s: condition %s", kind, label)
        bleu = _finetune_condition(setup, train, init, length)
        result.add(label, None, bleu, {**base, "kind": kind, "condition": label, "n_train": len(train)})
    return result
