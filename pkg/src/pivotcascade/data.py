"""Vocabularies, parallel corpora and synthetic pivot-translation tasks."""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .nnet import BOS, EOS, MASK, PAD, UNK

log = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<s>", "</s>", "<unk>", "<mask>")
VOCAB_HEADER = "#vocab v1"


class DataError(ValueError):
    """Malformed or inconsistent corpus / vocabulary input."""


class Vocabulary:
    """Token <-> id bijection with fixed special ids PAD, BOS, EOS, UNK, MASK = 0..4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise DataError("vocabulary must start with the reserved specials " + " ".join(SPECIALS))
        if len(set(tokens)) != len(tokens):
            dup = next(t for t, c in Counter(tokens).items() if c > 1)
            raise DataError(f"duplicate vocabulary token {dup!r}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.hash = hashlib.sha256("\n".join(tokens).encode("utf-8")).hexdigest()[:16]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)}, hash={self.hash})"

    def encode(self, text: str) -> list[int]:
        return encode_line(self, text)

    def decode(self, ids: Iterable[int]) -> str:
        return decode_line(self, ids)

    def save(self, path) -> None:
        lines = [f"{VOCAB_HEADER} {self.hash}", *self.tokens]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(VOCAB_HEADER + " "):
            raise DataError(f"{path}:1: missing '{VOCAB_HEADER} <hash>' header")
        vocab = cls(lines[1:])
        stated = lines[0].split()[-1]
        if stated != vocab.hash:
            raise DataError(f"{path}: header hash {stated} does not match contents ({vocab.hash})")
        return vocab


def tokenize(text: str) -> list[str]:
    return text.split()


def build_vocab(sides: Sequence[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Joint vocabulary over whitespace tokens of every given corpus side.

    Tokens are ordered by descending count, ties broken alphabetically, so the
    result does not depend on the order of sides or lines.
    """
    if not sides or all(len(s) == 0 for s in sides):
        raise DataError("build_vocab needs at least one non-empty corpus side")
    counts: Counter[str] = Counter()
    for side in sides:
        for line in side:
            counts.update(tokenize(line))
    for special in SPECIALS:
        counts.pop(special, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary([*SPECIALS, *kept])


def encode_line(vocab: Vocabulary, text: str) -> list[int]:
    """``[BOS, ids..., EOS]``; out-of-vocabulary tokens map to UNK."""
    return [BOS, *(vocab.index.get(t, UNK) for t in tokenize(text)), EOS]


def decode_line(vocab: Vocabulary, ids: Iterable[int]) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i in (PAD, BOS, EOS, MASK):
            continue
        out.append(vocab.tokens[i] if 0 <= i < len(vocab) else SPECIALS[UNK])
    return " ".join(out)


def strip_specials(ids: Iterable[int]) -> list[int]:
    """Content ids between BOS and the first EOS."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        out.append(i)
    return out


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------

@dataclass
class ParallelCorpus:
    """Line-aligned sides, e.g. ``{"src": [...], "piv": [...], "trg": [...]}``."""

    sides: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        lengths = {k: len(v) for k, v in self.sides.items()}
        if len(set(lengths.values())) > 1:
            raise DataError(f"corpus sides have different line counts: {lengths}")
        self.sides = {k: list(v) for k, v in self.sides.items()}

    def __len__(self) -> int:
        return len(next(iter(self.sides.values()))) if self.sides else 0

    def __getitem__(self, side: str) -> list[str]:
        return self.sides[side]

    @property
    def labels(self) -> list[str]:
        return list(self.sides)

    def select(self, indices: Sequence[int]) -> "ParallelCorpus":
        return ParallelCorpus({k: [v[i] for i in indices] for k, v in self.sides.items()})

    def drop_empty(self) -> "ParallelCorpus":
        keep = [i for i in range(len(self)) if all(tokenize(v[i]) for v in self.sides.values())]
        dropped = len(self) - len(keep)
        if dropped:
            bad = sorted(set(range(len(self))) - set(keep))
            log.warning("dropped %d empty line(s), first at index %d", dropped, bad[0])
        return self.select(keep)

    def save(self, prefix, sides: Sequence[str] | None = None) -> list[Path]:
        paths = []
        for side in sides or self.labels:
            path = Path(f"{prefix}.{side}")
            path.write_text("".join(line + "\n" for line in self.sides[side]), encoding="utf-8")
            paths.append(path)
        return paths

    @classmethod
    def load(cls, prefix, sides: Sequence[str]) -> "ParallelCorpus":
        data = {}
        for side in sides:
            path = Path(f"{prefix}.{side}")
            if not path.exists():
                raise DataError(f"missing corpus file {path}")
            data[side] = read_lines(path)
        lengths = {f"{prefix}.{s}": len(v) for s, v in data.items()}
        if len(set(lengths.values())) > 1:
            raise DataError(f"parallel files have different line counts: {lengths}")
        return cls(data)


def read_lines(path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as err:
        raise DataError(f"{path}: not valid UTF-8 ({err})") from err
    return text.splitlines()


def partition_corpus(corpus: ParallelCorpus, fraction: float, seed: int) -> ParallelCorpus:
    """Random subset of ``round(fraction * N)`` lines, original order kept.

    Uses one permutation per seed and takes a prefix of it, so a smaller
    fraction always selects a subset of a larger one.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(corpus)
    k = int(round(fraction * n))
    if k == 0:
        raise DataError(f"fraction {fraction} of {n} lines selects nothing")
    if k == n:
        return corpus.select(range(n))
    order = np.random.default_rng(seed).permutation(n)
    return corpus.select(sorted(order[:k].tolist()))


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

GENERATORS = ("copy", "cipher", "cipher-reorder", "length-change")


@dataclass(frozen=True)
class TaskSpec:
    """Recipe for a synthetic src -> piv -> trg task.

    ``pivot_variants`` > 1 writes each pivot sentence in one of several
    registers chosen at random per sentence. Register ``r`` uses its own
    token set and, for odd ``r``, toggles the reversal of 3-token windows,
    so the src -> piv mapping is multi-modal while trg stays a function of
    src.
    """

    generator: str = "cipher-reorder"
    vocab_per_lang: int = 19
    min_len: int = 3
    max_len: int = 10
    n_s2p: int = 2000
    n_p2t: int = 2000
    n_direct: int = 1000
    n_dev: int = 100
    n_test: int = 200
    dup_rate: float = 0.25
    pivot_variants: int = 1

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; choose from {', '.join(GENERATORS)}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.pivot_variants < 1:
            raise ValueError("pivot_variants must be >= 1")
        if self.generator == "copy" and self.pivot_variants != 1:
            raise ValueError("the copy task has a single pivot register")


def _reverse_windows(tokens: list[str], w: int) -> list[str]:
    out: list[str] = []
    for i in range(0, len(tokens), w):
        out.extend(reversed(tokens[i:i + w]))
    return out


class SyntheticTask:
    """Deterministic pivot functions g: src -> piv and h: piv -> trg for one seed."""

    def __init__(self, spec: TaskSpec, seed: int):
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng([seed, 7919])
        n = spec.vocab_per_lang
        self.src_tokens = [f"a{i}" for i in range(n)]
        if spec.generator == "copy":
            self.piv_registers = [self.src_tokens]
            self.trg_tokens = self.src_tokens
            self.g_map = [dict(zip(self.src_tokens, self.src_tokens))]
            self.h_map = dict(zip(self.src_tokens, self.src_tokens))
        else:
            self.piv_registers = [[f"b{i}" if r == 0 else f"b{i}v{r}" for i in range(n)]
                                  for r in range(spec.pivot_variants)]
            self.trg_tokens = [f"c{i}" for i in range(n)]
            perm = rng.permutation(n)
            self.g_map = [{s: reg[perm[i]] for i, s in enumerate(self.src_tokens)} for reg in self.piv_registers]
            hperm = rng.permutation(n)
            self.h_map = {}
            for reg in self.piv_registers:
                self.h_map.update({p: self.trg_tokens[hperm[i]] for i, p in enumerate(reg)})
        k = max(1, int(round(spec.dup_rate * n)))
        self.duplicated = set(rng.choice(self.src_tokens, size=k, replace=False).tolist())

    def g(self, src: str, register: int = 0) -> str:
        toks = tokenize(src)
        gen = self.spec.generator
        if gen == "copy":
            return " ".join(toks)
        mapping = self.g_map[register]
        piv = [mapping[t] for t in toks]
        if gen == "cipher-reorder":
            piv = _reverse_windows(piv, 3)
        elif gen == "length-change":
            piv = [p for t, p in zip(toks, piv) for _ in range(2 if t in self.duplicated else 1)]
        if register % 2:
            piv = _reverse_windows(piv, 3)
        return " ".join(piv)

    def register_of(self, piv: str) -> int:
        toks = tokenize(piv)
        if not toks:
            return 0
        for r, reg in enumerate(self.piv_registers):
            if toks[0] in reg:
                return r
        raise KeyError(f"unknown pivot token {toks[0]!r}")

    def h(self, piv: str) -> str:
        toks = tokenize(piv)
        if self.spec.generator == "copy":
            return " ".join(toks)
        if self.register_of(piv) % 2:
            toks = _reverse_windows(toks, 3)
        trg = [self.h_map[t] for t in toks]
        if self.spec.generator == "cipher-reorder":
            trg = _reverse_windows(trg, 2)
        return " ".join(trg)

    def g_inverse(self, piv: str) -> str:
        """Recover the source sentence from a pivot sentence."""
        toks = tokenize(piv)
        gen = self.spec.generator
        if gen == "copy":
            return " ".join(toks)
        inv = {p: s for m in self.g_map for s, p in m.items()}
        if self.register_of(piv) % 2:
            toks = _reverse_windows(toks, 3)
        if gen == "cipher-reorder":
            toks = _reverse_windows(toks, 3)
        src = [inv[t] for t in toks]
        if gen == "length-change":
            out, i = [], 0
            while i < len(src):
                out.append(src[i])
                i += 2 if src[i] in self.duplicated else 1
            src = out
        return " ".join(src)


def make_synthetic_task(spec: TaskSpec, seed: int) -> dict[str, ParallelCorpus]:
    """Generate disjoint corpora for every stage of the pivot pipeline.

    Returns ``s2p`` (src, piv), ``p2t`` (piv, trg), ``direct`` (src, trg)
    training corpora plus three-way ``dev`` and ``test`` sets.
    """
    task = SyntheticTask(spec, seed)
    rng = np.random.default_rng([seed, 104729])
    sizes = {"s2p": spec.n_s2p, "p2t": spec.n_p2t, "direct": spec.n_direct, "dev": spec.n_dev, "test": spec.n_test}
    total = sum(sizes.values())
    capacity = sum(spec.vocab_per_lang ** n for n in range(spec.min_len, spec.max_len + 1))
    if total > capacity:
        raise DataError(f"cannot draw {total} distinct sentences from {capacity} possible ones")
    seen: set[str] = set()
    sentences: list[str] = []
    while len(sentences) < total:
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        s = " ".join(task.src_tokens[i] for i in rng.integers(0, spec.vocab_per_lang, n))
        if s not in seen:
            seen.add(s)
            sentences.append(s)
    registers = rng.integers(0, spec.pivot_variants, total)
    piv = [task.g(s, int(r)) for s, r in zip(sentences, registers)]
    trg = [task.h(p) for p in piv]
    out: dict[str, ParallelCorpus] = {}
    start = 0
    for name, n in sizes.items():
        sl = slice(start, start + n)
        start += n
        if name == "s2p":
            out[name] = ParallelCorpus({"src": sentences[sl], "piv": piv[sl]})
        elif name == "p2t":
            out[name] = ParallelCorpus({"piv": piv[sl], "trg": trg[sl]})
        elif name == "direct":
            out[name] = ParallelCorpus({"src": sentences[sl], "trg": trg[sl]})
        else:
            out[name] = ParallelCorpus({"src": sentences[sl], "piv": piv[sl], "trg": trg[sl]})
    return out


def corpus_sides(corpora: Mapping[str, ParallelCorpus]) -> list[list[str]]:
    return [side for c in corpora.values() for side in c.sides.values()]


__all__ = [
    "DataError",
    "Vocabulary",
    "ParallelCorpus",
    "TaskSpec",
    "SyntheticTask",
    "build_vocab",
    "encode_line",
    "decode_line",
    "strip_specials",
    "make_synthetic_task",
    "partition_corpus",
    "read_lines",
]
