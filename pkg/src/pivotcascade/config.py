"""Flat dotted-key experiment configuration with typed defaults and a content hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .data import TaskSpec
from .decoding import DecodeConfig
from .nnet import TransformerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str):
        return None if text.strip().lower() in ("", "none", "null") else parse(text)
    return inner


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip().strip("()[]")
    return tuple(float(t) for t in text.replace(",", " ").split()) if text else ()


def _strs(text: str) -> tuple[str, ...]:
    return tuple(t for t in (s.strip() for s in text.split(",")) if t)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "model.d_model": (int, 64),
    "model.n_heads": (int, 4),
    "model.d_ff": (int, 128),
    "model.n_enc_layers": (int, 2),
    "model.n_dec_layers": (int, 2),
    "model.dropout": (float, 0.1),
    "model.max_positions": (int, 128),
    "model.seed": (int, 1),
    "model.precision": (str, "float32"),
    "train.lr": (float, TrainConfig.lr),
    "train.warmup": (int, TrainConfig.warmup),
    "train.betas": (_floats, TrainConfig.betas),
    "train.adam_eps": (float, TrainConfig.adam_eps),
    "train.dropout": (_optional(float), None),
    "train.max_tokens": (int, TrainConfig.max_tokens),
    "train.update_freq": (int, TrainConfig.update_freq),
    "train.max_updates": (int, TrainConfig.max_updates),
    "train.max_epochs": (_optional(int), None),
    "train.label_smoothing": (_optional(float), None),
    "train.length_loss_factor": (float, TrainConfig.length_loss_factor),
    "train.seed": (int, TrainConfig.seed),
    "train.eval_interval": (int, TrainConfig.eval_interval),
    "train.log_interval": (int, TrainConfig.log_interval),
    "train.dev_beam": (int, TrainConfig.dev_beam),
    "train.dev_iterations": (int, TrainConfig.dev_iterations),
    "train.snapshot_fractions": (_floats, ()),
    "train.max_consecutive_skips": (int, TrainConfig.max_consecutive_skips),
    "data.task": (str, "cipher-reorder"),
    "data.seed": (int, 1),
    "data.vocab_per_lang": (int, TaskSpec.vocab_per_lang),
    "data.min_len": (int, TaskSpec.min_len),
    "data.max_len": (int, TaskSpec.max_len),
    "data.n_s2p": (int, TaskSpec.n_s2p),
    "data.n_p2t": (int, TaskSpec.n_p2t),
    "data.n_direct": (int, TaskSpec.n_direct),
    "data.n_dev": (int, TaskSpec.n_dev),
    "data.n_test": (int, TaskSpec.n_test),
    "data.dup_rate": (float, TaskSpec.dup_rate),
    "data.pivot_variants": (int, TaskSpec.pivot_variants),
    "data.fraction": (float, 1.0),
    "data.min_count": (int, 1),
    "decode.beam": (int, DecodeConfig.beam),
    "decode.n_best": (int, DecodeConfig.n_best),
    "decode.max_len_a": (float, DecodeConfig.max_len_a),
    "decode.max_len_b": (int, DecodeConfig.max_len_b),
    "decode.normalize": (_parse_bool, DecodeConfig.normalize),
    "decode.iterations": (int, DecodeConfig.iterations),
    "decode.hardened": (_parse_bool, False),
    "decode.seed": (int, 1),
    "interface.kind": (str, "posteriors"),
    "interface.init": (str, "both"),
    "interface.freeze": (_strs, ()),
    "length.policy": (str, "source"),
    "length.lo": (int, 2),
    "length.hi": (int, 100),
}


def stable_hash(obj) -> str:
    """Short sha256 of a canonical JSON rendering."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]], base: "ExperimentConfig | None" = None,
                   source: str = "--set") -> "ExperimentConfig":
        cfg = ExperimentConfig(dict(base.values)) if base else cls()
        for key, raw in pairs:
            cfg.set(key, raw, source)
        return cfg

    def set(self, key: str, raw: str, source: str = "--set") -> None:
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        parse, _ = SCHEMA[key]
        try:
            self.values[key] = parse(raw.strip())
        except ValueError as err:
            raise ConfigError(f"{source}: bad value for {key!r}: {raw!r} ({err})") from err

    def updated(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """Copy with already-typed values replaced."""
        unknown = [k for k in overrides if k not in SCHEMA]
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        return ExperimentConfig({**self.values, **overrides})

    @classmethod
    def load(cls, path, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read config file {path}: {err}") from err
        pairs = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value, got {line!r}")
            key, raw = line.split("=", 1)
            pairs.append((key.strip(), raw, f"{path}:{n}"))
        cfg = ExperimentConfig(dict(base.values)) if base else cls()
        for key, raw, where in pairs:
            cfg.set(key, raw, where)
        return cfg

    def lines(self) -> list[str]:
        return [f"{k} = {_fmt(self.values[k])}" for k in sorted(self.values)]

    @property
    def hash(self) -> str:
        return stable_hash(self.lines())

    def dumps(self, extra: Mapping[str, Any] | None = None) -> str:
        head = [f"# hash: {self.hash}"]
        if extra:
            head += [f"# {k}: {v}" for k, v in sorted(extra.items())]
        return "\n".join(head + self.lines()) + "\n"

    def section(self, name: str) -> dict[str, Any]:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    # typed views -----------------------------------------------------------

    def task_spec(self) -> TaskSpec:
        d = self.section("data")
        return TaskSpec(generator=d["task"], vocab_per_lang=d["vocab_per_lang"], min_len=d["min_len"],
                        max_len=d["max_len"], n_s2p=d["n_s2p"], n_p2t=d["n_p2t"], n_direct=d["n_direct"],
                        n_dev=d["n_dev"], n_test=d["n_test"], dup_rate=d["dup_rate"],
                        pivot_variants=d["pivot_variants"])

    def model_config(self, vocab_src: int, vocab_tgt: int) -> TransformerConfig:
        m = self.section("model")
        return TransformerConfig(vocab_src, vocab_tgt, d_model=m["d_model"], n_heads=m["n_heads"], d_ff=m["d_ff"],
                                 n_enc_layers=m["n_enc_layers"], n_dec_layers=m["n_dec_layers"],
                                 dropout_rate=m["dropout"], max_positions=m["max_positions"], seed=m["seed"])

    def train_config(self, **overrides) -> TrainConfig:
        t = self.section("train")
        t["snapshot_fractions"] = tuple(t["snapshot_fractions"])
        t["betas"] = tuple(t["betas"])
        if len(t["betas"]) != 2:
            raise ConfigError(f"train.betas needs two values, got {t['betas']}")
        t["precision"] = self["model.precision"]
        t.update(overrides)
        try:
            return TrainConfig(**t)
        except ValueError as err:
            raise ConfigError(f"train.*: {err}") from err

    def decode_config(self) -> DecodeConfig:
        d = self.section("decode")
        return DecodeConfig(beam=d["beam"], n_best=d["n_best"], max_len_a=d["max_len_a"], max_len_b=d["max_len_b"],
                            normalize=d["normalize"], iterations=d["iterations"],
                            pivot_length=self["length.policy"])
