"""``pivotcascade`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .bleu import corpus_bleu
from .cascade import (
    IntegratedModel,
    InitScheme,
    InterfaceKind,
    LengthPolicy,
    VocabMismatchError,
    concatenate,
    load_model,
    save_model,
)
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, stable_hash
from .data import (
    DataError,
    ParallelCorpus,
    Vocabulary,
    build_vocab,
    decode_line,
    encode_line,
    make_synthetic_task,
    read_lines,
)
from .decoding import two_pass_decode
from .evaluation import StudySetup, char_noise, error_propagation_sweep, study_sweep
from .nnet import TransformerModel
from .training import (
    MetricsLogger,
    TrainingError,
    distill_corpus,
    finetune_integrated,
    generate_synthetic_pivots,
    integrated_translate_lines,
    nat_translate_lines,
    pretrain_ar,
    pretrain_nat,
    translate_lines,
)

log = logging.getLogger("pivotcascade")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RESOLVED = "config.resolved"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------

class Run:
    """Resolved config, output location and the rerun guard for one invocation."""

    def __init__(self, args: argparse.Namespace, cfg: ExperimentConfig, resolved_path: Path,
                 inputs: Sequence[str | None], outputs: Sequence[str | None]):
        self.args = args
        self.cfg = cfg
        self.resolved_path = resolved_path
        ins = {str(Path(p).resolve()) for p in inputs if p}
        for out in outputs:
            if out and str(Path(out).resolve()) in ins:
                raise UsageError(f"output {out} would overwrite an input")
        keys = {k: v for k, v in sorted(vars(args).items()) if k not in ("force", "func", "set", "verbose")}
        self.extra = {"command": args.command}
        self.hash = stable_hash({"config": cfg.lines(), "args": keys})

    def claim(self) -> None:
        p = self.resolved_path
        if p.exists() and not self.args.force:
            first = p.read_text(encoding="utf-8").splitlines()[:1]
            if first and first[0] == f"# run: {self.hash}":
                raise UsageError(f"{p} already records run {self.hash}; pass --force to rerun")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(f"# run: {self.hash}\n" + self.cfg.dumps(self.extra), encoding="utf-8")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    pairs = []
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k, v))
    return ExperimentConfig.from_pairs(pairs, cfg)


def _run_dir_run(args, cfg, inputs) -> Run:
    run_dir = Path(args.run_dir)
    return Run(args, cfg, run_dir / RESOLVED, inputs, [])


def _file_run(args, cfg, inputs, output) -> Run:
    out = Path(output)
    return Run(args, cfg, out.with_name(out.name + "." + RESOLVED), inputs, [output])


def _vocab(path) -> Vocabulary:
    if not path:
        raise UsageError("a vocabulary file is required")
    return Vocabulary.load(path)


def _corpus(prefix, sides) -> ParallelCorpus:
    return ParallelCorpus.load(prefix, sides)


def _corpus_files(prefix, sides) -> list[str]:
    return [f"{prefix}.{s}" for s in sides] if prefix else []


def _write_lines(path, lines) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    if args.task:
        cfg = cfg.updated({"data.task": args.task})
    if args.seed is not None:
        cfg = cfg.updated({"data.seed": args.seed})
    run = Run(args, cfg, Path(args.out) / RESOLVED, [], [])
    run.claim()
    corpora = make_synthetic_task(cfg.task_spec(), cfg["data.seed"])
    for name, corpus in corpora.items():
        corpus.save(Path(args.out) / name)
    print(f"wrote {', '.join(f'{k}:{len(v)}' for k, v in corpora.items())} lines to {args.out}")


def cmd_build_vocab(args, cfg):
    run = _file_run(args, cfg, args.inputs, args.out)
    run.claim()
    vocab = build_vocab([read_lines(p) for p in args.inputs], min_count=args.min_count or cfg["data.min_count"])
    vocab.save(args.out)
    print(f"{len(vocab)} types, hash {vocab.hash}")


def _train_common(args, cfg, kind):
    sides = args.sides.split(",")
    if len(sides) != 2:
        raise UsageError("--sides needs two comma-separated side names, e.g. piv,trg")
    inputs = _corpus_files(args.train, sides) + _corpus_files(args.dev, sides) + [args.src_vocab, args.tgt_vocab]
    run = _run_dir_run(args, cfg, inputs)
    run.claim()
    src_vocab, tgt_vocab = _vocab(args.src_vocab), _vocab(args.tgt_vocab)
    corpus = _corpus(args.train, sides).drop_empty()
    dev = _corpus(args.dev, sides) if args.dev else None
    model_cfg = cfg.model_config(len(src_vocab), len(tgt_vocab))
    run_dir = Path(args.run_dir)
    metrics = MetricsLogger.in_dir(run_dir)
    fn = pretrain_ar if kind == "ar" else pretrain_nat
    res = fn(model_cfg, corpus, cfg.train_config(), src_vocab=src_vocab, tgt_vocab=tgt_vocab, src_side=sides[0],
             tgt_side=sides[1], dev=dev, metrics=metrics, checkpoint_dir=run_dir / "checkpoints")
    final = save_model(res.model, run_dir / "checkpoints" / "model.csc")
    print(f"trained {res.state.update} updates; checkpoint {final}"
          + (f"; best dev BLEU {res.state.best_score:.2f}" if res.state.best_score is not None else ""))


def cmd_pretrain_ar(args, cfg):
    _train_common(args, cfg, "ar")


def cmd_pretrain_nat(args, cfg):
    _train_common(args, cfg, "nat")


def cmd_concat(args, cfg):
    if args.init is not None:
        cfg = cfg.updated({"interface.init": args.init})
    if args.interface is not None:
        cfg = cfg.updated({"interface.kind": args.interface})
    run = _file_run(args, cfg, [args.s2p, args.p2t], args.out)
    run.claim()
    s2p = load_model(args.s2p) if args.s2p else None
    p2t = load_model(args.p2t) if args.p2t else None
    for name, m in (("--s2p", s2p), ("--p2t", p2t)):
        if m is not None and not isinstance(m, TransformerModel):
            raise UsageError(f"{name} must be a standalone model checkpoint")
    try:
        scheme = InitScheme.parse(cfg["interface.init"])
        iface = InterfaceKind.parse(cfg["interface.kind"])
        policy = LengthPolicy.parse(cfg["length.policy"], cfg["length.lo"], cfg["length.hi"])
    except ValueError as err:
        raise ConfigError(str(err)) from err
    model = concatenate(s2p, p2t, scheme, iface, length_policy=policy, seed=cfg["model.seed"],
                        frozen=cfg["interface.freeze"])
    save_model(model, args.out)
    print(f"assembled {iface.label} model (init {scheme.label}) -> {args.out}")


def cmd_finetune(args, cfg):
    sides = [args.src_side, args.trg_side] + ([args.pivot_side] if args.pivot_side else [])
    inputs = [args.model] + _corpus_files(args.train, sides) + _corpus_files(args.dev, sides[:2])
    run = _run_dir_run(args, cfg, inputs)
    run.claim()
    model = load_model(args.model)
    if not isinstance(model, IntegratedModel):
        raise UsageError(f"{args.model} is not an integrated model; run concat first")
    if args.length_policy:
        model.length_policy = LengthPolicy.parse(args.length_policy, cfg["length.lo"], cfg["length.hi"])
    src_vocab, trg_vocab = _vocab(args.src_vocab), _vocab(args.trg_vocab)
    piv_vocab = _vocab(args.piv_vocab) if args.piv_vocab else None
    corpus = _corpus(args.train, sides)
    dev = _corpus(args.dev, sides[:2]) if args.dev else None
    run_dir = Path(args.run_dir)
    train_cfg = cfg.train_config()
    res = finetune_integrated(model, corpus, train_cfg, src_vocab=src_vocab, trg_vocab=trg_vocab,
                              piv_vocab=piv_vocab, src_side=args.src_side, trg_side=args.trg_side,
                              piv_side=args.pivot_side, dev=dev, metrics=MetricsLogger.in_dir(run_dir),
                              checkpoint_dir=run_dir / "checkpoints")
    final = save_model(res.model, run_dir / "checkpoints" / "model.csc")
    print(f"fine-tuned {res.state.update} updates; checkpoint {final}"
          + (f"; best dev BLEU {res.state.best_score:.2f}" if res.state.best_score is not None else ""))


def cmd_translate(args, cfg):
    if args.beam is not None:
        cfg = cfg.updated({"decode.beam": args.beam})
    if args.iterations is not None:
        cfg = cfg.updated({"decode.iterations": args.iterations})
    run = _file_run(args, cfg, [args.model, args.p2t, args.input, args.refs], args.output)
    run.claim()
    dcfg = cfg.decode_config()
    lines = read_lines(args.input)
    refs = read_lines(args.refs) if args.refs else None
    if refs is not None and len(refs) != len(lines):
        raise DataError(f"{args.refs} has {len(refs)} lines but {args.input} has {len(lines)}")
    model = load_model(args.model)
    src_vocab, tgt_vocab = _vocab(args.src_vocab), _vocab(args.tgt_vocab)
    if args.mode == "integrated":
        if not isinstance(model, IntegratedModel):
            raise UsageError(f"{args.model} is not an integrated model")
        out = integrated_translate_lines(model, lines, src_vocab, tgt_vocab, dcfg.beam, refs=refs,
                                         hardened=cfg["decode.hardened"], iterations=args.iterations or 1,
                                         seed=cfg["decode.seed"], decode_cfg=dcfg)
    elif args.mode == "single":
        if not isinstance(model, TransformerModel):
            raise UsageError("--mode single needs a standalone model checkpoint")
        out = _single(model, lines, src_vocab, tgt_vocab, dcfg, cfg, refs)
    else:
        if not args.p2t:
            raise UsageError("--mode two-pass needs --p2t")
        p2t = load_model(args.p2t)
        piv_vocab = _vocab(args.piv_vocab)
        p2t_vocab = _vocab(args.p2t_vocab) if args.p2t_vocab else piv_vocab
        src_ids = [encode_line(src_vocab, s) for s in lines]
        trg_ids = [encode_line(piv_vocab, s) for s in refs] if refs else None
        pairs = two_pass_decode(model, p2t, src_ids, dcfg, s2p_vocab=piv_vocab, p2t_vocab=p2t_vocab,
                                trg=trg_ids, rng=np.random.default_rng(cfg["decode.seed"]))
        out = [decode_line(tgt_vocab, t.tokens) for _, t in pairs]
        if args.pivot_output:
            _write_lines(args.pivot_output, [decode_line(piv_vocab, p.tokens) for p, _ in pairs])
    _write_lines(args.output, out)
    print(f"translated {len(out)} lines -> {args.output}")


def _single(model, lines, src_vocab, tgt_vocab, dcfg, cfg, refs):
    if model.kind == "ar":
        return translate_lines(model, lines, src_vocab, tgt_vocab, dcfg.beam, decode_cfg=dcfg)
    policy = cfg["length.policy"]
    if policy in ("target_oracle", "target"):
        if refs is None:
            raise UsageError("length.policy=target_oracle needs --refs")
        return nat_translate_lines(model, lines, src_vocab, tgt_vocab, dcfg.iterations, oracle=refs)
    if policy == "source":
        return nat_translate_lines(model, lines, src_vocab, tgt_vocab, dcfg.iterations,
                                   lengths=[max(1, len(s.split())) for s in lines])
    if policy == "random":
        rng = np.random.default_rng(cfg["decode.seed"])
        k = rng.integers(cfg["length.lo"], cfg["length.hi"], size=len(lines))
        return nat_translate_lines(model, lines, src_vocab, tgt_vocab, dcfg.iterations, lengths=k.tolist())
    return nat_translate_lines(model, lines, src_vocab, tgt_vocab, dcfg.iterations)


def cmd_synthetic_pivots(args, cfg):
    if args.beam is not None:
        cfg = cfg.updated({"decode.beam": args.beam})
    run = _file_run(args, cfg, [args.model, args.input], args.output)
    run.claim()
    model = load_model(args.model)
    out, failed = generate_synthetic_pivots(model, read_lines(args.input), _vocab(args.src_vocab),
                                            _vocab(args.piv_vocab), cfg["decode.beam"])
    _write_lines(args.output, out)
    print(f"wrote {len(out)} pivot lines -> {args.output}" + (f" ({len(failed)} placeholders)" if failed else ""))


def cmd_distill(args, cfg):
    if args.beam is not None:
        cfg = cfg.updated({"decode.beam": args.beam})
    run = _file_run(args, cfg, [args.model, args.input], args.output)
    run.claim()
    model = load_model(args.model)
    corpus = ParallelCorpus({"src": read_lines(args.input), "trg": [""] * len(read_lines(args.input))})
    distilled, failed = distill_corpus(model, corpus, "src", "trg", _vocab(args.src_vocab), _vocab(args.tgt_vocab),
                                       cfg["decode.beam"])
    _write_lines(args.output, distilled["trg"])
    print(f"wrote {len(distilled)} distilled lines -> {args.output}"
          + (f" ({len(failed)} placeholders)" if failed else ""))


def cmd_score(args, cfg):
    hyps, refs = read_lines(args.hyp), read_lines(args.ref)
    if len(hyps) != len(refs):
        raise DataError(f"{args.hyp} has {len(hyps)} lines but {args.ref} has {len(refs)}")
    print(corpus_bleu(hyps, refs))


def cmd_noise(args, cfg):
    run = _file_run(args, cfg, [args.input], args.output)
    run.claim()
    if not 0.0 <= args.p <= 1.0:
        raise UsageError(f"--p must be in [0, 1], got {args.p}")
    lines = read_lines(args.input)
    _write_lines(args.output, [char_noise(s, args.p, [args.seed, i]) for i, s in enumerate(lines)])
    print(f"noised {len(lines)} lines (p={args.p}) -> {args.output}")


SWEEP_KINDS = {"error-prop": "error-prop", "data-size": "data_size", "init": "init_scheme", "length": "length_policy"}


def cmd_sweep(args, cfg):
    inputs = [args.s2p, args.p2t] + [v.split("=", 1)[-1] for v in args.variant or ()]
    run = _run_dir_run(args, cfg, inputs)
    run.claim()
    kind = SWEEP_KINDS[args.kind]
    s2p, p2t = load_model(args.s2p), load_model(args.p2t)
    src_vocab, trg_vocab = _vocab(args.src_vocab), _vocab(args.tgt_vocab)
    if kind == "error-prop":
        if not args.test:
            raise UsageError("--kind error-prop needs --test PREFIX with src, piv and trg sides")
        variants = {"baseline": s2p}
        for item in args.variant or ():
            label, _, path = item.partition("=")
            if not path:
                raise UsageError(f"--variant expects label=checkpoint, got {item!r}")
            variants[label] = load_model(path)
        res = error_propagation_sweep(variants, p2t, _corpus(args.test, ("src", "piv", "trg")),
                                      src_vocab=src_vocab, piv_vocab=_vocab(args.piv_vocab), trg_vocab=trg_vocab,
                                      beam=cfg["decode.beam"], seed=cfg["decode.seed"])
    else:
        if not (args.train and args.dev):
            raise UsageError(f"--kind {args.kind} needs --train and --dev corpus prefixes")
        setup = StudySetup(s2p, p2t, _corpus(args.train, ("src", "trg")), _corpus(args.dev, ("src", "trg")),
                           src_vocab, trg_vocab, cfg.train_config(),
                           InterfaceKind.parse(cfg["interface.kind"]), InitScheme.parse(cfg["interface.init"]),
                           LengthPolicy.parse(cfg["length.policy"], cfg["length.lo"], cfg["length.hi"]),
                           cfg["model.seed"])
        res = study_sweep(kind, setup)
    path = res.to_csv(Path(args.run_dir) / "sweep.csv")
    for r in res.rows:
        piv = "" if r.pivot_bleu is None else f" pivot {r.pivot_bleu:.2f}"
        print(f"{r.condition}:{piv} e2e {r.e2e_bleu:.2f}")
    print(f"-> {path}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pivotcascade", description="Pivot-based cascaded translation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--force", action="store_true", help="rerun even if this exact run was recorded")
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a synthetic three-language task")
    sp.add_argument("--task", choices=["copy", "cipher", "cipher-reorder", "length-change"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("build-vocab", cmd_build_vocab, "build a vocabulary from text files")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--min-count", type=int)

    for name, func in (("pretrain-ar", cmd_pretrain_ar), ("pretrain-nat", cmd_pretrain_nat)):
        sp = add(name, func, f"pre-train a {'n autoregressive' if name.endswith('ar') else ' non-autoregressive'}"
                             " model")
        sp.add_argument("--train", required=True, help="corpus prefix")
        sp.add_argument("--dev", help="dev corpus prefix")
        sp.add_argument("--sides", default="piv,trg" if name == "pretrain-ar" else "src,piv")
        sp.add_argument("--src-vocab", required=True)
        sp.add_argument("--tgt-vocab", required=True)
        sp.add_argument("--run-dir", required=True)

    sp = add("concat", cmd_concat, "assemble an integrated model from pre-trained checkpoints")
    sp.add_argument("--s2p")
    sp.add_argument("--p2t")
    sp.add_argument("--init", help="groups to copy: none, s2p, p2t, both or a comma list")
    sp.add_argument("--interface", help="states, states-noenc or posteriors")
    sp.add_argument("--out", required=True)

    sp = add("finetune", cmd_finetune, "fine-tune an integrated model end to end")
    sp.add_argument("--model", required=True)
    sp.add_argument("--train", required=True)
    sp.add_argument("--dev")
    sp.add_argument("--src-side", default="src")
    sp.add_argument("--trg-side", default="trg")
    sp.add_argument("--pivot-side", help="side holding synthetic pivots (AR s2p only)")
    sp.add_argument("--length-policy")
    sp.add_argument("--src-vocab", required=True)
    sp.add_argument("--trg-vocab", required=True)
    sp.add_argument("--piv-vocab")
    sp.add_argument("--run-dir", required=True)

    sp = add("translate", cmd_translate, "translate a file")
    sp.add_argument("--mode", choices=["two-pass", "integrated", "single"], default="two-pass")
    sp.add_argument("--model", required=True, help="s2p model (two-pass), integrated or single model")
    sp.add_argument("--p2t", help="piv->trg model for two-pass")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--pivot-output")
    sp.add_argument("--refs", help="references (for the target_oracle length policy)")
    sp.add_argument("--beam", type=int)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--src-vocab", required=True)
    sp.add_argument("--piv-vocab")
    sp.add_argument("--p2t-vocab", help="p2t source vocabulary if it differs from --piv-vocab")
    sp.add_argument("--tgt-vocab", required=True)

    sp = add("synthetic-pivots", cmd_synthetic_pivots, "decode pivots for a source file once")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--beam", type=int)
    sp.add_argument("--src-vocab", required=True)
    sp.add_argument("--piv-vocab", required=True)

    sp = add("distill", cmd_distill, "sequence-level distillation targets from a teacher")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--beam", type=int)
    sp.add_argument("--src-vocab", required=True)
    sp.add_argument("--tgt-vocab", required=True)

    sp = add("score", cmd_score, "corpus BLEU of a hypothesis file")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)

    sp = add("noise", cmd_noise, "character noise over a file")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--p", type=float, required=True)
    sp.add_argument("--seed", type=int, default=1)

    sp = add("sweep", cmd_sweep, "error-propagation or study sweep")
    sp.add_argument("--kind", choices=list(SWEEP_KINDS), required=True)
    sp.add_argument("--s2p", required=True)
    sp.add_argument("--p2t", required=True)
    sp.add_argument("--variant", action="append", help="label=checkpoint of a degraded s2p model")
    sp.add_argument("--test")
    sp.add_argument("--train")
    sp.add_argument("--dev")
    sp.add_argument("--src-vocab", required=True)
    sp.add_argument("--piv-vocab")
    sp.add_argument("--tgt-vocab", required=True)
    sp.add_argument("--run-dir", required=True)
    return p


def _thread_limit():
    n = os.environ.get("CASCADE_THREADS")
    if not n:
        return None
    try:
        limit = int(n)
    except ValueError as err:
        raise ConfigError(f"CASCADE_THREADS must be an integer, got {n!r}") from err
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        limiter = _thread_limit()
        with ad.default_dtype(cfg["model.precision"]):
            args.func(args, cfg)
        if limiter is not None:
            limiter.restore_original_limits()
    except (UsageError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, VocabMismatchError, FileNotFoundError, TrainingError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (ad.NonFiniteError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
