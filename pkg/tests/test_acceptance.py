"""Acceptance criteria, each run at its stated tolerance.

Every test carries a ``criterion`` marker; conftest prints one PASS/FAIL
line per criterion at the end of the session.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import time

import numpy as np
import pytest

from pivotcascade import autodiff as ad
from pivotcascade.autodiff import OPS, Tensor, grad_check
from pivotcascade.bleu import corpus_bleu
from pivotcascade.cascade import (
    InitScheme,
    InterfaceKind,
    LengthPolicy,
    VocabMismatchError,
    bridge_posteriors,
    concatenate,
    forward_integrated,
    load_model,
    save_model,
    soft_embed,
    wrap_posteriors,
)
from pivotcascade.checkpoint import meta_path
from pivotcascade.data import build_vocab, encode_line
from pivotcascade.decoding import (
    DecodeConfig,
    Hypothesis,
    beam_search,
    beam_search_steps,
    mask_predict,
    nat_lengths,
    pad_batch,
    two_pass_decode,
)
from pivotcascade.evaluation import NOISE_GRID, StudySetup, error_propagation_sweep, study_sweep
from pivotcascade.nnet import BOS, EOS, PAD, DecoderOutput, TransformerConfig, TransformerModel
from pivotcascade.training import (
    Example,
    MetricsLogger,
    TrainConfig,
    collate,
    finetune_integrated,
    integrated_translate_lines,
    nat_translate_lines,
    pretrain_ar,
    pretrain_nat,
    translate_lines,
)

from conftest import AR_UPDATES, NAT_UPDATES, NAT_UPDATES_MULTI, P2T_UPDATES, P2T_UPDATES_MULTI
from toy_pipeline import train, train_cached

SEEDS = range(20)


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------

def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap * 2, x)


def _op_cases(rng):
    """(op, label, f, x) tuples; ``f`` reduces the op output with fixed random weights."""
    n = rng.standard_normal

    def proj(out_shape):
        w = n(out_shape)
        return lambda t: ad.sum_(ad.mul(t, Tensor(w)))

    cases = []

    def add_case(op, label, build, x):
        out_shape = build(Tensor(x)).shape
        p = proj(out_shape)
        cases.append((op, label, lambda t, build=build, p=p: p(build(t)), x))

    a, b = n((3, 4)), n((4,))
    for op in ("add", "sub", "mul"):
        fn = OPS[op]
        add_case(op, "lhs", lambda t, fn=fn: fn(t, Tensor(b)), a)
        add_case(op, "rhs-broadcast", lambda t, fn=fn: fn(Tensor(a), t), b)
    add_case("mul", "scalar", lambda t: ad.mul(t, 1.7), a)
    add_case("exp", "x", ad.exp, 0.5 * n((3, 4)))
    add_case("log", "x", ad.log, rng.uniform(0.5, 2.0, (3, 4)))
    add_case("relu", "x", ad.relu, _away_from_zero(rng, (3, 4)))
    add_case("tanh", "x", ad.tanh, n((3, 4)))
    dseed = int(rng.integers(1 << 30))
    add_case("dropout", "x", lambda t: ad.dropout(t, 0.3, True, np.random.default_rng(dseed)), n((3, 4)))
    add_case("reshape", "x", lambda t: ad.reshape(t, (6, 4)), n((2, 3, 4)))
    add_case("transpose", "x", lambda t: ad.transpose(t, (2, 0, 1)), n((2, 3, 4)))
    add_case("transpose", "default", ad.transpose, n((2, 3, 4)))
    add_case("expand", "x", lambda t: ad.expand(t, (2, 3, 5)), n((3, 1)))
    c = n((3, 2))
    add_case("concat", "first", lambda t: ad.concat([t, Tensor(c)], axis=1), n((3, 4)))
    add_case("concat", "second", lambda t: ad.concat([Tensor(a), t], axis=1), n((3, 2)))
    add_case("getitem", "repeated-rows", lambda t: ad.getitem(t, (np.array([0, 2, 0]), slice(1, None))), n((3, 4)))
    ids = rng.integers(0, 6, (2, 5))
    add_case("embedding", "weight", lambda t: ad.embedding(t, ids), n((6, 3)))
    add_case("sum", "all", lambda t: ad.sum_(ad.mul(t, t)), n((3, 4)))
    add_case("sum", "axis1", lambda t: ad.sum_(t, axis=1), n((2, 3, 4)))
    add_case("mean", "axis0", lambda t: ad.mean(t, axis=0), n((3, 4)))
    m1, m2 = n((2, 3, 4)), n((4, 5))
    add_case("matmul", "lhs", lambda t: ad.matmul(t, Tensor(m2)), m1)
    add_case("matmul", "rhs", lambda t: ad.matmul(Tensor(m1), t), m2)
    lx, lw, lb = n((2, 3, 4)), n((4, 5)), n((5,))
    add_case("linear", "x", lambda t: ad.linear(t, Tensor(lw), Tensor(lb)), lx)
    add_case("linear", "weight", lambda t: ad.linear(Tensor(lx), t, Tensor(lb)), lw)
    add_case("linear", "bias", lambda t: ad.linear(Tensor(lx), Tensor(lw), t), lb)
    add_case("linear", "no-bias", lambda t: ad.linear(t, Tensor(lw)), lx)
    add_case("softmax", "x", ad.softmax, n((3, 5)))
    add_case("log_softmax", "x", ad.log_softmax, n((3, 5)))
    add_case("logsumexp", "x", ad.logsumexp, n((3, 5)))
    gx, gg, gb = n((2, 3, 6)), 1 + 0.1 * n((6,)), n((6,))
    add_case("layer_norm", "x", lambda t: ad.layer_norm(t, Tensor(gg), Tensor(gb)), gx)
    add_case("layer_norm", "gamma", lambda t: ad.layer_norm(Tensor(gx), t, Tensor(gb)), gg)
    add_case("layer_norm", "beta", lambda t: ad.layer_norm(Tensor(gx), Tensor(gg), t), gb)
    q, k, v = n((2, 2, 3, 4)), n((2, 2, 5, 4)), n((2, 2, 5, 4))
    mask = rng.random((2, 1, 3, 5)) < 0.7
    mask[..., 0] = True
    add_case("attention", "q", lambda t: ad.attention(t, Tensor(k), Tensor(v), mask), q)
    add_case("attention", "k", lambda t: ad.attention(Tensor(q), t, Tensor(v), mask), k)
    add_case("attention", "v", lambda t: ad.attention(Tensor(q), Tensor(k), t, mask), v)
    targets = rng.integers(0, 5, (2, 3))
    weights = (rng.random((2, 3)) < 0.7).astype(float)
    cases.append(("cross_entropy", "plain", lambda t: ad.cross_entropy(t, targets), n((2, 3, 5))))
    cases.append(("cross_entropy", "weighted-smoothed",
                  lambda t: ad.cross_entropy(t, targets, weights, label_smoothing=0.1), n((2, 3, 5))))
    return cases


def _tiny_integrated(interface: str, seed: int, attempt: int):
    rng = np.random.default_rng([seed, attempt])
    kw = dict(d_model=8, n_heads=2, d_ff=16, dropout_rate=0.0, max_positions=16, seed=seed)
    model = concatenate(None, None, InitScheme(), InterfaceKind.parse(interface),
                        s2p_cfg=TransformerConfig(7, 8, **kw), p2t_cfg=TransformerConfig(8, 9, **kw),
                        s2p_kind="nat", seed=seed, length_policy=LengthPolicy("source"))
    examples = [Example(i, (BOS, *rng.integers(5, 7, n).tolist(), EOS), tuple(rng.integers(5, 9, m).tolist()))
                for i, (n, m) in enumerate([(3, 2), (2, 4)])]
    return model, collate(examples), rng


@contextlib.contextmanager
def _recording_relu(log: list):
    orig = ad.relu

    def rec(x):
        log.append(x.data > 0)
        return orig(x)

    ad.relu = rec
    try:
        yield
    finally:
        ad.relu = orig


def _crosses_kink(f, x: np.ndarray, eps: float) -> bool:
    """Whether any ReLU input changes sign inside the finite-difference stencil around ``x``."""
    def pattern(v):
        log: list = []
        with _recording_relu(log), ad.no_grad():
            f(Tensor(v))
        return log

    base = pattern(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        for step in (eps, -eps):
            v = flat.copy()
            v[i] += step
            if any(not np.array_equal(a, b) for a, b in zip(base, pattern(v.reshape(x.shape)))):
                return True
    return False


def _model_grad_error(interface: str, seed: int, n_dirs: int = 6, eps: float = 1e-4) -> tuple[float, int]:
    """Directional grad check over every trainable parameter, plus a full check of one small tensor.

    Finite differences are meaningless across a ReLU kink, so a draw whose
    stencil crosses one is replaced by the next draw for the same seed.
    Returns the error and the number of draws used.
    """
    for attempt in range(20):
        model, batch, rng = _tiny_integrated(interface, seed, attempt)
        named = model.named_parameters()
        unused = model.unused_parameters()
        names = sorted(n for n in named if n not in unused)
        base = {n: named[n].data.copy() for n in names}
        dirs = {n: rng.standard_normal((n_dirs, base[n].size)) / math.sqrt(len(names)) for n in names}

        def install(values):
            for n, t in values.items():
                side, rest = n.split(".", 1)
                getattr(model, side).params[rest] = t

        def loss():
            out = forward_integrated(model, batch.src, batch.tgt_in, trg_ids=batch.tgt)
            return ad.cross_entropy(out.logits, batch.tgt_out, batch.tgt_out != PAD)

        def along(x):
            row = ad.reshape(x, (1, n_dirs))
            install({n: ad.add(ad.reshape(ad.matmul(row, Tensor(dirs[n])), base[n].shape), Tensor(base[n]))
                     for n in names})
            return loss()

        # key biases shift every attention score of a query equally, so their gradient is exactly zero
        # and a relative error would only measure roundoff
        small = [n for n in names if base[n].size <= 64 and not n.endswith(".k.bias")]
        pick = small[int(rng.integers(len(small)))]

        def coord(x):
            install({n: Tensor(base[n]) for n in names if n != pick} | {pick: x})
            return loss()

        if _crosses_kink(along, np.zeros(n_dirs), eps) or _crosses_kink(coord, base[pick], eps):
            continue
        err = max(grad_check(along, np.zeros(n_dirs), eps), grad_check(coord, base[pick], eps))
        return err, attempt + 1
    raise AssertionError(f"no kink-free draw for seed {seed}")


@pytest.mark.criterion("1", "gradient suite")
def test_gradient_suite(float64, detail):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    seen = set()
    for seed in SEEDS:
        for op, label, f, x in _op_cases(np.random.default_rng(seed)):
            seen.add(op)
            key = f"{op}/{label}"
            worst[key] = max(worst.get(key, 0.0), grad_check(f, x, eps=1e-4))
    assert seen == set(OPS), f"ops without a gradient case: {sorted(set(OPS) - seen)}"
    op_max = max(worst.values())
    model_err, draws = {}, 0
    for iface in ("states", "states-noenc", "posteriors"):
        runs = [_model_grad_error(iface, s) for s in SEEDS]
        model_err[iface] = max(e for e, _ in runs)
        draws += sum(n for _, n in runs)
    elapsed = time.perf_counter() - t0
    detail(f"max op error {op_max:.2e} ({max(worst, key=worst.get)}); model errors "
           + ", ".join(f"{k} {v:.2e}" for k, v in model_err.items()) + f" ({draws} draws for 60 seeds); {elapsed:.0f}s")
    bad = {k: v for k, v in worst.items() if not v < 1e-5}
    assert not bad, f"ops above 1e-5: {bad}"
    assert all(v < 1e-4 for v in model_err.values()), model_err
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 2. one-hot equivalence
# ---------------------------------------------------------------------------

@pytest.mark.criterion("2", "one-hot posteriors equal the discrete embedding path")
def test_one_hot_equivalence(detail):
    worst = 0.0
    for case in range(100):
        rng = np.random.default_rng(case)
        V = int(rng.integers(6, 14))
        d = int(rng.choice([8, 16]))
        cfg = TransformerConfig(V, int(rng.integers(6, 14)), d_model=d, n_heads=2, d_ff=2 * d, n_enc_layers=2,
                                n_dec_layers=2, dropout_rate=0.0, max_positions=32, seed=case)
        p2t = TransformerModel.create(cfg, "ar")
        lengths = rng.integers(1, 7, int(rng.integers(1, 4)))
        K = int(lengths.max())
        content = rng.integers(5, V, (len(lengths), K))
        onehot = np.zeros((len(lengths), K, V), dtype=np.float32)
        np.put_along_axis(onehot, content[..., None], 1.0, axis=-1)
        ids = pad_batch([[BOS, *content[b, :k].tolist(), EOS] for b, k in enumerate(lengths)])

        dist, pad = wrap_posteriors(Tensor(onehot), lengths)
        soft = soft_embed(dist, p2t.params).data
        hard = ad.embedding(p2t.params["encoder.embed.weight"], ids).data
        assert np.array_equal(pad, ids == PAD)
        assert soft.dtype == hard.dtype
        assert np.array_equal(soft, hard), f"case {case}: soft embedding differs before positions"

        # exact one-hot posteriors through the full bridge and the p2t decoder
        logits = np.where(onehot > 0, 0.0, -1e4).astype(np.float32)
        dec = DecoderOutput(Tensor(np.zeros((len(lengths), K, d), np.float32)), Tensor(logits))
        assert np.array_equal(dec.posteriors.data, onehot)
        with ad.no_grad():
            bridged = bridge_posteriors(dec, cfg, p2t.params, lengths)
            prefix = pad_batch([[BOS, *rng.integers(5, cfg.vocab_size_tgt, 3).tolist()] for _ in lengths])
            soft_out = p2t.decode(bridged, prefix).logits.data
            hard_out = p2t.decode(p2t.encode(ids), prefix).logits.data
        worst = max(worst, float(np.abs(soft_out - hard_out).max()))
    detail(f"100 cases bit-exact before positions; max p2t logit difference {worst:.1e}")
    assert worst <= 1e-5


# ---------------------------------------------------------------------------
# 3. gradient flow
# ---------------------------------------------------------------------------

@pytest.mark.criterion("3", "every unfrozen s2p group gets gradient after one step")
def test_gradient_flow(toy, detail):
    sv, pv, tv = toy.src_vocab, toy.piv_vocab, toy.trg_vocab
    kw = dict(d_model=16, n_heads=2, d_ff=32, n_enc_layers=2, n_dec_layers=2, dropout_rate=0.0)
    s2p = TransformerModel.create(TransformerConfig(len(sv), len(pv), seed=3, **kw), "nat", sv.hash, pv.hash)
    p2t = TransformerModel.create(TransformerConfig(len(pv), len(tv), seed=4, **kw), "ar", pv.hash, tv.hash)
    corpus = toy["direct"].select(range(12))
    cfg = TrainConfig(lr=1e-3, warmup=1, max_updates=1, max_tokens=4096)
    checked = 0
    for iface in ("states", "states-noenc", "posteriors"):
        for scheme in ("none", "s2p", "p2t", "both"):
            model = concatenate(s2p, p2t, InitScheme.parse(scheme), InterfaceKind.parse(iface))
            res = finetune_integrated(model, corpus, cfg, src_vocab=sv, trg_vocab=tv)
            assert res.state.update == 1
            trainable = set(model.trainable_parameters()) - model.unused_parameters()
            groups = {g for g, names in model.groups().items() if set(names) & trainable}
            for g in sorted(groups):
                norm = res.state.group_grad_norms.get(g, 0.0)
                assert norm > 0, f"{iface}/{scheme}: group {g} has zero gradient"
                checked += g.startswith("s2p.")
            assert {"s2p.encoder", "s2p.decoder"} <= groups
    detail(f"{checked} s2p group checks over 3 interfaces x 4 init schemes")


# ---------------------------------------------------------------------------
# 4. composition identity
# ---------------------------------------------------------------------------

def _greedy(model, src_ids, max_len):
    with ad.no_grad():
        enc = model.encode(np.array([src_ids]))
        toks, score = [BOS], 0.0
        for _ in range(max_len):
            logits = model.decode(enc, np.array([toks])).logits.data[0, -1].astype(np.float64)
            lp = logits - logits.max()
            lp = lp - np.log(np.exp(lp).sum())
            v = int(lp.argmax())
            toks.append(v)
            score += float(lp[v])
            if v == EOS:
                return Hypothesis(tuple(toks), score)
    return Hypothesis(tuple(toks), score, truncated=True)


def _toy_step(seed):
    """A 3-token model (ids 0, 1 and EOS=2) whose next-token distribution depends on the whole prefix."""
    def step(rows, prefixes):
        out = []
        for r, p in zip(rows, prefixes):
            z = np.random.default_rng([seed, int(r), *map(int, p)]).normal(size=3) * 1.5
            out.append(z - np.log(np.exp(z).sum()))
        return np.array(out)
    return step


def _enumerate(step, row, max_len, bos=3, eos=2):
    """All hypotheses the beam search can return, scored exhaustively."""
    hyps = []
    frontier = [((bos,), 0.0)]
    for depth in range(1, max_len + 1):
        nxt = []
        for toks, s in frontier:
            lp = step(np.array([row]), np.array([toks]))[0]
            for v in range(3):
                cand = (toks + (v,), s + float(lp[v]))
                if v == eos:
                    hyps.append(Hypothesis(*cand))
                elif depth == max_len:
                    hyps.append(Hypothesis(*cand, truncated=True))
                else:
                    nxt.append(cand)
        frontier = nxt
    return hyps


@pytest.mark.criterion("4", "composition identity, greedy and brute-force beam")
def test_composition_identity(toy, s2p_ar, s2p_nat, p2t, detail):
    src = [encode_line(toy.src_vocab, s) for s in toy["test"]["src"][:24]]
    cfg = DecodeConfig(beam=4, iterations=3, pivot_length="predicted")
    # AR first stage: beam search, then beam search on the discrete pivot
    pairs = two_pass_decode(s2p_ar, p2t, src, cfg)
    piv = [nb.best for nb in beam_search(s2p_ar, src, 4, 1, cfg=cfg)]
    trg = [nb.best for nb in beam_search(p2t, [[BOS, *h.content, EOS] for h in piv], 4, 1, cfg=cfg)]
    assert [(p.tokens, p.score, t.tokens, t.score) for p, t in pairs] == \
           [(p.tokens, p.score, t.tokens, t.score) for p, t in zip(piv, trg)]
    # NA first stage: Mask-Predict with predicted lengths
    pairs = two_pass_decode(s2p_nat, p2t, src, cfg)
    piv = mask_predict(s2p_nat, src, 3, nat_lengths(s2p_nat, src, "predicted"))
    trg = [nb.best for nb in beam_search(p2t, [[BOS, *h.content, EOS] for h in piv], 4, 1, cfg=cfg)]
    assert [(p.tokens, p.score, t.tokens, t.score) for p, t in pairs] == \
           [(p.tokens, p.score, t.tokens, t.score) for p, t in zip(piv, trg)]

    # beam=1 is the greedy rollout
    piv_ids = [encode_line(toy.piv_vocab, s) for s in toy["test"]["piv"][:24]]
    for ids in piv_ids:
        max_len = cfg.max_lengths(np.array([len(ids) - 2]))[0]
        got = beam_search(p2t, [ids], 1, 1, cfg=cfg)[0].best
        want = _greedy(p2t, ids, max_len)
        assert got.tokens == want.tokens and got.truncated == want.truncated
        assert got.score == pytest.approx(want.score, abs=1e-9)

    # exhaustive beam on the enumerable toy model
    n_cases = 0
    for seed, max_len in itertools.product(range(5), (1, 2, 3, 4)):
        step = _toy_step(seed)
        width = 3 ** max_len
        for normalize in (False, True):
            got = beam_search_steps(step, 2, width, 5 if width >= 5 else width, max_len, normalize, bos=3, eos=2)
            for row in range(2):
                key = (lambda h: h.normalized_score) if normalize else (lambda h: h.score)
                want = sorted(_enumerate(step, row, max_len), key=key, reverse=True)[:len(got[row])]
                assert [h.tokens for h in got[row]] == [h.tokens for h in want]
                assert np.allclose([h.score for h in got[row]], [h.score for h in want], atol=1e-12)
                n_cases += 1
    detail(f"two-pass AR and NA compositions bit-equal; 24 greedy rollouts; {n_cases} exhaustive beam cases")


# ---------------------------------------------------------------------------
# 5. toy end-to-end trend
# ---------------------------------------------------------------------------

def _bleu(hyps, refs):
    return corpus_bleu(hyps, refs).score


@pytest.mark.slow
@pytest.mark.criterion("5", "toy end-to-end trend")
def test_toy_end_to_end(toy, toy_multi, detail):
    t0 = time.perf_counter()
    test, dev = toy["test"], toy["dev"]
    assert max(len(toy.src_vocab), len(toy.piv_vocab), len(toy.trg_vocab)) <= 64
    assert max(len(toy_multi.src_vocab), len(toy_multi.piv_vocab), len(toy_multi.trg_vocab)) <= 64
    p2t = train_cached(toy, "p2t", "ar", P2T_UPDATES)

    # (a) two-pass AR baseline
    s2p_ar = train_cached(toy, "s2p", "ar", AR_UPDATES)
    piv = translate_lines(s2p_ar, test["src"], toy.src_vocab, toy.piv_vocab, beam=4)
    bleu_a = _bleu(translate_lines(p2t, piv, toy.piv_vocab, toy.trg_vocab, beam=4), test["trg"])

    # (b) NA pivot baseline, one pass vs five Mask-Predict iterations
    p2t_m = train_cached(toy_multi, "p2t", "ar", P2T_UPDATES_MULTI)
    nat_m = train_cached(toy_multi, "s2p", "nat", NAT_UPDATES_MULTI)
    tm = toy_multi["test"]
    e2e = {}
    for T in (1, 5):
        piv = nat_translate_lines(nat_m, tm["src"], toy_multi.src_vocab, toy_multi.piv_vocab, T)
        e2e[T] = _bleu(translate_lines(p2t_m, piv, toy_multi.piv_vocab, toy_multi.trg_vocab, beam=4), tm["trg"])

    # (c) integrated fine-tuning vs the assembled, untuned model
    s2p_nat = train_cached(toy, "s2p", "nat", NAT_UPDATES)
    gains = {}
    for iface in ("states", "posteriors"):
        model = concatenate(s2p_nat, p2t, InitScheme.parse("both"), InterfaceKind.parse(iface))
        before = _bleu(integrated_translate_lines(model, dev["src"], toy.src_vocab, toy.trg_vocab, beam=1,
                                                  refs=dev["trg"]), dev["trg"])
        cfg = TrainConfig(lr=1e-3, warmup=100, max_updates=300, max_tokens=512, eval_interval=100,
                          log_interval=50)
        res = finetune_integrated(model, toy["direct"], cfg, src_vocab=toy.src_vocab, trg_vocab=toy.trg_vocab,
                                  dev=dev)
        gains[iface] = (before, res.state.best_score)
    elapsed = time.perf_counter() - t0 + sum(toy.seconds.values()) + sum(toy_multi.seconds.values())
    detail(f"(a) two-pass AR {bleu_a:.1f}; (b) NA T=1 {e2e[1]:.1f} < T=5 {e2e[5]:.1f}; (c) "
           + ", ".join(f"{k} {b:.1f}->{a:.1f}" for k, (b, a) in gains.items()) + f"; {elapsed / 60:.1f} min")
    assert bleu_a > 90
    assert e2e[1] < e2e[5]
    assert any(a - b >= 1.0 for b, a in gains.values())
    assert elapsed < 30 * 60


# ---------------------------------------------------------------------------
# 6. error propagation
# ---------------------------------------------------------------------------

def _snapshot_model(model: TransformerModel, values) -> TransformerModel:
    params = {n: Tensor(values[n].copy(), requires_grad=True, name=n) for n in model.params}
    return TransformerModel(model.cfg, model.kind, params, model.src_vocab_hash, model.tgt_vocab_hash)


@pytest.mark.slow
@pytest.mark.criterion("6", "error propagation direction")
def test_error_propagation(toy, p2t, detail):
    noise_rows = [f"noise={p:g}" for p in NOISE_GRID[1:]]
    ok_oracle, lines = 0, []
    for seed in range(1, 6):
        res = train(toy, "s2p", "ar", 600, seed=seed, snapshot_fractions=(0.25, 0.5))
        variants = {"baseline": res.model}
        for frac, values in sorted(res.snapshots.items()):
            variants[f"ckpt@{frac:.0%}"] = _snapshot_model(res.model, values)
        sweep = error_propagation_sweep(variants, p2t, toy["test"], src_vocab=toy.src_vocab,
                                        piv_vocab=toy.piv_vocab, trg_vocab=toy.trg_vocab, beam=4, seed=seed)
        curve = sweep.e2e(["baseline", *noise_rows])
        assert all(b <= a for a, b in zip(curve, curve[1:])), f"seed {seed}: noise curve {curve}"
        base, oracle = sweep["baseline"], sweep["oracle-10best"]
        piv_gain, e2e_gain = oracle.pivot_bleu - base.pivot_bleu, oracle.e2e_bleu - base.e2e_bleu
        ok_oracle += piv_gain >= e2e_gain >= 0
        lines.append(f"s{seed} noise {'/'.join(f'{v:.0f}' for v in curve)} oracle +{piv_gain:.1f}/+{e2e_gain:.1f}")
    detail("; ".join(lines) + f"; oracle ordering holds in {ok_oracle}/5 seeds")
    assert ok_oracle >= 4


# ---------------------------------------------------------------------------
# 7. sweep directions
# ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion("7", "sweep directions")
def test_sweep_directions(toy, s2p_nat, p2t, detail):
    def setup(updates):
        cfg = TrainConfig(lr=1e-3, warmup=50, max_updates=updates, max_tokens=512, eval_interval=50,
                          log_interval=50)
        return StudySetup(s2p_nat, p2t, toy["direct"], toy["dev"], toy.src_vocab, toy.trg_vocab, cfg,
                          InterfaceKind.parse("states"))

    size = study_sweep("data_size", setup(300), (0.1, 0.3, 0.5, 1.0))
    init = study_sweep("init_scheme", setup(150), ("none", "both"))
    length = study_sweep("length_policy", setup(150), ("random", "source"))
    sizes = size.e2e()
    detail(f"data size {'/'.join(f'{v:.1f}' for v in sizes)}; init none {init['none'].e2e_bleu:.1f} "
           f"both {init['both'].e2e_bleu:.1f}; length random {length['random'].e2e_bleu:.1f} "
           f"source {length['source'].e2e_bleu:.1f}")
    assert all(a <= b for a, b in zip(sizes, sizes[1:])), sizes
    assert init["both"].e2e_bleu >= init["none"].e2e_bleu
    assert length["source"].e2e_bleu >= length["random"].e2e_bleu


# ---------------------------------------------------------------------------
# 8. determinism and formats
# ---------------------------------------------------------------------------

def _run_small(toy, run_dir):
    sv, pv, tv = toy.src_vocab, toy.piv_vocab, toy.trg_vocab
    kw = dict(d_model=16, n_heads=2, d_ff=32, n_enc_layers=1, n_dec_layers=1, dropout_rate=0.1)
    cfg = TrainConfig(lr=2e-3, warmup=5, max_updates=12, max_tokens=128, log_interval=3, eval_interval=6,
                      precision="float64", seed=5)
    dev = toy["dev"].select(range(8))
    ar = pretrain_ar(TransformerConfig(len(pv), len(tv), **kw), toy["p2t"].select(range(48)), cfg,
                     src_vocab=pv, tgt_vocab=tv, dev=dev, metrics=MetricsLogger.in_dir(run_dir / "ar"),
                     checkpoint_dir=run_dir / "ar")
    nat = pretrain_nat(TransformerConfig(len(sv), len(pv), **kw), toy["s2p"].select(range(48)), cfg,
                       src_vocab=sv, tgt_vocab=pv, dev=dev, metrics=MetricsLogger.in_dir(run_dir / "nat"))
    model = concatenate(nat.model, ar.model, InitScheme.parse("both"), InterfaceKind.parse("posteriors"))
    finetune_integrated(model, toy["direct"].select(range(48)), cfg, src_vocab=sv, trg_vocab=tv, dev=dev,
                        metrics=MetricsLogger.in_dir(run_dir / "ft"), checkpoint_dir=run_dir / "ft")
    return model


@pytest.mark.criterion("8", "determinism and formats")
def test_determinism_and_formats(toy, tmp_path, detail):
    _run_small(toy, tmp_path / "a")
    _run_small(toy, tmp_path / "b")
    compared = 0
    for stage in ("ar", "nat", "ft"):
        for name in ("metrics.jsonl", "metrics.csv"):
            a, b = (tmp_path / r / stage / name for r in "ab")
            assert a.read_bytes() == b.read_bytes(), f"{stage}/{name} differs between identical runs"
            assert a.stat().st_size > 0
            compared += 1
    for ck in ("ar/best.csc", "ft/best.csc", "ft/last.csc"):
        assert (tmp_path / "a" / ck).read_bytes() == (tmp_path / "b" / ck).read_bytes()

    # save / load / save
    for ck in ("ar/last.csc", "ft/last.csc"):
        first = tmp_path / "a" / ck
        again = save_model(load_model(first), tmp_path / "resaved.csc")
        assert first.read_bytes() == again.read_bytes()
        assert meta_path(first).read_bytes() == meta_path(again).read_bytes()

    # vocabulary-hash guard on posteriors assembly
    s2p, p2t = load_model(tmp_path / "a" / "ft" / "last.csc").s2p, load_model(tmp_path / "a" / "ar" / "last.csc")
    other = build_vocab([["zz " + s for s in toy["p2t"]["piv"]]])
    p2t.src_vocab_hash = other.hash
    with pytest.raises(VocabMismatchError) as err:
        concatenate(s2p, p2t, InitScheme.parse("both"), InterfaceKind.parse("posteriors"))
    assert s2p.tgt_vocab_hash in str(err.value) and other.hash in str(err.value)
    concatenate(s2p, p2t, InitScheme.parse("both"), InterfaceKind.parse("states"))
    detail(f"{compared} metric files bit-identical across runs; checkpoints byte-identical; guard names both hashes")


# ---------------------------------------------------------------------------
# 9. BLEU oracle
# ---------------------------------------------------------------------------

def _brute_bleu(hyps, refs):
    """Reference BLEU-4 written from scratch: explicit n-gram lists, no shared helpers."""
    match = [0, 0, 0, 0]
    total = [0, 0, 0, 0]
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        ht, rt = h.split(), r.split()
        hyp_len += len(ht)
        ref_len += len(rt)
        for n in range(1, 5):
            hg = [" ".join(ht[i:i + n]) for i in range(len(ht) - n + 1)]
            rg = [" ".join(rt[i:i + n]) for i in range(len(rt) - n + 1)]
            total[n - 1] += len(hg)
            for g in set(hg):
                match[n - 1] += min(hg.count(g), rg.count(g))
    if min(match) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(match, total)) / 4
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return 100 * bp * math.exp(log_p)


@pytest.mark.criterion("9", "corpus BLEU matches a brute-force counter")
def test_bleu_oracle(detail):
    worst = 0.0
    nonzero = 0
    for case in range(50):
        rng = np.random.default_rng(case)
        words = [f"w{i}" for i in range(int(rng.integers(3, 9)))]
        refs, hyps = [], []
        for _ in range(int(rng.integers(1, 12))):
            ref = list(rng.choice(words, int(rng.integers(1, 15))))
            hyp = [w if rng.random() < 0.7 else str(rng.choice(words)) for w in ref]
            cut = int(rng.integers(-3, 4))
            hyp = hyp[:len(hyp) + cut] if cut < 0 else hyp + list(rng.choice(words, cut))
            refs.append(" ".join(ref))
            hyps.append(" ".join(hyp))
        got, want = corpus_bleu(hyps, refs).score, _brute_bleu(hyps, refs)
        nonzero += want > 0
        worst = max(worst, abs(got - want))
    detail(f"max |diff| {worst:.1e} over 50 corpora ({nonzero} with nonzero BLEU)")
    assert worst <= 1e-9
    assert nonzero >= 25
