import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pivotcascade import autodiff as ad
from pivotcascade.autodiff import Tensor
from pivotcascade.cascade import (
    GROUPS,
    InitScheme,
    InterfaceKind,
    IntegratedModel,
    LengthPolicy,
    VocabMismatchError,
    bridge_states,
    concatenate,
    content_lengths,
    forward_integrated,
    harden,
    load_model,
    masked_pivot_input,
    param_group,
    save_model,
    soft_embed,
    wrap_posteriors,
)
from pivotcascade.checkpoint import CheckpointError
from pivotcascade.nnet import BOS, EOS, MASK, PAD, DecoderOutput, TransformerConfig, TransformerModel, init_params

KW = dict(d_model=16, n_heads=2, d_ff=32, n_enc_layers=2, n_dec_layers=2, dropout_rate=0.0, max_positions=32)


def pair(piv_hash="piv", seed=5):
    s2p = TransformerModel.create(TransformerConfig(9, 10, seed=seed, **KW), "nat", "src", piv_hash)
    p2t = TransformerModel.create(TransformerConfig(10, 11, seed=seed + 1, **KW), "ar", "piv", "trg")
    return s2p, p2t


def batch():
    src = np.array([[BOS, 5, 6, 7, EOS], [BOS, 8, EOS, PAD, PAD]])
    trg = np.array([[5, 6, 7], [9, PAD, PAD]])
    prefix = np.array([[BOS, 5, 6, 7], [BOS, 9, PAD, PAD]])
    return src, trg, prefix


def test_parse_helpers():
    assert InterfaceKind.parse("states").label == "states"
    assert InterfaceKind.parse("states-noenc") == InterfaceKind("decoder_states", False)
    assert InterfaceKind.parse("decoder_posteriors").label == "posteriors"
    with pytest.raises(ValueError):
        InterfaceKind.parse("logits")
    with pytest.raises(ValueError):
        InterfaceKind("decoder_posteriors", with_p2t_encoder=False)
    assert InitScheme.parse("both").groups == frozenset(GROUPS)
    assert InitScheme.parse("none").label == "none"
    assert InitScheme.parse("s2p.encoder,p2t").groups == {"s2p.encoder", "p2t.encoder", "p2t.decoder"}
    with pytest.raises(ValueError):
        InitScheme.parse("encoder")
    assert LengthPolicy.parse("target").kind == "target_oracle"
    with pytest.raises(ValueError):
        LengthPolicy("random", 5, 5)
    assert param_group("s2p.encoder.layers.0.ffn.fc1.weight") == "s2p.encoder"


def test_length_policies():
    src_len = np.array([3, 7])
    assert LengthPolicy("source").lengths(src_len).tolist() == [3, 7]
    assert LengthPolicy("target_oracle").lengths(src_len, np.array([4, 2])).tolist() == [4, 2]
    with pytest.raises(ValueError):
        LengthPolicy("target_oracle").lengths(src_len)
    logits = Tensor(np.eye(5)[[2, 0]])
    assert LengthPolicy("predicted").lengths(src_len, length_logits=logits).tolist() == [3, 1]
    draws = LengthPolicy("random", 2, 100).lengths(np.zeros(5000), rng=np.random.default_rng(0))
    assert draws.min() >= 2 and draws.max() <= 99
    with pytest.raises(ValueError):
        LengthPolicy("random").lengths(src_len)


@pytest.mark.parametrize("scheme", ["none", "s2p", "p2t", "both", "s2p.decoder"])
def test_concatenate_copies_exactly_the_scheme_groups(scheme):
    s2p, p2t = pair()
    model = concatenate(s2p, p2t, InitScheme.parse(scheme), InterfaceKind.parse("posteriors"), seed=3)
    copied = InitScheme.parse(scheme).groups
    for side, src in (("s2p", s2p), ("p2t", p2t)):
        fresh = init_params(src.cfg, src.kind, prefix=f"{side}.", seed=3)
        for name, t in getattr(model, side).params.items():
            want = src.params[name] if param_group(f"{side}.{name}") in copied else fresh[name]
            assert np.array_equal(t.data, want.data), f"{side}.{name}"
            assert t is not src.params[name]
            assert t.name == f"{side}.{name}"


def test_concatenate_errors():
    s2p, p2t = pair()
    with pytest.raises(ValueError, match="no p2t checkpoint"):
        concatenate(s2p, None, InitScheme.parse("both"), InterfaceKind.parse("states"), p2t_cfg=p2t.cfg)
    with pytest.raises(VocabMismatchError) as err:
        concatenate(*pair(piv_hash="other"), InitScheme.parse("both"), InterfaceKind.parse("posteriors"))
    assert "other" in str(err.value) and "piv" in str(err.value)
    wrong = TransformerModel.create(TransformerConfig(9, 10, seed=1, **{**KW, "d_ff": 8}), "nat", "src", "piv")
    with pytest.raises(CheckpointError, match="shape"):
        concatenate(wrong, p2t, InitScheme.parse("s2p"), InterfaceKind.parse("states"), s2p_cfg=s2p.cfg)
    with pytest.raises(ValueError, match="frozen"):
        concatenate(s2p, p2t, InitScheme.parse("both"), InterfaceKind.parse("states"), frozen=["s2p.embed"])
    narrow = TransformerModel.create(TransformerConfig(10, 11, **{**KW, "d_model": 8}), "ar", "piv", "trg")
    with pytest.raises(ValueError, match="d_model"):
        concatenate(s2p, narrow, InitScheme.parse("both"), InterfaceKind.parse("states"))


def test_unused_parameters_per_interface():
    s2p, p2t = pair()
    states = concatenate(s2p, p2t, InitScheme.parse("both"), InterfaceKind.parse("states"))
    noenc = concatenate(s2p, p2t, InitScheme.parse("both"), InterfaceKind.parse("states-noenc"))
    post = concatenate(s2p, p2t, InitScheme.parse("both"), InterfaceKind.parse("posteriors"))
    length = {"s2p.length.proj.weight", "s2p.length.proj.bias"}
    out_proj = {"s2p.decoder.out_proj.weight", "s2p.decoder.out_proj.bias"}
    assert post.unused_parameters() == length
    assert states.unused_parameters() == length | out_proj | {"p2t.encoder.embed.weight"}
    assert noenc.unused_parameters() == length | out_proj
    assert not any(n.startswith("p2t.encoder.") for n in noenc.named_parameters())


@pytest.mark.parametrize("iface", ["states", "states-noenc", "posteriors"])
def test_unused_parameters_really_get_no_gradient(iface):
    s2p, p2t = pair()
    model = concatenate(s2p, p2t, InitScheme.parse("both"), InterfaceKind.parse(iface))
    src, trg, prefix = batch()
    out = forward_integrated(model, src, prefix, trg_ids=trg)
    ad.backward(ad.sum_(ad.mul(out.logits, out.logits)))
    unused = model.unused_parameters()
    for name, p in model.named_parameters().items():
        got = p.grad is not None and np.any(p.grad != 0)
        if name in unused:
            assert not got, name
        elif not name.endswith(".k.bias"):  # exactly zero up to roundoff: softmax is shift invariant
            assert got, name


def test_wrap_posteriors_layout():
    post = Tensor(np.full((2, 3, 6), 1 / 6))
    dist, pad = wrap_posteriors(post, np.array([3, 1]))
    d = dist.data
    assert d.shape == (2, 5, 6)
    assert d[0, 0, BOS] == 1 and d[0, 4, EOS] == 1
    assert np.allclose(d[0, 1:4], 1 / 6)
    assert d[1, 2, EOS] == 1 and np.all(d[1, 3:, PAD] == 1)
    assert pad.tolist() == [[False] * 5, [False] * 3 + [True] * 2]
    assert np.allclose(d.sum(-1), 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_soft_embed_is_the_expected_embedding(seed):
    rng = np.random.default_rng(seed)
    E = rng.standard_normal((7, 4))
    p = rng.dirichlet(np.ones(7), size=(2, 3))
    got = soft_embed(Tensor(p), {"encoder.embed.weight": Tensor(E)}).data
    want = np.einsum("btv,vd->btd", p, E)
    assert np.allclose(got, want, atol=1e-12)
    hard = harden(Tensor(p)).data
    content = p.copy()
    content[..., [PAD, BOS, EOS, MASK]] = -1
    assert np.array_equal(hard.argmax(-1), content.argmax(-1)) and np.all(hard.sum(-1) == 1)


def test_bridge_states_without_encoder_passes_states_through():
    states = Tensor(np.ones((1, 3, 16), dtype=np.float32))
    dec = DecoderOutput(states, Tensor(np.zeros((1, 3, 5), dtype=np.float32)))
    _, p2t = pair()
    out = bridge_states(dec, p2t.cfg, p2t.params, np.zeros((1, 3), bool), with_p2t_encoder=False)
    assert out.states is states
    with pytest.raises(ValueError, match="d_model"):
        bridge_states(DecoderOutput(Tensor(np.ones((1, 3, 8))), states), p2t.cfg, p2t.params,
                      np.zeros((1, 3), bool))


def test_pivot_helpers():
    ids = np.array([[BOS, 5, 6, EOS, PAD], [BOS, 7, EOS, PAD, PAD]])
    assert content_lengths(ids).tolist() == [2, 1]
    assert masked_pivot_input(np.array([2, 1])).tolist() == [[MASK, MASK], [MASK, PAD]]


def test_integrated_model_save_load_roundtrip(tmp_path):
    s2p, p2t = pair()
    model = concatenate(s2p, p2t, InitScheme.parse("both"), InterfaceKind.parse("states"),
                        length_policy=LengthPolicy("random", 2, 9), frozen=["p2t.decoder"], seed=4)
    path = save_model(model, tmp_path / "m.csc")
    back = load_model(path)
    assert isinstance(back, IntegratedModel)
    assert back.interface == model.interface and back.length_policy == model.length_policy
    assert back.frozen == model.frozen and back.init == model.init and back.seed == 4
    assert "p2t.decoder.embed.weight" not in back.trainable_parameters()
    src, trg, prefix = batch()
    with ad.no_grad():
        a = forward_integrated(model, src, prefix, trg_ids=trg, length_rng=np.random.default_rng(0)).logits.data
        b = forward_integrated(back, src, prefix, trg_ids=trg, length_rng=np.random.default_rng(0)).logits.data
    assert np.array_equal(a, b)


def test_integrated_requires_ar_second_stage():
    s2p, p2t = pair()
    with pytest.raises(ValueError):
        IntegratedModel(s2p, s2p, InterfaceKind.parse("states"))
