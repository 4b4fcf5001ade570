"""scikit-learn style wrappers: ``fit`` on sentence lists, ``predict`` sentences, ``score`` BLEU."""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .bleu import corpus_bleu
from .cascade import InitScheme, InterfaceKind, LengthPolicy, concatenate
from .data import ParallelCorpus, build_vocab
from .decoding import DecodeConfig
from .nnet import TransformerConfig
from .training import (
    FINETUNE_LR,
    TrainConfig,
    finetune_integrated,
    integrated_translate_lines,
    nat_translate_lines,
    pretrain_ar,
    pretrain_nat,
    translate_lines,
)
from .validation import check_choice, check_lines, check_parallel, check_positive


class _Seq2Seq(BaseEstimator):
    _kind = ""

    def __init__(self, d_model=64, n_heads=4, d_ff=128, n_layers=2, dropout=0.1, lr=5e-4, warmup=4000,
                 max_updates=1000, max_tokens=4096, label_smoothing=None, beam=4, seed=1):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.n_layers = n_layers
        self.dropout = dropout
        self.lr = lr
        self.warmup = warmup
        self.max_updates = max_updates
        self.max_tokens = max_tokens
        self.label_smoothing = label_smoothing
        self.beam = beam
        self.seed = seed

    def _train_config(self, **kw) -> TrainConfig:
        check_positive(self.max_updates, "max_updates", allow_zero=True)
        return TrainConfig(lr=self.lr, warmup=self.warmup, max_updates=self.max_updates, max_tokens=self.max_tokens,
                           label_smoothing=self.label_smoothing, seed=self.seed, **kw)

    def _model_config(self) -> TransformerConfig:
        return TransformerConfig(len(self.src_vocab_), len(self.tgt_vocab_), d_model=self.d_model,
                                 n_heads=self.n_heads, d_ff=self.d_ff, n_enc_layers=self.n_layers,
                                 n_dec_layers=self.n_layers, dropout_rate=self.dropout, seed=self.seed)

    def fit(self, X, y, src_vocab=None, tgt_vocab=None):
        X, y = check_parallel(X, y)
        self.src_vocab_ = src_vocab or build_vocab([X])
        self.tgt_vocab_ = tgt_vocab or build_vocab([y])
        corpus = ParallelCorpus({"src": X, "trg": y})
        train = pretrain_ar if self._kind == "ar" else pretrain_nat
        res = train(self._model_config(), corpus, self._train_config(), src_vocab=self.src_vocab_,
                    tgt_vocab=self.tgt_vocab_, src_side="src", tgt_side="trg")
        self.model_ = res.model
        self.train_losses_ = res.train_losses
        return self

    def score(self, X, y) -> float:
        X, y = check_parallel(X, y)
        return corpus_bleu(self.predict(X), y).score


class ARTranslator(_Seq2Seq):
    """Autoregressive Transformer trained with teacher forcing, decoded by beam search."""

    _kind = "ar"

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        return self._translate(check_lines(X))

    def _translate(self, lines: list[str]) -> list[str]:
        return translate_lines(self.model_, lines, self.src_vocab_, self.tgt_vocab_, beam=self.beam)


class NATTranslator(_Seq2Seq):
    """CMLM trained with random masking, decoded by Mask-Predict."""

    _kind = "nat"

    def __init__(self, d_model=64, n_heads=4, d_ff=128, n_layers=2, dropout=0.1, lr=5e-4, warmup=4000,
                 max_updates=1000, max_tokens=4096, label_smoothing=None, beam=4, seed=1, iterations=5,
                 length_policy="predicted"):
        super().__init__(d_model, n_heads, d_ff, n_layers, dropout, lr, warmup, max_updates, max_tokens,
                         label_smoothing, beam, seed)
        self.iterations = iterations
        self.length_policy = length_policy

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        return self._translate(check_lines(X))

    def _translate(self, X: list[str]) -> list[str]:
        check_choice(self.length_policy, ("predicted", "source"), "length_policy")
        lengths = [max(1, len(x.split())) for x in X] if self.length_policy == "source" else None
        return nat_translate_lines(self.model_, X, self.src_vocab_, self.tgt_vocab_, self.iterations,
                                   lengths=lengths)


class CascadeTranslator(BaseEstimator):
    """Two independently trained models chained through a discrete pivot sentence."""

    def __init__(self, first=None, second=None):
        self.first = first
        self.second = second

    def fit(self, X, y, pivot=None):
        if pivot is None:
            raise ValueError("CascadeTranslator.fit needs pivot sentences aligned with X and y")
        X, P = check_parallel(X, pivot, ("X", "pivot"))
        _, y = check_parallel(P, y, ("pivot", "y"))
        self.first_ = (self.first or ARTranslator()).fit(X, P)
        self.second_ = (self.second or ARTranslator()).fit(P, y)
        return self

    def predict_pivot(self, X) -> list[str]:
        check_is_fitted(self, "first_")
        return self.first_.predict(X)

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "second_")
        # a first-stage output may be empty; the second stage still gets [BOS, EOS]
        return self.second_._translate(self.predict_pivot(X))

    def score(self, X, y) -> float:
        X, y = check_parallel(X, y)
        return corpus_bleu(self.predict(X), y).score


class IntegratedTranslator(BaseEstimator):
    """Fitted NAT src->piv and AR piv->trg estimators joined by a differentiable interface and fine-tuned."""

    def __init__(self, first=None, second=None, interface="posteriors", init="both", length_policy="source",
                 lr=FINETUNE_LR, warmup=4000, max_updates=1000, max_tokens=4096, beam=4, seed=1):
        self.first = first
        self.second = second
        self.interface = interface
        self.init = init
        self.length_policy = length_policy
        self.lr = lr
        self.warmup = warmup
        self.max_updates = max_updates
        self.max_tokens = max_tokens
        self.beam = beam
        self.seed = seed

    def fit(self, X, y):
        X, y = check_parallel(X, y)
        for name, est, kind in (("first", self.first, NATTranslator), ("second", self.second, ARTranslator)):
            if not isinstance(est, kind):
                raise TypeError(f"{name} must be a fitted {kind.__name__}")
            check_is_fitted(est, "model_")
        s2p, p2t = self.first.model_, self.second.model_
        self.src_vocab_, self.trg_vocab_ = self.first.src_vocab_, self.second.tgt_vocab_
        self.model_ = concatenate(s2p, p2t, InitScheme.parse(self.init), InterfaceKind.parse(self.interface),
                                  length_policy=LengthPolicy.parse(self.length_policy), seed=self.seed)
        cfg = TrainConfig(lr=self.lr, warmup=self.warmup, max_updates=self.max_updates,
                          max_tokens=self.max_tokens, seed=self.seed)
        res = finetune_integrated(self.model_, ParallelCorpus({"src": X, "trg": y}), cfg,
                                  src_vocab=self.src_vocab_, trg_vocab=self.trg_vocab_)
        self.train_losses_ = res.train_losses
        return self

    def predict(self, X, refs=None) -> list[str]:
        check_is_fitted(self, "model_")
        return integrated_translate_lines(self.model_, check_lines(X), self.src_vocab_, self.trg_vocab_,
                                          beam=self.beam, refs=refs, seed=self.seed,
                                          decode_cfg=DecodeConfig(beam=self.beam))

    def score(self, X, y) -> float:
        X, y = check_parallel(X, y)
        return corpus_bleu(self.predict(X, refs=y), y).score
