import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pivotcascade.data import DataError
from pivotcascade.estimators import ARTranslator, CascadeTranslator, IntegratedTranslator, NATTranslator

TINY = dict(d_model=16, n_heads=2, d_ff=32, n_layers=1, dropout=0.0, lr=5e-3, warmup=10, max_tokens=64, seed=3)

X = ["a b c", "b c", "c a", "a a b", "b", "c c a b"]
P = ["p q r", "q r", "r p", "p p q", "q", "r r p q"]
Y = ["x y z", "y z", "z x", "x x y", "y", "z z x y"]


def test_get_params_and_clone():
    est = NATTranslator(iterations=3, **TINY)
    params = est.get_params()
    assert params["iterations"] == 3 and params["d_model"] == 16
    copy = clone(est)
    assert copy.get_params() == params and copy is not est
    est.set_params(beam=2)
    assert est.beam == 2


def test_ar_fit_predict_score():
    est = ARTranslator(max_updates=150, beam=2, **TINY).fit(X, P)
    out = est.predict(X)
    assert len(out) == len(X) and all(isinstance(s, str) for s in out)
    assert est.train_losses_[-1] < est.train_losses_[0]
    assert 0.0 <= est.score(X, P) <= 100.0


def test_nat_source_lengths():
    est = NATTranslator(max_updates=5, length_policy="source", **TINY).fit(X, P)
    out = est.predict(np.array(X))
    assert [len(s.split()) for s in out] == [len(s.split()) for s in X]
    est.set_params(length_policy="oracle")
    with pytest.raises(ValueError, match="length_policy"):
        est.predict(X)


def test_cascade_and_integrated():
    casc = CascadeTranslator(ARTranslator(max_updates=3, **TINY), ARTranslator(max_updates=3, **TINY))
    casc.fit(X, Y, pivot=P)
    assert len(casc.predict_pivot(X)) == len(casc.predict(X)) == len(X)
    first = NATTranslator(max_updates=3, **TINY).fit(X, P)
    second = ARTranslator(max_updates=3, **TINY).fit(P, Y, src_vocab=first.tgt_vocab_)
    integ = IntegratedTranslator(first, second, max_updates=2, warmup=1, max_tokens=64).fit(X, Y)
    assert len(integ.predict(X)) == len(X)
    with pytest.raises(TypeError):
        IntegratedTranslator(second, second).fit(X, Y)


def test_validation_errors():
    est = ARTranslator(max_updates=1, **TINY)
    with pytest.raises(NotFittedError):
        est.predict(X)
    with pytest.raises(DataError, match="different lengths"):
        est.fit(X, Y[:2])
    with pytest.raises(DataError, match="single string"):
        est.fit("a b", "x y")
    with pytest.raises(DataError, match="empty sentence"):
        est.fit(["a", " "], ["x", "y"])
    with pytest.raises(DataError, match="expected str"):
        est.fit([1, 2], ["x", "y"])
    with pytest.raises(ValueError, match="pivot"):
        CascadeTranslator().fit(X, Y)
