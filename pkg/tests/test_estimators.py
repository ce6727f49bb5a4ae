import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from wdistill.data import gen_synthetic
from wdistill.estimators import DistilledStudent, Seq2SeqTransformer, check_pairs, check_sequences

TRAIN = gen_synthetic("copy", 64, (2, 4), 10, seed=0)
X = [list(s) for s in TRAIN.sources]
Y = [list(t[:-1]) for t in TRAIN.targets]
SMALL = dict(enc_depth=1, dec_depth=1, width=8, heads=2, vocab=10, max_len=8, epochs=1, warmup=4, batch_size=16)


def test_get_params_and_clone():
    est = Seq2SeqTransformer(**SMALL)
    assert est.get_params()["width"] == 8
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    c.set_params(width=16)
    assert c.width == 16 and est.width == 8


def test_student_params_include_teacher_and_method():
    names = set(DistilledStudent().get_params())
    assert {"teacher", "method", "alpha", "selected_classes", "width", "random_state"} <= names


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        Seq2SeqTransformer(**SMALL).predict(X)


def test_fit_predict_score():
    est = Seq2SeqTransformer(**SMALL).fit(X, Y)
    preds = est.predict(X[:5])
    assert len(preds) == 5 and all(isinstance(p, list) for p in preds)
    assert 0.0 <= est.score(X, Y) <= 1.0
    assert est.curve_ and est.curve_[-1].step == len(est.curve_) - 1


def test_fit_is_deterministic():
    a = Seq2SeqTransformer(**SMALL).fit(X, Y)
    b = Seq2SeqTransformer(**SMALL).fit(X, Y)
    assert all(a.params_[k].data.tobytes() == b.params_[k].data.tobytes() for k in a.params_)


@pytest.mark.parametrize("method", ["none", "kd", "wd", "init", "init+kd"])
def test_distilled_student_methods(method):
    teacher = Seq2SeqTransformer(**{**SMALL, "enc_depth": 2, "dec_depth": 2, "width": 16}).fit(X, Y)
    st = DistilledStudent(teacher=teacher, method=method, phase1_epochs=1, **SMALL, ).fit(X, Y)
    assert 0.0 <= st.score(X, Y) <= 1.0
    assert (st.generator_ is not None) == (method == "wd")


def test_student_needs_fitted_teacher():
    with pytest.raises(ValueError):
        DistilledStudent(method="wd", **SMALL).fit(X, Y)
    with pytest.raises(NotFittedError):
        DistilledStudent(teacher=Seq2SeqTransformer(**SMALL), method="kd", **SMALL).fit(X, Y)


def test_validation_helpers():
    assert check_sequences(np.array([[3, 4], [5, 6]]), 10) == [(3, 4), (5, 6)]
    with pytest.raises(ValueError):
        check_sequences([[3, 12]], 10)
    with pytest.raises(ValueError):
        check_sequences([[]], 10)
    with pytest.raises(ValueError):
        check_sequences([], 10)
    with pytest.raises(ValueError):
        check_pairs([[3]], [[3], [4]], 10)
    assert check_pairs([[3]], [[3]], 10).pairs == (((3,), (3, 0)),)
