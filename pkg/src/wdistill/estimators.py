"""scikit-learn style wrappers.

``X`` is a sequence of source token sequences and ``y`` a sequence of target
token sequences (EOS is appended internally).  Hyper-parameters live in
``__init__`` so ``get_params``/``set_params``/``clone`` work as usual.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from . import distill as T
from . import generator as gen_mod
from . import metrics as E
from . import model as M
from .data import Corpus, batch_iter, make_batch


def check_sequences(X, vocab: int, name: str = "X") -> list[tuple[int, ...]]:
    """Validate a sequence-of-sequences input and return it as int tuples."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = X.tolist()
    try:
        seqs = [tuple(int(t) for t in s) for s in X]
    except TypeError as exc:
        raise ValueError(f"{name} must be a sequence of token sequences") from exc
    if not seqs:
        raise ValueError(f"{name} is empty")
    for s in seqs:
        if not s:
            raise ValueError(f"{name} contains an empty sequence")
        if min(s) < 0 or max(s) >= vocab:
            raise ValueError(f"{name} contains ids outside [0, {vocab})")
    return seqs


def check_pairs(X, y, vocab: int) -> Corpus:
    xs = check_sequences(X, vocab, "X")
    ys = check_sequences(y, vocab, "y")
    if len(xs) != len(ys):
        raise ValueError(f"X has {len(xs)} sequences but y has {len(ys)}")
    pairs = tuple((s, t if t[-1] == M.EOS else t + (M.EOS,)) for s, t in zip(xs, ys))
    return Corpus(pairs, vocab, "fit")


class _Seq2SeqMixin:
    def _model(self):
        check_is_fitted(self, "params_")
        return self.params_, self.config_

    def predict(self, X) -> list[list[int]]:
        params, cfg = self._model()
        return E.decode_corpus(params, cfg, check_sequences(X, cfg.vocab))

    def score(self, X, y) -> float:
        """Teacher-forced token accuracy."""
        params, cfg = self._model()
        return E.teacher_forced_accuracy(params, cfg, check_pairs(X, y, cfg.vocab))


class Seq2SeqTransformer(_Seq2SeqMixin, BaseEstimator):
    """Encoder-decoder Transformer trained with cross-entropy on (X, y)."""

    def __init__(
        self,
        enc_depth=2,
        dec_depth=2,
        width=32,
        heads=4,
        ffn_hidden=None,
        vocab=16,
        max_len=12,
        lr=3e-3,
        warmup=200,
        epochs=20,
        batch_size=32,
        random_state=0,
    ):
        self.enc_depth = enc_depth
        self.dec_depth = dec_depth
        self.width = width
        self.heads = heads
        self.ffn_hidden = ffn_hidden
        self.vocab = vocab
        self.max_len = max_len
        self.lr = lr
        self.warmup = warmup
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _config(self) -> M.ModelConfig:
        return M.ModelConfig(
            self.enc_depth, self.dec_depth, self.width, self.ffn_hidden, self.heads, self.vocab, self.max_len
        )

    def _train_config(self, alpha=1.0) -> T.TrainConfig:
        return T.TrainConfig(
            alpha=alpha,
            base_lr=self.lr,
            warmup_steps=self.warmup,
            max_epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
        )

    def fit(self, X, y):
        cfg = self._config()
        corpus = check_pairs(X, y, cfg.vocab)
        self.params_ = M.init_params(cfg, self.random_state)
        self.config_ = cfg
        self.curve_ = T.train_model(self.params_, cfg, corpus, self._train_config())
        return self

    @property
    def teacher_(self) -> T.Teacher:
        params, cfg = self._model()
        return T.Teacher(params, cfg)


class DistilledStudent(Seq2SeqTransformer):
    """Student trained against a fitted :class:`Seq2SeqTransformer` teacher.

    ``method`` picks the recipe: ``wd`` (generator Phase 1, then direct
    Phase 2), ``kd`` (training on teacher decodes), ``init`` / ``init+kd``
    (copy-and-slice start), or ``none``.  ``alpha`` weights the WD losses;
    ``kd_alpha`` does the same for the kd baselines, where 1.0 means no
    word-level term.
    """

    def __init__(
        self,
        teacher=None,
        method="wd",
        alpha=0.5,
        kd_alpha=1.0,
        selected_classes="all",
        phase1_epochs=3,
        phase2_warmup_factor=0.25,
        enc_depth=2,
        dec_depth=1,
        width=16,
        heads=2,
        ffn_hidden=None,
        vocab=16,
        max_len=12,
        lr=3e-3,
        warmup=100,
        epochs=4,
        batch_size=32,
        random_state=0,
    ):
        super().__init__(
            enc_depth, dec_depth, width, heads, ffn_hidden, vocab, max_len, lr, warmup, epochs, batch_size, random_state
        )
        self.teacher = teacher
        self.method = method
        self.alpha = alpha
        self.kd_alpha = kd_alpha
        self.selected_classes = selected_classes
        self.phase1_epochs = phase1_epochs
        self.phase2_warmup_factor = phase2_warmup_factor

    def fit(self, X, y):
        if self.teacher is None and self.method != "none":
            raise ValueError(f"method {self.method!r} needs a fitted teacher")
        cfg = self._config()
        corpus = check_pairs(X, y, cfg.vocab)
        teacher = None
        if self.teacher is not None:
            try:
                teacher = self.teacher.teacher_
            except NotFittedError:
                raise NotFittedError("the teacher estimator is not fitted") from None
        tcfg = replace(self._train_config(self.alpha), phase2_warmup_factor=self.phase2_warmup_factor)
        needs_pseudo = self.method in ("kd", "init+kd") or (self.method == "wd" and self.alpha < 1)
        kd_data = T.build_pseudo_corpus(teacher, corpus.sources) if needs_pseudo else corpus
        kd_cfg = replace(tcfg, alpha=self.kd_alpha)
        self.config_ = cfg
        self.generator_ = None
        self.curves_ = {}
        if self.method == "none":
            self.params_ = M.init_params(cfg, self.random_state)
            self.curves_["train"] = T.train_model(self.params_, cfg, corpus, replace(tcfg, alpha=1.0))
        elif self.method == "kd":
            self.params_ = M.init_params(cfg, self.random_state)
            self.curves_["train"] = T.train_model(self.params_, cfg, kd_data, kd_cfg, teacher)
        elif self.method in ("init", "init+kd"):
            self.params_ = T.init_baseline(teacher, cfg)
            if self.method == "init":
                self.curves_["train"] = T.train_model(self.params_, cfg, corpus, replace(tcfg, alpha=1.0))
            else:
                self.curves_["train"] = T.train_model(self.params_, cfg, kd_data, kd_cfg, teacher)
        elif self.method == "wd":
            gen = gen_mod.build(teacher.cfg, cfg, self.selected_classes, self.random_state)
            p1 = T.train_phase1(teacher, gen, kd_data, replace(tcfg, max_epochs=self.phase1_epochs))
            self.generator_ = gen
            self.params_ = T.materialize(gen, teacher, p1.direct)
            self.curves_["phase1"] = p1.curve
            self.curves_["phase2"] = T.train_phase2(self.params_, cfg, teacher, kd_data, tcfg)
        else:
            raise ValueError(f"unknown method {self.method!r}")
        return self
