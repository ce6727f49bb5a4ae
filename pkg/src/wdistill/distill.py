"""Training procedures: plain training, word/sequence-level KD, the two
weight-distillation phases, and the copy-and-slice initialization baseline.

Every objective has the form ``(1 - alpha) * KD + alpha * GT`` where KD is
cross-entropy against the teacher's softmax and GT is cross-entropy against
the reference tokens.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import generator as gen_mod
from . import model as M
from . import tensor as tn
from .data import Batch, Corpus, batch_iter, make_batch
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    base_lr: float = 2e-3
    warmup_steps: int = 100
    max_epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    phase2_warmup_factor: float = 0.25
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")

    def phase2(self) -> "TrainConfig":
        """Same settings with the warmup shortened by ``phase2_warmup_factor``."""
        warm = max(1, int(round(self.warmup_steps * self.phase2_warmup_factor)))
        return replace(self, warmup_steps=warm)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def inverse_sqrt_lr(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` updates, then decay with
    ``1/sqrt(step)``.  ``step`` counts from 1."""
    step = max(step, 1)
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def lr(self) -> float:
        return inverse_sqrt_lr(self.t, self.cfg.base_lr, self.cfg.warmup_steps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        self.t += 1
        c = self.cfg
        lr = self.lr()
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g
            if lr:
                p.data = p.data - lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + c.eps)
        return lr


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    kd_term: float
    gt_term: float
    total: float
    alpha: float
    loss: Tensor = field(repr=False)


def _flat(logits: Tensor) -> Tensor:
    return tn.reshape(logits, (-1, logits.shape[-1])) if logits.ndim == 3 else logits


def kd_word_loss(student_logits: Tensor, teacher_logits, pad_mask) -> Tensor:
    """Cross-entropy of the student against the teacher's output distribution
    (temperature 1), averaged over unmasked positions."""
    s = _flat(student_logits)
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    t = t.reshape(-1, t.shape[-1])
    if t.shape != s.shape:
        raise tn.ShapeError(f"student logits {s.shape} vs teacher logits {t.shape}")
    return tn.softmax_cross_entropy(s, tn._softmax_np(t), np.asarray(pad_mask).reshape(-1))


def gt_loss(student_logits: Tensor, gold_ids, pad_mask) -> Tensor:
    s = _flat(student_logits)
    return tn.softmax_cross_entropy(s, tn.one_hot(gold_ids, s.shape[-1]), np.asarray(pad_mask).reshape(-1))


def combined_loss(student_logits: Tensor, teacher_logits, gold_ids, alpha: float, pad_mask) -> LossBreakdown:
    """``(1 - alpha) * KD + alpha * GT``.  With ``alpha == 1`` the teacher
    logits may be ``None`` and the KD term is reported as 0."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    gt = gt_loss(student_logits, gold_ids, pad_mask)
    if teacher_logits is None:
        if alpha != 1.0:
            raise ValueError("teacher logits are required when alpha < 1")
        return LossBreakdown(0.0, gt.item(), gt.item(), alpha, gt)
    kd = kd_word_loss(student_logits, teacher_logits, pad_mask)
    total = tn.add(tn.scale(kd, 1.0 - alpha), tn.scale(gt, alpha))
    return LossBreakdown(kd.item(), gt.item(), total.item(), alpha, total)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class CurveRow:
    phase: str
    epoch: int
    step: int
    kd_term: float | None
    gt_term: float | None
    total: float | None
    valid_loss: float | None

    FIELDS = ("phase", "epoch", "step", "kd_term", "gt_term", "total", "valid_loss")

    def as_list(self) -> list:
        return ["" if v is None else v for v in (getattr(self, f) for f in self.FIELDS)]


@dataclass
class Teacher:
    params: M.TransformerParams
    cfg: M.ModelConfig


def teacher_logits(teacher: Teacher, batch: Batch) -> np.ndarray:
    with no_grad():
        return M.forward(teacher.params, teacher.cfg, batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask).data


def validation_loss(params, cfg: M.ModelConfig, corpus: Corpus, batch_size: int = 256) -> float:
    """Reference cross-entropy per target token, teacher forced."""
    total, count = 0.0, 0
    with no_grad():
        for batch in batch_iter(corpus, batch_size, cfg.max_len, 0, shuffle=False):
            logits = M.forward(params, cfg, batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask)
            n = int(batch.tgt_mask.sum())
            total += gt_loss(logits, batch.tgt_out, batch.tgt_mask).item() * n
            count += n
    return total / count


def _run(
    phase: str,
    student_fn: Callable[[], M.TransformerParams],
    trainables: list[Tensor],
    student_cfg: M.ModelConfig,
    data: Corpus,
    cfg: TrainConfig,
    teacher: Teacher | None,
    valid: Corpus | None,
) -> list[CurveRow]:
    if cfg.alpha < 1.0 and teacher is None:
        raise ValueError("a teacher is required when alpha < 1")
    opt = Adam(trainables, cfg)
    rows: list[CurveRow] = []

    def record_valid(epoch):
        if valid is not None:
            with no_grad():
                vl = validation_loss(student_fn(), student_cfg, valid)
            rows.append(CurveRow(phase, epoch, opt.t, None, None, None, vl))

    record_valid(0)
    for epoch in range(1, cfg.max_epochs + 1):
        for batch in batch_iter(data, cfg.batch_size, student_cfg.max_len, cfg.seed, epoch):
            t_logits = teacher_logits(teacher, batch) if cfg.alpha < 1.0 else None
            try:
                params = student_fn()
                logits = M.forward(params, student_cfg, batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask)
                lb = combined_loss(logits, t_logits, batch.tgt_out, cfg.alpha, batch.tgt_mask)
                opt.zero_grad()
                lb.loss.backward()
                for p in trainables:
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise NonFiniteError("non-finite gradient")
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"{phase}: non-finite values at epoch {epoch}, step {opt.t + 1}, lr {opt.lr():.3g}: {exc}"
                ) from exc
            rows.append(CurveRow(phase, epoch, opt.t, lb.kd_term, lb.gt_term, lb.total, None))
            opt.step()
        record_valid(epoch)
    opt.zero_grad()
    return rows


def train_model(
    params: M.TransformerParams,
    cfg: M.ModelConfig,
    data: Corpus,
    train_cfg: TrainConfig,
    teacher: Teacher | None = None,
    valid: Corpus | None = None,
    phase: str = "train",
) -> list[CurveRow]:
    """Train ``params`` in place on ``data``; returns the loss curve."""
    trainables = [params[k] for k in M.param_keys(cfg)]
    for t in trainables:
        t.requires_grad = True
    return _run(phase, lambda: params, trainables, cfg, data, train_cfg, teacher, valid)


@dataclass
class Phase1Result:
    generator: gen_mod.Generator
    direct: M.TransformerParams
    curve: list[CurveRow]


def direct_params(gen: gen_mod.Generator, seed: int) -> M.TransformerParams:
    """Randomly initialized student weights for classes the generator does
    not produce; these train directly alongside the generator."""
    full = M.init_params(gen.student_cfg, seed)
    return {k: v for k, v in full.items() if k not in gen.entries}


def assemble(gen: gen_mod.Generator, teacher: Teacher, direct: M.TransformerParams) -> M.TransformerParams:
    out = dict(direct)
    out.update(gen_mod.generate(gen, teacher.params))
    return out


def train_phase1(
    teacher: Teacher,
    gen: gen_mod.Generator,
    data: Corpus,
    cfg: TrainConfig,
    valid: Corpus | None = None,
    direct: M.TransformerParams | None = None,
) -> Phase1Result:
    """Fit the generator so that the student it emits minimizes the combined
    loss.  The student is regenerated from the frozen teacher every step."""
    if direct is None:
        direct = direct_params(gen, cfg.seed)
    trainables = gen.parameters() + [direct[k] for k in sorted(direct)]
    frozen = M.clone_params(teacher.params, requires_grad=False)
    frozen_teacher = Teacher(frozen, teacher.cfg)
    curve = _run(
        "phase1",
        lambda: assemble(gen, frozen_teacher, direct),
        trainables,
        gen.student_cfg,
        data,
        cfg,
        frozen_teacher,
        valid,
    )
    return Phase1Result(gen, direct, curve)


def materialize(gen: gen_mod.Generator, teacher: Teacher, direct: M.TransformerParams) -> M.TransformerParams:
    """Detached copy of the full student emitted by the generator."""
    with no_grad():
        params = assemble(gen, teacher, direct)
    return {k: Tensor(params[k].data.copy(), requires_grad=True, _check=False) for k in M.param_keys(gen.student_cfg)}


def train_phase2(
    student: M.TransformerParams,
    student_cfg: M.ModelConfig,
    teacher: Teacher,
    data: Corpus,
    cfg: TrainConfig,
    valid: Corpus | None = None,
) -> list[CurveRow]:
    """Fine-tune the materialized student directly (warmup scaled by
    ``cfg.phase2_warmup_factor``)."""
    return train_model(student, student_cfg, data, cfg.phase2(), teacher, valid, phase="phase2")


# ---------------------------------------------------------------------------
# data-side KD and initialization baseline
# ---------------------------------------------------------------------------

def build_pseudo_corpus(
    teacher: Teacher,
    sources: Sequence[Sequence[int]],
    beam_width: int = 1,
    lennorm_alpha: float = 1.0,
    batch_size: int = 256,
) -> Corpus:
    """Replace targets with the teacher's decodes of ``sources``."""
    sources = [tuple(s) for s in sources]
    pairs = []
    for start in range(0, len(sources), batch_size):
        chunk = sources[start : start + batch_size]
        src = make_batch([(s, (M.EOS,)) for s in chunk]).src
        if beam_width == 1:
            outs = M.greedy_decode(teacher.params, teacher.cfg, src, teacher.cfg.max_len - 1)
        else:
            outs = M.beam_decode(teacher.params, teacher.cfg, src, beam_width, lennorm_alpha, teacher.cfg.max_len - 1)
        pairs.extend((s, tuple(o) + (M.EOS,)) for s, o in zip(chunk, outs))
    return Corpus(tuple(pairs), teacher.cfg.vocab, "pseudo")


def init_baseline(teacher: Teacher, student_cfg: M.ModelConfig) -> M.TransformerParams:
    """Copy the teacher's bottom layers and take the leading sub-block of
    every weight."""
    tc = teacher.cfg
    for name in ("enc_depth", "dec_depth", "width", "ffn_hidden", "max_len"):
        if getattr(student_cfg, name) > getattr(tc, name):
            raise M.ConfigError(f"student {name} {getattr(student_cfg, name)} exceeds teacher {getattr(tc, name)}")
    if student_cfg.vocab != tc.vocab:
        raise M.ConfigError("teacher and student must share the vocabulary")
    out = {}
    for key in M.param_keys(student_cfg):
        shape = M.class_shape(student_cfg, key.class_id)
        src = teacher.params[key].data
        block = src[tuple(slice(0, n) for n in shape)]
        out[key] = tn.parameter(block)
    return out
