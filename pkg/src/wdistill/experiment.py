"""Experiment configuration and the per-method runs behind the CLI."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import distill as T
from . import generator as gen_mod
from . import metrics as E
from . import model as M
from .data import Corpus, gen_synthetic, load_tsv

log = logging.getLogger(__name__)

METHODS = ("none", "kd", "wd", "init", "init+kd")


@dataclass(frozen=True)
class TaskSpec:
    name: str = "reverse"
    vocab: int = 16
    min_len: int = 3
    max_len: int = 8
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 500
    data_seed: int = 1
    train_path: str | None = None
    valid_path: str | None = None
    test_path: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    teacher: M.ModelConfig = field(default_factory=lambda: M.ModelConfig(2, 2, 32, heads=4, vocab=16, max_len=12))
    student: M.ModelConfig = field(default_factory=lambda: M.ModelConfig(2, 1, 16, heads=2, vocab=16, max_len=12))
    teacher_train: T.TrainConfig = field(
        default_factory=lambda: T.TrainConfig(alpha=1.0, base_lr=3e-3, warmup_steps=200, max_epochs=20)
    )
    student_train: T.TrainConfig = field(
        default_factory=lambda: T.TrainConfig(alpha=0.5, base_lr=3e-3, warmup_steps=200, max_epochs=4)
    )
    phase1: T.TrainConfig = field(
        default_factory=lambda: T.TrainConfig(alpha=0.5, base_lr=3e-3, warmup_steps=200, max_epochs=3)
    )
    selected_classes: tuple[str, ...] = ("all",)
    transfer_vectors: bool = True
    transfer_norms: bool = True
    pseudo_data: bool = True
    # alpha for the kd / init+kd baselines: 1.0 is plain training on teacher
    # decodes (sequence-level KD); below 1 mixes in the word-level term
    kd_alpha: float = 1.0
    seeds: tuple[int, ...] = (0, 1, 2)
    out: str = "runs/default"
    bench_repeats: int = 5
    bench_size: int = 200

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if not 0.0 <= self.kd_alpha <= 1.0:
            raise ValueError(f"kd_alpha must lie in [0, 1], got {self.kd_alpha}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selected_classes"] = list(self.selected_classes)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d or {})
        base = cls()
        kw = {}
        for name, typ in (("task", TaskSpec), ("teacher", M.ModelConfig), ("student", M.ModelConfig)):
            if name in d:
                given = d.pop(name) or {}
                merged = {**asdict(getattr(base, name)), **given}
                if name != "task" and "ffn_hidden" not in given:
                    # width given without ffn_hidden: keep the 4x rule
                    merged["ffn_hidden"] = None
                kw[name] = typ(**merged)
        for name in ("teacher_train", "student_train", "phase1"):
            if name in d:
                kw[name] = T.TrainConfig(**{**asdict(getattr(base, name)), **d.pop(name)})
        for name in ("selected_classes", "seeds"):
            if name in d:
                v = d.pop(name)
                kw[name] = tuple([v] if isinstance(v, (str, int)) else v)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw.update(d)
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "ExperimentConfig":
        raw = yaml.safe_load(Path(path).read_text()) if path else {}
        cfg = cls.from_dict(raw or {})
        return cfg.with_overrides(overrides or {})

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        if not overrides:
            return self
        merged = self.to_dict()
        for k, v in overrides.items():
            merged[k] = v
        return ExperimentConfig.from_dict(merged)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


@dataclass
class Splits:
    train: Corpus
    valid: Corpus
    test: Corpus


def make_data(task: TaskSpec) -> Splits:
    """Train/valid/test corpora; held-out sources never occur in training."""
    if task.train_path:
        return Splits(
            load_tsv(task.train_path, task.vocab),
            load_tsv(task.valid_path or task.train_path, task.vocab),
            load_tsv(task.test_path or task.valid_path or task.train_path, task.vocab),
        )
    lr = (task.min_len, task.max_len)
    train = gen_synthetic(task.name, task.n_train, lr, task.vocab, task.data_seed)
    seen = set(train.sources)
    valid = gen_synthetic(task.name, task.n_valid, lr, task.vocab, task.data_seed + 1000, exclude=seen)
    seen |= set(valid.sources)
    test = gen_synthetic(task.name, task.n_test, lr, task.vocab, task.data_seed + 2000, exclude=seen)
    return Splits(train, valid, test)


@dataclass
class RunResult:
    params: M.TransformerParams
    cfg: M.ModelConfig
    report: E.EvalReport
    curves: dict[str, list[T.CurveRow]]
    generator: gen_mod.Generator | None = None
    echo: dict = field(default_factory=dict)


def _report(params, mcfg, splits: Splits, cfg: ExperimentConfig, echo: dict, repeats: int = 1) -> E.EvalReport:
    return E.evaluate(params, mcfg, splits.test, echo, repeats=repeats, bench_size=cfg.bench_size)


def run_teacher(cfg: ExperimentConfig, splits: Splits | None = None) -> RunResult:
    splits = splits or make_data(cfg.task)
    params = M.init_params(cfg.teacher, cfg.teacher_train.seed)
    tcfg = replace(cfg.teacher_train, alpha=1.0)
    curve = T.train_model(params, cfg.teacher, splits.train, tcfg, valid=splits.valid, phase="teacher")
    echo = {"role": "teacher", "experiment": cfg.to_dict()}
    return RunResult(params, cfg.teacher, _report(params, cfg.teacher, splits, cfg, echo), {"teacher": curve}, echo=echo)


class StudentRunner:
    """Runs student methods against one trained teacher, caching the
    teacher's pseudo-parallel corpus across runs."""

    def __init__(self, cfg: ExperimentConfig, teacher: T.Teacher, splits: Splits | None = None):
        self.cfg = cfg
        self.teacher = teacher
        self.splits = splits or make_data(cfg.task)
        self._pseudo: Corpus | None = None

    @property
    def pseudo(self) -> Corpus:
        if self._pseudo is None:
            self._pseudo = T.build_pseudo_corpus(self.teacher, self.splits.train.sources)
        return self._pseudo

    def _kd_data(self) -> Corpus:
        return self.pseudo if self.cfg.pseudo_data else self.splits.train

    def run(
        self,
        method: str,
        seed: int,
        selected_classes=None,
        alpha: float | None = None,
    ) -> RunResult:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        cfg = self.cfg
        scfg = cfg.student
        train_cfg = replace(cfg.student_train, seed=seed)
        p1_cfg = replace(cfg.phase1, seed=seed)
        if method in ("kd", "init+kd"):
            train_cfg = replace(train_cfg, alpha=cfg.kd_alpha)
        if alpha is not None:
            train_cfg = replace(train_cfg, alpha=alpha)
            p1_cfg = replace(p1_cfg, alpha=alpha)
        selected = tuple(selected_classes or cfg.selected_classes)
        valid = self.splits.valid
        curves: dict[str, list[T.CurveRow]] = {}
        gen = None
        if method == "none":
            train_cfg = replace(train_cfg, alpha=1.0)
            params = M.init_params(scfg, seed)
            curves["train"] = T.train_model(params, scfg, self.splits.train, train_cfg, valid=valid)
        elif method in ("init", "init+kd"):
            params = T.init_baseline(self.teacher, scfg)
            if method == "init":
                train_cfg = replace(train_cfg, alpha=1.0)
                data = self.splits.train
            else:
                data = self._kd_data()
            curves["train"] = T.train_model(params, scfg, data, train_cfg, self.teacher, valid)
        elif method == "kd":
            params = M.init_params(scfg, seed)
            curves["train"] = T.train_model(params, scfg, self._kd_data(), train_cfg, self.teacher, valid)
        else:
            # without the KD term there is no reason to train on teacher decodes
            data = self.splits.train if train_cfg.alpha == 1.0 and p1_cfg.alpha == 1.0 else self._kd_data()
            gen = gen_mod.build(
                self.teacher.cfg, scfg, selected, seed, cfg.transfer_vectors, cfg.transfer_norms
            )
            p1 = T.train_phase1(self.teacher, gen, data, p1_cfg, valid)
            curves["phase1"] = p1.curve
            params = T.materialize(gen, self.teacher, p1.direct)
            curves["phase2"] = T.train_phase2(params, scfg, self.teacher, data, train_cfg, valid)
        echo = {
            "role": "student",
            "method": method,
            "seed": seed,
            "selected_classes": list(selected),
            "alpha": train_cfg.alpha,
            "student_train": train_cfg.to_dict(),
            "phase1": p1_cfg.to_dict() if method == "wd" else None,
            "experiment": cfg.to_dict(),
        }
        report = _report(params, scfg, self.splits, cfg, echo)
        return RunResult(params, scfg, report, curves, gen, echo)


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=float)))
