"""Parameter generator: maps stacked teacher weight subsets to student weights.

For a matrix class the subset is stacked into an ``I_t x O_t x L'`` tensor,
contracted along each axis in turn with learnable ``W_I`` (``I_t x I_s``),
``W_O`` (``O_t x O_s``) and ``W_L`` (``L' x 1``), and finally mapped through
``tanh(.) * W + B``.  Vector classes (biases, norm parameters) use the same
recipe without the input axis.

An axis whose teacher and student sizes agree gets no contraction matrix,
and ``W_L`` is dropped when ``L' == 1``, so equal-shape classes reduce to
the scale-and-shift map alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import tensor as tn
from .model import (
    DECODER,
    ENCODER,
    ConfigError,
    ModelConfig,
    TransformerParams,
    WeightKey,
    class_shape,
    glorot_bound,
    layer_classes,
    param_keys,
    shared_classes,
)
from .taxonomy import SubsetPlan, plan
from .tensor import ShapeError, Tensor

GEN_FIELDS = ("W_I", "W_O", "W_L", "W", "B")

# named class sets used by the per-class ablation
SELECTIONS = ("encoder", "decoder", "embed_enc", "embed_dec", "output", "all", "none")


@dataclass
class GeneratorParams:
    W: Tensor
    B: Tensor
    W_I: Tensor | None = None
    W_O: Tensor | None = None
    W_L: Tensor | None = None

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in GEN_FIELDS:
            t = getattr(self, name)
            if t is not None:
                yield name, t


def selection_classes(names: Iterable[str] | str) -> set[tuple[str, str]]:
    """Expand named sets into ``(part, class_id)`` pairs.

    ``encoder``/``decoder`` cover the per-layer classes of that part plus its
    final norm; ``embed_*`` cover token and position tables; ``output`` is the
    decoder output projection.
    """
    if isinstance(names, str):
        names = [names]
    out: set[tuple[str, str]] = set()
    for name in names:
        if isinstance(name, tuple):
            out.add(name)
        elif name == "all":
            for part in (ENCODER, DECODER):
                out.update((part, c) for c in layer_classes(part) + shared_classes(part))
        elif name == "none":
            continue
        elif name in ("encoder", "decoder"):
            part = ENCODER if name == "encoder" else DECODER
            out.update((part, c) for c in layer_classes(part))
            out.update({(part, "final_norm.g"), (part, "final_norm.b")})
        elif name in ("embed_enc", "embed_dec"):
            part = ENCODER if name == "embed_enc" else DECODER
            out.update({(part, "embed"), (part, "pos")})
        elif name == "output":
            out.add((DECODER, "output_proj"))
        else:
            raise ValueError(f"unknown class selection {name!r}; expected one of {SELECTIONS}")
    return out


def _is_norm(class_id: str) -> bool:
    return class_id.startswith("layernorm.") or class_id.startswith("final_norm.")


@dataclass
class Generator:
    teacher_cfg: ModelConfig
    student_cfg: ModelConfig
    entries: dict[WeightKey, tuple[SubsetPlan, GeneratorParams]] = field(default_factory=dict)
    selected_classes: frozenset = frozenset()

    def parameters(self) -> list[Tensor]:
        return [t for _, _, t in self.named_parameters()]

    def named_parameters(self) -> list[tuple[WeightKey, str, Tensor]]:
        out = []
        for key in sorted(self.entries):
            for name, t in self.entries[key][1].items():
                out.append((key, name, t))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"gen/{key}/{name}": t.data for key, name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = {f"gen/{key}/{name}": t for key, name, t in self.named_parameters()}
        if set(mine) != set(state):
            raise ConfigError("generator state keys do not match this generator")
        for name, t in mine.items():
            if t.shape != state[name].shape:
                raise ShapeError(f"{name}: shape {state[name].shape}, expected {t.shape}")
            t.data = np.array(state[name], dtype=tn.DTYPE)

    def n_params(self) -> int:
        return sum(t.size for t in self.parameters())


def build(
    teacher_cfg: ModelConfig,
    student_cfg: ModelConfig,
    selected_classes: Iterable[str] | str = "all",
    seed: int = 0,
    transfer_vectors: bool = True,
    transfer_norms: bool = True,
) -> Generator:
    """Create a generator for every selected student weight.

    ``W`` starts at ones and ``B`` at zeros; contraction matrices are
    Glorot-uniform.  ``transfer_vectors=False`` restricts generation to
    matrices; ``transfer_norms=False`` leaves layer-norm parameters out.
    """
    if teacher_cfg.vocab != student_cfg.vocab:
        raise ConfigError("teacher and student must share the vocabulary")
    chosen = selection_classes(selected_classes)
    if not transfer_vectors:
        chosen = {(p, c) for p, c in chosen if len(class_shape(student_cfg, c)) == 2}
    if not transfer_norms:
        chosen = {(p, c) for p, c in chosen if not _is_norm(c)}
    rng = np.random.default_rng(seed)
    entries = {}
    for sp in plan(teacher_cfg, student_cfg, param_keys(teacher_cfg)):
        if (sp.part, sp.class_id) not in chosen:
            continue
        t_shape = class_shape(teacher_cfg, sp.class_id)
        s_shape = class_shape(student_cfg, sp.class_id)
        entries[sp.student_key] = (sp, _init_gen_params(t_shape, s_shape, len(sp.source_layers), rng))
    return Generator(teacher_cfg, student_cfg, entries, frozenset(chosen))


def _glorot(shape, rng) -> Tensor:
    b = glorot_bound(shape)
    return tn.parameter(rng.uniform(-b, b, size=shape))


def _init_gen_params(t_shape, s_shape, n_layers: int, rng) -> GeneratorParams:
    gp = GeneratorParams(W=tn.parameter(np.ones(s_shape)), B=tn.parameter(np.zeros(s_shape)))
    if len(t_shape) == 2 and t_shape[0] != s_shape[0]:
        gp.W_I = _glorot((t_shape[0], s_shape[0]), rng)
    if t_shape[-1] != s_shape[-1]:
        gp.W_O = _glorot((t_shape[-1], s_shape[-1]), rng)
    if n_layers > 1:
        gp.W_L = _glorot((n_layers, 1), rng)
    return gp


def _scale_shift(t_hat: Tensor, gp: GeneratorParams) -> Tensor:
    if t_hat.shape != gp.W.shape or gp.B.shape != gp.W.shape:
        raise ShapeError(f"contracted shape {t_hat.shape} does not match W/B {gp.W.shape}/{gp.B.shape}")
    return tn.add(tn.mul(tn.tanh(t_hat), gp.W), gp.B)


def _collapse_layers(t_hat: Tensor, gp: GeneratorParams, axis: int) -> Tensor:
    if gp.W_L is not None:
        t_hat = tn.mode_product(t_hat, gp.W_L, axis)
    if t_hat.shape[axis] != 1:
        raise ShapeError(f"{t_hat.shape[axis]} stacked layers but no W_L to combine them")
    return tn.reshape(t_hat, t_hat.shape[:axis] + t_hat.shape[axis + 1 :])


def transform_subset(subset: Tensor, gp: GeneratorParams) -> Tensor:
    """``I_t x O_t x L'`` stacked teacher weights to an ``I_s x O_s`` student
    weight: input axis, then output axis, then layer axis, then scale-shift."""
    if subset.ndim != 3:
        raise ShapeError(f"expected an I_t x O_t x L' subset, got shape {subset.shape}")
    t_hat = subset
    if gp.W_I is not None:
        t_hat = tn.mode_product(t_hat, gp.W_I, 0)
    if gp.W_O is not None:
        t_hat = tn.mode_product(t_hat, gp.W_O, 1)
    return _scale_shift(_collapse_layers(t_hat, gp, 2), gp)


def transform_vector(subset: Tensor, gp: GeneratorParams) -> Tensor:
    """``O_t x L'`` stacked teacher vectors to an ``O_s`` student vector."""
    if subset.ndim != 2:
        raise ShapeError(f"expected an O_t x L' subset, got shape {subset.shape}")
    t_hat = subset
    if gp.W_O is not None:
        t_hat = tn.mode_product(t_hat, gp.W_O, 0)
    return _scale_shift(_collapse_layers(t_hat, gp, 1), gp)


def stack_subset(teacher: TransformerParams, sp: SubsetPlan) -> Tensor:
    try:
        arrays = [teacher[k].data for k in sp.source_keys]
    except KeyError as exc:
        raise ConfigError(f"teacher is missing source weight {exc.args[0]}") from None
    return tn.constant(np.stack(arrays, axis=-1))


def generate(gen: Generator, teacher: TransformerParams, student_cfg: ModelConfig | None = None) -> TransformerParams:
    """Student tensors for every selected key.  Teacher weights enter as
    constants, so gradients reach only the generator."""
    if student_cfg is not None and student_cfg != gen.student_cfg:
        raise ConfigError("student config differs from the one the generator was built for")
    out: TransformerParams = {}
    for key in sorted(gen.entries):
        sp, gp = gen.entries[key]
        subset = stack_subset(teacher, sp)
        out[key] = transform_subset(subset, gp) if subset.ndim == 3 else transform_vector(subset, gp)
    return out
