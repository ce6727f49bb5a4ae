"""Grouping teacher weight instances by class and splitting groups into
contiguous per-student-layer subsets.

Layer indices are 0-based throughout: student layer ``i`` draws from teacher
layers ``i*L' .. (i+1)*L' - 1`` where ``L' = L_t / L_s``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from .model import (
    SHARED_LAYER,
    ConfigError,
    ModelConfig,
    WeightKey,
    layer_classes,
    shared_classes,
)


@dataclass(frozen=True)
class WeightGroup:
    part: str
    class_id: str
    layers: tuple[int, ...]

    @property
    def shared(self) -> bool:
        return self.layers == (SHARED_LAYER,)

    @property
    def keys(self) -> list[WeightKey]:
        return [WeightKey(self.part, layer, self.class_id) for layer in self.layers]

    def __len__(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class SubsetPlan:
    part: str
    class_id: str
    student_layer: int
    source_layers: tuple[int, ...]

    @property
    def student_key(self) -> WeightKey:
        return WeightKey(self.part, self.student_layer, self.class_id)

    @property
    def source_keys(self) -> list[WeightKey]:
        return [WeightKey(self.part, layer, self.class_id) for layer in self.source_layers]


def group(params: Mapping[WeightKey, object] | Iterable[WeightKey], part: str) -> list[WeightGroup]:
    """One group per weight class of ``part``; instances ordered by layer.

    Layer-independent weights (embeddings, positions, final norm, output
    projection) form groups of size one.
    """
    by_class: dict[str, list[int]] = {}
    for key in params:
        if key.part == part:
            by_class.setdefault(key.class_id, []).append(key.layer)
    order = list(shared_classes(part)) + list(layer_classes(part))
    groups = []
    for class_id in order:
        if class_id in by_class:
            groups.append(WeightGroup(part, class_id, tuple(sorted(by_class.pop(class_id)))))
    for class_id in sorted(by_class):
        groups.append(WeightGroup(part, class_id, tuple(sorted(by_class[class_id]))))
    return groups


def check_divisible(teacher_depth: int, student_depth: int, part: str = "") -> int:
    if student_depth < 1 or teacher_depth < 1:
        raise ConfigError(f"{part} depths must be >= 1")
    if teacher_depth % student_depth:
        raise ConfigError(
            f"{part} teacher depth {teacher_depth} is not divisible by student depth {student_depth}"
        )
    return teacher_depth // student_depth


def split(grp: WeightGroup, student_depth: int) -> list[SubsetPlan]:
    if grp.shared:
        return [SubsetPlan(grp.part, grp.class_id, SHARED_LAYER, grp.layers)]
    step = check_divisible(len(grp), student_depth, grp.part)
    return [
        SubsetPlan(grp.part, grp.class_id, i, grp.layers[i * step : (i + 1) * step])
        for i in range(student_depth)
    ]


def plan(teacher_cfg: ModelConfig, student_cfg: ModelConfig, keys: Iterable[WeightKey]) -> list[SubsetPlan]:
    """Subset plans for both parts; encoder and decoder are split independently."""
    keys = list(keys)
    plans = []
    for part in ("encoder", "decoder"):
        check_divisible(teacher_cfg.depth(part), student_cfg.depth(part), part)
        for grp in group(keys, part):
            plans.extend(split(grp, student_cfg.depth(part)))
    return plans
