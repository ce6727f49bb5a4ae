"""Single-file checkpoints.

Layout: an 8-byte little-endian header length ``N``, ``N`` bytes of UTF-8
JSON manifest (free-form ``meta`` plus the ordered ``{key, shape}`` list),
then each tensor as raw little-endian float64 in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from . import generator as gen_mod
from . import tensor as tn
from .model import ModelConfig, TransformerParams, WeightKey, param_keys, validate_params


class CheckpointError(ValueError):
    pass


def _encode_manifest(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``tensors`` (insertion order is preserved) with ``meta``."""
    entries = [{"key": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    header = _encode_manifest({"meta": meta or {}, "tensors": entries})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[:8])
    try:
        manifest = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest") from exc
    offset = 8 + n
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: payload truncated at {entry['key']}")
        tensors[entry["key"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return manifest["meta"], tensors


def digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_params(path, params: TransformerParams, cfg: ModelConfig, meta: dict | None = None) -> None:
    validate_params(params, cfg)
    tensors = {str(k): params[k].data for k in param_keys(cfg)}
    save_checkpoint(path, tensors, {"kind": "transformer", "config": cfg.to_dict(), **(meta or {})})


def load_params(path, requires_grad: bool = True) -> tuple[TransformerParams, ModelConfig, dict]:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "transformer":
        raise CheckpointError(f"{path}: not a transformer checkpoint")
    cfg = ModelConfig.from_dict(meta["config"])
    params = {WeightKey.parse(k): tn.Tensor(v, requires_grad=requires_grad) for k, v in tensors.items()}
    validate_params(params, cfg)
    return params, cfg, meta


def save_generator(path, gen: gen_mod.Generator, meta: dict | None = None) -> None:
    info = {
        "kind": "generator",
        "teacher_config": gen.teacher_cfg.to_dict(),
        "student_config": gen.student_cfg.to_dict(),
        "selected": sorted([list(p) for p in gen.selected_classes]),
        **(meta or {}),
    }
    save_checkpoint(path, gen.state_dict(), info)


def load_generator(path) -> tuple[gen_mod.Generator, dict]:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "generator":
        raise CheckpointError(f"{path}: not a generator checkpoint")
    teacher_cfg = ModelConfig.from_dict(meta["teacher_config"])
    student_cfg = ModelConfig.from_dict(meta["student_config"])
    pairs = [tuple(p) for p in meta["selected"]]
    gen = gen_mod.build(teacher_cfg, student_cfg, pairs, seed=0)
    gen.load_state_dict(tensors)
    return gen, meta
