"""Encoder-decoder Transformer whose weights are addressed by :class:`WeightKey`.

Layout is pre-norm: every sub-layer reads ``LayerNorm(x)`` and adds its output
back onto ``x``; each part ends with a final layer norm.  Positional tables
are learned.  Embedding and output projection are separate weights.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable

import numpy as np

from . import tensor as tn
from .tensor import Tensor, no_grad

EOS, BOS, PAD = 0, 1, 2
RESERVED = 3

ENCODER, DECODER = "encoder", "decoder"
PARTS = (ENCODER, DECODER)
SHARED_LAYER = -1

ATTN_NAMES = ("Wq", "Wk", "Wv", "Wo", "bq", "bk", "bv", "bo")
FFN_CLASSES = ("ffn.W1", "ffn.b1", "ffn.W2", "ffn.b2")
SELF_ATTN_CLASSES = tuple(f"self_attn.{n}" for n in ATTN_NAMES)
CROSS_ATTN_CLASSES = tuple(f"cross_attn.{n}" for n in ATTN_NAMES)
ENC_NORM_CLASSES = ("layernorm.g1", "layernorm.b1", "layernorm.g2", "layernorm.b2")
DEC_NORM_CLASSES = ENC_NORM_CLASSES + ("layernorm.g3", "layernorm.b3")
SHARED_CLASSES = ("embed", "pos", "final_norm.g", "final_norm.b")


class ConfigError(ValueError):
    """Invalid model, split or training configuration."""


@dataclass(frozen=True)
class ModelConfig:
    enc_depth: int = 2
    dec_depth: int = 2
    width: int = 32
    ffn_hidden: int | None = None
    heads: int = 4
    vocab: int = 16
    max_len: int = 16

    def __post_init__(self):
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 4 * self.width)
        for name in ("enc_depth", "dec_depth", "width", "ffn_hidden", "heads", "vocab", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.vocab <= RESERVED:
            raise ConfigError(f"vocab must exceed the {RESERVED} reserved ids")

    def depth(self, part: str) -> int:
        return self.enc_depth if part == ENCODER else self.dec_depth

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True, order=True)
class WeightKey:
    part: str
    layer: int
    class_id: str

    def __post_init__(self):
        if self.part not in PARTS:
            raise ValueError(f"unknown part {self.part!r}")
        if self.class_id.startswith("cross_attn.") and self.part != DECODER:
            raise ValueError("cross-attention weights exist only in the decoder")

    def __str__(self) -> str:
        return f"{self.part}/{self.layer}/{self.class_id}"

    @classmethod
    def parse(cls, s: str) -> "WeightKey":
        part, layer, class_id = s.split("/")
        return cls(part, int(layer), class_id)


TransformerParams = Dict[WeightKey, Tensor]


def layer_classes(part: str) -> tuple[str, ...]:
    """Per-layer weight classes of ``part``, in canonical order."""
    if part == ENCODER:
        return SELF_ATTN_CLASSES + FFN_CLASSES + ENC_NORM_CLASSES
    return SELF_ATTN_CLASSES + CROSS_ATTN_CLASSES + FFN_CLASSES + DEC_NORM_CLASSES


def shared_classes(part: str) -> tuple[str, ...]:
    return SHARED_CLASSES + (("output_proj",) if part == DECODER else ())


def class_shape(cfg: ModelConfig, class_id: str) -> tuple[int, ...]:
    d, f = cfg.width, cfg.ffn_hidden
    if class_id == "embed":
        return (cfg.vocab, d)
    if class_id == "pos":
        return (cfg.max_len, d)
    if class_id == "output_proj":
        return (d, cfg.vocab)
    if class_id == "ffn.W1":
        return (d, f)
    if class_id == "ffn.b1":
        return (f,)
    if class_id == "ffn.W2":
        return (f, d)
    name = class_id.split(".", 1)[1]
    if class_id.endswith("attn." + name) and name.startswith("W"):
        return (d, d)
    return (d,)


def param_keys(cfg: ModelConfig) -> list[WeightKey]:
    keys = []
    for part in PARTS:
        keys.extend(WeightKey(part, SHARED_LAYER, c) for c in shared_classes(part))
        for layer in range(cfg.depth(part)):
            keys.extend(WeightKey(part, layer, c) for c in layer_classes(part))
    return keys


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    encoder layer: 4d^2 + 4d (attention) + 2df + f + d (FFN) + 4d (norms)
    decoder layer: twice the attention, same FFN, 6d of norms
    per part: Vd + Md + 2d, plus dV for the decoder output projection
    """
    d, f, v, m = cfg.width, cfg.ffn_hidden, cfg.vocab, cfg.max_len
    attn = 4 * d * d + 4 * d
    ffn = 2 * d * f + f + d
    enc_layer = attn + ffn + 4 * d
    dec_layer = 2 * attn + ffn + 6 * d
    shared = v * d + m * d + 2 * d
    return cfg.enc_depth * enc_layer + cfg.dec_depth * dec_layer + 2 * shared + d * v


def glorot_bound(shape: tuple[int, ...]) -> float:
    fan_in, fan_out = shape
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(cfg: ModelConfig, seed: int) -> TransformerParams:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params: TransformerParams = {}
    for key in param_keys(cfg):
        shape = class_shape(cfg, key.class_id)
        if len(shape) == 2:
            b = glorot_bound(shape)
            data = rng.uniform(-b, b, size=shape)
        elif _is_gain(key.class_id):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[key] = tn.parameter(data)
    return params


def _is_gain(class_id: str) -> bool:
    return class_id.startswith("layernorm.g") or class_id == "final_norm.g"


def validate_params(params: TransformerParams, cfg: ModelConfig) -> None:
    expected = param_keys(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"parameter keys mismatch: missing {missing[:3]}, extra {extra[:3]}")
    for key in expected:
        want = class_shape(cfg, key.class_id)
        if params[key].shape != want:
            raise ConfigError(f"{key}: shape {params[key].shape}, expected {want}")


def clone_params(params: TransformerParams, requires_grad: bool = True) -> TransformerParams:
    return {
        k: Tensor(v.data.copy(), requires_grad=requires_grad, _check=False) for k, v in params.items()
    }


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

class _View:
    """Keyed access into one part/layer of a parameter map."""

    __slots__ = ("params", "part", "layer")

    def __init__(self, params, part, layer):
        self.params, self.part, self.layer = params, part, layer

    def __getitem__(self, class_id: str) -> Tensor:
        return self.params[WeightKey(self.part, self.layer, class_id)]


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return tn.add(tn.matmul(x, w), b)


def _attention(x_q: Tensor, x_kv: Tensor, p: _View, prefix: str, heads: int, mask: np.ndarray) -> Tensor:
    bsz, tq, d = x_q.shape
    tk = x_kv.shape[1]
    dh = d // heads
    q = _linear(x_q, p[prefix + "Wq"], p[prefix + "bq"])
    k = _linear(x_kv, p[prefix + "Wk"], p[prefix + "bk"])
    v = _linear(x_kv, p[prefix + "Wv"], p[prefix + "bv"])
    q = tn.transpose(tn.reshape(q, (bsz, tq, heads, dh)), (0, 2, 1, 3))
    k = tn.transpose(tn.reshape(k, (bsz, tk, heads, dh)), (0, 2, 3, 1))
    v = tn.transpose(tn.reshape(v, (bsz, tk, heads, dh)), (0, 2, 1, 3))
    scores = tn.scale(tn.matmul(q, k), 1.0 / math.sqrt(dh))
    attn = tn.softmax(scores, mask)
    ctx = tn.matmul(attn, v)
    ctx = tn.reshape(tn.transpose(ctx, (0, 2, 1, 3)), (bsz, tq, d))
    return _linear(ctx, p[prefix + "Wo"], p[prefix + "bo"])


def _ffn(x: Tensor, p: _View) -> Tensor:
    h = tn.relu(_linear(x, p["ffn.W1"], p["ffn.b1"]))
    return _linear(h, p["ffn.W2"], p["ffn.b2"])


def _check_ids(ids: np.ndarray, cfg: ModelConfig, what: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError(f"{what} ids must be a 2-D batch, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
        raise ValueError(f"{what} id out of range [0, {cfg.vocab})")
    if ids.shape[1] > cfg.max_len:
        raise ValueError(f"{what} length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    return ids


def _embed(params, part: str, ids: np.ndarray) -> Tensor:
    shared = _View(params, part, SHARED_LAYER)
    x = tn.embedding(shared["embed"], ids)
    pos = tn.embedding(shared["pos"], np.arange(ids.shape[1]))
    return tn.add(x, pos)


def encode(params: TransformerParams, cfg: ModelConfig, src_ids, src_mask=None) -> Tensor:
    src_ids = _check_ids(src_ids, cfg, "source")
    if src_mask is None:
        src_mask = src_ids != PAD
    key_mask = np.asarray(src_mask, dtype=bool)[:, None, None, :]
    x = _embed(params, ENCODER, src_ids)
    for layer in range(cfg.enc_depth):
        p = _View(params, ENCODER, layer)
        h = tn.layer_norm(x, p["layernorm.g1"], p["layernorm.b1"])
        x = tn.add(x, _attention(h, h, p, "self_attn.", cfg.heads, key_mask))
        h = tn.layer_norm(x, p["layernorm.g2"], p["layernorm.b2"])
        x = tn.add(x, _ffn(h, p))
    shared = _View(params, ENCODER, SHARED_LAYER)
    return tn.layer_norm(x, shared["final_norm.g"], shared["final_norm.b"])


def decode_logits(
    params: TransformerParams, cfg: ModelConfig, memory: Tensor, src_mask, tgt_ids, tgt_mask=None
) -> Tensor:
    tgt_ids = _check_ids(tgt_ids, cfg, "target")
    if tgt_mask is None:
        tgt_mask = tgt_ids != PAD
    t = tgt_ids.shape[1]
    causal = np.tril(np.ones((t, t), dtype=bool))
    self_mask = causal[None, None, :, :] & np.asarray(tgt_mask, dtype=bool)[:, None, None, :]
    # position 0 is always visible so every query row keeps at least one key
    self_mask[..., 0] = True
    cross_mask = np.asarray(src_mask, dtype=bool)[:, None, None, :]
    y = _embed(params, DECODER, tgt_ids)
    for layer in range(cfg.dec_depth):
        p = _View(params, DECODER, layer)
        h = tn.layer_norm(y, p["layernorm.g1"], p["layernorm.b1"])
        y = tn.add(y, _attention(h, h, p, "self_attn.", cfg.heads, self_mask))
        h = tn.layer_norm(y, p["layernorm.g2"], p["layernorm.b2"])
        y = tn.add(y, _attention(h, memory, p, "cross_attn.", cfg.heads, cross_mask))
        h = tn.layer_norm(y, p["layernorm.g3"], p["layernorm.b3"])
        y = tn.add(y, _ffn(h, p))
    shared = _View(params, DECODER, SHARED_LAYER)
    y = tn.layer_norm(y, shared["final_norm.g"], shared["final_norm.b"])
    return tn.matmul(y, shared["output_proj"])


def forward(params: TransformerParams, cfg: ModelConfig, src_ids, tgt_ids, src_mask=None, tgt_mask=None) -> Tensor:
    """Teacher-forced logits of shape ``B x T x V``.

    ``tgt_ids`` is the decoder input (BOS-shifted target).  Masks default to
    ``ids != PAD``.
    """
    src_ids = np.asarray(src_ids, dtype=np.int64)
    if src_mask is None:
        src_mask = src_ids != PAD
    memory = encode(params, cfg, src_ids, src_mask)
    return decode_logits(params, cfg, memory, src_mask, tgt_ids, tgt_mask)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _banned() -> list[int]:
    return [BOS, PAD]


def _step_logprobs(params, cfg, memory, src_mask, prefix: np.ndarray) -> np.ndarray:
    logits = decode_logits(params, cfg, memory, src_mask, prefix).data[:, -1, :]
    logp = tn.log_softmax_np(logits)
    logp[:, _banned()] = -np.inf
    return logp


def _max_steps(cfg: ModelConfig, max_steps: int | None) -> int:
    # the decoder input holds BOS plus all but the last emitted token
    cap = cfg.max_len
    return cap if max_steps is None else min(max_steps, cap)


def greedy_decode(params: TransformerParams, cfg: ModelConfig, src_ids, max_steps: int | None = None, src_mask=None) -> list[list[int]]:
    """Argmax decoding; each output excludes the terminating EOS."""
    src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
    steps = _max_steps(cfg, max_steps)
    bsz = src_ids.shape[0]
    out: list[list[int]] = [[] for _ in range(bsz)]
    if steps <= 0 or bsz == 0:
        return out
    if src_mask is None:
        src_mask = src_ids != PAD
    with no_grad():
        memory = encode(params, cfg, src_ids, src_mask)
        prefix = np.full((bsz, 1), BOS, dtype=np.int64)
        done = np.zeros(bsz, dtype=bool)
        for _ in range(steps):
            logp = _step_logprobs(params, cfg, memory, src_mask, prefix)
            nxt = logp.argmax(axis=-1)
            for i in np.flatnonzero(~done):
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all() or prefix.shape[1] >= cfg.max_len:
                break
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return out


def sequence_score(total_logprob: float, length: int, lennorm_alpha: float) -> float:
    """Length-normalized score ``sum log p / length**alpha``."""
    return total_logprob / (max(length, 1) ** lennorm_alpha)


def beam_decode(
    params: TransformerParams,
    cfg: ModelConfig,
    src_ids,
    width: int,
    lennorm_alpha: float = 1.0,
    max_steps: int | None = None,
    src_mask=None,
    return_scores: bool = False,
):
    """Beam search scored by ``sum log p / length**alpha``.

    Length counts emitted tokens including EOS.  At each step the ``width``
    best extensions are kept (ties: lower token id, then lower beam index);
    those ending in EOS move to the finished pool.  Search ends when no live
    hypothesis remains or ``max_steps`` is reached, and the best of finished
    plus still-live hypotheses is returned.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
    if src_mask is None:
        src_mask = src_ids != PAD
    src_mask = np.asarray(src_mask, dtype=bool)
    steps = _max_steps(cfg, max_steps)
    results, scores = [], []
    for i in range(src_ids.shape[0]):
        toks, score = _beam_one(params, cfg, src_ids[i : i + 1], src_mask[i : i + 1], width, lennorm_alpha, steps)
        results.append(toks)
        scores.append(score)
    return (results, scores) if return_scores else results


def _beam_one(params, cfg, src, mask, width, alpha, steps):
    if steps <= 0:
        return [], 0.0
    with no_grad():
        memory = encode(params, cfg, src, mask)
        live = [([], 0.0)]  # (tokens, summed logprob)
        finished: list[tuple[list[int], float]] = []
        for _ in range(steps):
            n = len(live)
            prefix = np.array([[BOS] + toks for toks, _ in live], dtype=np.int64)
            mem = Tensor(np.repeat(memory.data, n, axis=0), _check=False)
            logp = _step_logprobs(params, cfg, mem, np.repeat(mask, n, axis=0), prefix)
            cands = []
            for b, (toks, lp) in enumerate(live):
                for tok in range(cfg.vocab):
                    if np.isfinite(logp[b, tok]):
                        cands.append((lp + logp[b, tok], tok, b))
            cands.sort(key=lambda c: (-c[0], c[1], c[2]))
            new_live = []
            for total, tok, b in cands[:width]:
                toks = live[b][0]
                if tok == EOS:
                    finished.append((toks + [EOS], total))
                else:
                    new_live.append((toks + [tok], total))
            live = new_live
            if not live or len(live[0][0]) + 1 > cfg.max_len:
                break
        pool = finished + live
        best_toks, best_lp = pool[0]
        best = sequence_score(best_lp, len(best_toks), alpha)
        for toks, lp in pool[1:]:
            s = sequence_score(lp, len(toks), alpha)
            if s > best:
                best, best_toks = s, toks
    out = best_toks[:-1] if best_toks and best_toks[-1] == EOS else best_toks
    return list(out), best


def score_output(params, cfg, src_ids, output: list[int], finished: bool, lennorm_alpha: float) -> float:
    """Normalized score of one given output under the decoder (EOS appended
    when ``finished``)."""
    toks = list(output) + ([EOS] if finished else [])
    if not toks:
        return 0.0
    src = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
    tgt_in = np.array([[BOS] + toks[:-1]], dtype=np.int64)
    with no_grad():
        logits = forward(params, cfg, src, tgt_in).data[0]
    logp = tn.log_softmax_np(logits)
    total = float(sum(logp[t, tok] for t, tok in enumerate(toks)))
    return sequence_score(total, len(toks), lennorm_alpha)
