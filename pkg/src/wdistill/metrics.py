"""Evaluation: token accuracy, corpus BLEU and decode throughput."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from .data import Corpus, batch_iter, make_batch
from .tensor import ShapeError, no_grad


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hyps: Sequence[Sequence], refs: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100] with one reference per hypothesis.

    Clipped n-gram matches and totals are summed over the corpus before the
    precisions are formed; no smoothing, so any zero precision gives 0.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not refs or any(len(r) == 0 for r in refs):
        raise ValueError("references must be non-empty")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h, r = list(h), list(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)


def token_accuracy(pred_ids, gold, pad_mask) -> float:
    pred_ids, gold, mask = np.asarray(pred_ids), np.asarray(gold), np.asarray(pad_mask, dtype=bool)
    if pred_ids.shape != gold.shape or gold.shape != mask.shape:
        raise ShapeError(f"shapes differ: {pred_ids.shape}, {gold.shape}, {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no unmasked positions")
    return float(((pred_ids == gold) & mask).sum() / n)


def teacher_forced_accuracy(params, cfg: M.ModelConfig, corpus: Corpus, batch_size: int = 256) -> float:
    hit = count = 0
    with no_grad():
        for b in batch_iter(corpus, batch_size, cfg.max_len, 0, shuffle=False):
            pred = M.forward(params, cfg, b.src, b.tgt_in, b.src_mask, b.tgt_mask).data.argmax(-1)
            hit += int(((pred == b.tgt_out) & b.tgt_mask).sum())
            count += int(b.tgt_mask.sum())
    return hit / count


def decode_corpus(params, cfg: M.ModelConfig, sources: Sequence[Sequence[int]], batch_size: int = 64) -> list[list[int]]:
    out = []
    for start in range(0, len(sources), batch_size):
        chunk = [tuple(s) for s in sources[start : start + batch_size]]
        src = make_batch([(s, (M.EOS,)) for s in chunk]).src
        out.extend(M.greedy_decode(params, cfg, src, cfg.max_len - 1))
    return out


@dataclass
class BenchResult:
    sentences_per_second: float
    per_run: list[float]
    outputs: list[list[int]] = field(repr=False, default_factory=list)


def bench_decode(
    params, cfg: M.ModelConfig, sources: Sequence[Sequence[int]], repeats: int = 5, batch_size: int = 64
) -> BenchResult:
    """Greedy-decode throughput: median of ``repeats`` timed passes after one
    untimed warm-up pass."""
    if not len(sources):
        raise ValueError("benchmark sample is empty")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    outputs = decode_corpus(params, cfg, sources, batch_size)
    rates = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run = decode_corpus(params, cfg, sources, batch_size)
        rates.append(len(sources) / (time.perf_counter() - t0))
        if run != outputs:
            raise RuntimeError("decode output changed between benchmark repeats")
    return BenchResult(float(np.median(rates)), rates, outputs)


@dataclass
class EvalReport:
    token_accuracy: float
    bleu: float
    sentences_per_second: float
    params_count: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.token_accuracy <= 1.0:
            raise ValueError("token_accuracy outside [0, 1]")
        if not 0.0 <= self.bleu <= 100.0:
            raise ValueError("bleu outside [0, 100]")
        if self.sentences_per_second <= 0:
            raise ValueError("throughput must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    CSV_FIELDS = ("token_accuracy", "bleu", "sentences_per_second", "params_count")

    def csv_row(self, extra: dict | None = None) -> dict:
        row = {k: getattr(self, k) for k in self.CSV_FIELDS}
        row.update(extra or {})
        return row


def evaluate(
    params, cfg: M.ModelConfig, test: Corpus, config_echo: dict | None = None, repeats: int = 1, bench_size: int = 200
) -> EvalReport:
    """Teacher-forced token accuracy, greedy BLEU and throughput on ``test``."""
    acc = teacher_forced_accuracy(params, cfg, test)
    sources = test.sources[:bench_size]
    bench = bench_decode(params, cfg, sources, repeats=repeats)
    hyps = decode_corpus(params, cfg, test.sources) if len(test) > bench_size else bench.outputs
    refs = [t[:-1] for t in test.targets]
    return EvalReport(acc, corpus_bleu(hyps, refs), bench.sentences_per_second, M.param_count(cfg), config_echo or {})


def write_csv(rows: Sequence[dict], path=None, fieldnames=None) -> str:
    fieldnames = list(fieldnames or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(buf.getvalue())
    return buf.getvalue()
