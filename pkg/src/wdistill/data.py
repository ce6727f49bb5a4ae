"""Synthetic sequence-to-sequence corpora, TSV I/O and padded batching."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .model import EOS, PAD, RESERVED, BOS

log = logging.getLogger(__name__)

TASKS = ("copy", "reverse", "sort")

Pair = tuple[tuple[int, ...], tuple[int, ...]]


@dataclass(frozen=True)
class Corpus:
    pairs: tuple[Pair, ...]
    vocab: int
    task: str = "file"

    def __post_init__(self):
        for src, tgt in self.pairs:
            if any(t < 0 or t >= self.vocab for t in src + tgt):
                raise ValueError(f"token id outside [0, {self.vocab})")
            if not tgt or tgt[-1] != EOS:
                raise ValueError("every target must end with EOS")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[tuple[int, ...]]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[tuple[int, ...]]:
        return [t for _, t in self.pairs]


def task_target(task: str, src: Sequence[int]) -> tuple[int, ...]:
    if task == "copy":
        out = tuple(src)
    elif task == "reverse":
        out = tuple(reversed(src))
    elif task == "sort":
        out = tuple(sorted(src))
    else:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    return out + (EOS,)


def gen_synthetic(
    task: str,
    n: int,
    len_range: tuple[int, int],
    vocab: int,
    seed: int,
    exclude: set[tuple[int, ...]] | None = None,
) -> Corpus:
    """Draw ``n`` random sources with lengths in ``len_range`` (inclusive)
    from the non-reserved ids and pair each with its task target.

    Sources listed in ``exclude`` are redrawn, which keeps held-out splits
    disjoint from training data.
    """
    lo, hi = len_range
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if n < 0 or lo < 1 or hi < lo:
        raise ValueError(f"invalid sizes n={n}, len_range={len_range}")
    if vocab <= RESERVED + 1:
        raise ValueError(f"vocab {vocab} leaves fewer than two symbols after reserved ids")
    rng = np.random.default_rng(seed)
    exclude = exclude or set()
    pairs = []
    attempts = 0
    while len(pairs) < n:
        attempts += 1
        if attempts > 100 * (n + 1):
            raise ValueError("could not draw enough sources outside the exclusion set")
        length = int(rng.integers(lo, hi + 1))
        src = tuple(int(t) for t in rng.integers(RESERVED, vocab, size=length))
        if src in exclude:
            continue
        pairs.append((src, task_target(task, src)))
    return Corpus(tuple(pairs), vocab, task)


def load_tsv(path: str | Path, vocab: int) -> Corpus:
    """One pair per line: space-separated source ids, a tab, target ids.
    EOS is appended to targets that lack it."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            src_s, tgt_s = line.split("\t")
            src = tuple(int(t) for t in src_s.split())
            tgt = tuple(int(t) for t in tgt_s.split())
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed line") from exc
        if not tgt or tgt[-1] != EOS:
            tgt = tgt + (EOS,)
        pairs.append((src, tgt))
    return Corpus(tuple(pairs), vocab, "file")


def save_tsv(corpus: Corpus, path: str | Path) -> None:
    lines = [" ".join(map(str, s)) + "\t" + " ".join(map(str, t)) for s, t in corpus.pairs]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


@dataclass(frozen=True)
class Batch:
    src: np.ndarray      # B x S, PAD after each source
    tgt_in: np.ndarray   # B x T, BOS + target[:-1]
    tgt_out: np.ndarray  # B x T, target incl. EOS
    src_mask: np.ndarray
    tgt_mask: np.ndarray

    def __len__(self) -> int:
        return self.src.shape[0]

    def pairs(self) -> list[Pair]:
        out = []
        for i in range(len(self)):
            src = tuple(int(t) for t in self.src[i][self.src_mask[i]])
            tgt = tuple(int(t) for t in self.tgt_out[i][self.tgt_mask[i]])
            out.append((src, tgt))
        return out


def make_batch(pairs: Sequence[Pair]) -> Batch:
    bsz = len(pairs)
    s_len = max(len(s) for s, _ in pairs)
    t_len = max(len(t) for _, t in pairs)
    src = np.full((bsz, s_len), PAD, dtype=np.int64)
    tgt_in = np.full((bsz, t_len), PAD, dtype=np.int64)
    tgt_out = np.full((bsz, t_len), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = s
        tgt_out[i, : len(t)] = t
        tgt_in[i, 0] = BOS
        tgt_in[i, 1 : len(t)] = t[:-1]
    src_mask = np.zeros_like(src, dtype=bool)
    tgt_mask = np.zeros_like(tgt_out, dtype=bool)
    for i, (s, t) in enumerate(pairs):
        src_mask[i, : len(s)] = True
        tgt_mask[i, : len(t)] = True
    return Batch(src, tgt_in, tgt_out, src_mask, tgt_mask)


def filter_length(corpus: Corpus, max_len: int) -> tuple[list[Pair], int]:
    kept = [p for p in corpus.pairs if len(p[0]) <= max_len and len(p[1]) <= max_len]
    return kept, len(corpus.pairs) - len(kept)


def batch_iter(
    corpus: Corpus,
    batch_size: int,
    max_len: int,
    seed: int,
    epoch: int = 0,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield padded batches for one epoch.

    Pairs longer than ``max_len`` on either side are dropped (with a logged
    warning).  The shuffle order is drawn from ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    kept, dropped = filter_length(corpus, max_len)
    if dropped:
        log.warning("dropped %d pair(s) longer than max_len=%d", dropped, max_len)
    if not kept:
        raise ValueError("corpus is empty after length filtering")
    order = np.arange(len(kept))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(kept))
    for start in range(0, len(kept), batch_size):
        yield make_batch([kept[i] for i in order[start : start + batch_size]])
