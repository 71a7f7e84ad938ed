"""Chunk, dynamic-right-context and per-step attention masks.

Masks are boolean ``query x key`` matrices (``True`` = may attend).  Chunk and
DRC masks also carry their compact per-chunk interval form, which is the
canonical representation; the dense matrix is derived from it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidConfig, InvalidOffset


@dataclass(frozen=True)
class ContextConfig:
    """Chunking / context hyperparameters, all in sub-sampled frames."""

    c0: int = 10
    r0: int = 0
    n: int = 3
    d_step: int = 3
    p: float = 0.75
    l_att: int = 60
    kernel_size: int = 15
    frame_ms: float = 40.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise InvalidConfig(f"p must lie in [0, 1], got {self.p}")
        if self.c0 < 1:
            raise InvalidConfig(f"c0 must be >= 1, got {self.c0}")
        if self.r0 < 0 or self.n < 0:
            raise InvalidConfig("r0 and n must be non-negative")
        if self.d_step < 1:
            raise InvalidConfig(f"d_step must be >= 1, got {self.d_step}")
        if self.l_att < 0:
            raise InvalidConfig(f"l_att must be >= 0, got {self.l_att}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidConfig(f"kernel_size must be odd, got {self.kernel_size}")
        if self.frame_ms <= 0:
            raise InvalidConfig("frame_ms must be positive")

    @property
    def l_conv(self) -> int:
        return (self.kernel_size - 1) // 2


@dataclass(frozen=True)
class ContextRanges:
    chunk_sizes: tuple[int, ...]
    right_sizes: tuple[int, ...]

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.chunk_sizes, self.right_sizes))


@dataclass(frozen=True)
class ChunkInterval:
    """One row-block of a chunk/DRC mask.

    Rows ``[start, start + cur_c)`` see columns ``[left, start + cur_c)``,
    both clipped to the mask size by the consumer.
    """

    start: int
    cur_c: int
    left: int
    extended: bool = False
    chunk: int = 0  # base chunk size c; cur_c - chunk is the extension

    @property
    def chunk_end(self) -> int:
        return self.start + (self.chunk or self.cur_c)


@dataclass
class AttnMask:
    allowed: np.ndarray
    intervals: tuple[ChunkInterval, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=bool)
        if self.allowed.ndim != 2:
            raise ValueError("mask must be two-dimensional")

    @property
    def size(self) -> int:
        return self.allowed.shape[-1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape

    def __eq__(self, other):
        if not isinstance(other, AttnMask):
            return NotImplemented
        return self.allowed.shape == other.allowed.shape and bool(
            np.array_equal(self.allowed, other.allowed)
        )

    def key_window(self, row: int) -> tuple[int, int]:
        """First and last allowed key of ``row`` (rows are contiguous here)."""
        cols = np.flatnonzero(self.allowed[row])
        return int(cols[0]), int(cols[-1])

    def to_text(self) -> str:
        return "".join("".join("1" if v else "0" for v in row) + "\n" for row in self.allowed)

    def to_pgm(self) -> str:
        h, w = self.allowed.shape
        lines = ["P2", f"{w} {h}", "255"]
        lines += [" ".join("255" if v else "0" for v in row) for row in self.allowed]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path, fmt: str = "txt") -> None:
        text = self.to_pgm() if fmt == "pgm" else self.to_text()
        Path(path).write_text(text)

    @classmethod
    def from_text(cls, text: str) -> "AttnMask":
        rows = [line.strip() for line in text.splitlines() if line.strip()]
        return cls(np.array([[ch == "1" for ch in row] for row in rows], dtype=bool))


def context_ranges(cfg: ContextConfig) -> ContextRanges:
    """Chunk and right-context ranges ``C``/``R`` used for training.

    ``r_i = r_{i-1} + d_step`` and ``c_i = c0 + r_i``, so for the default
    config ``C = [10, 13, 16, 19]`` and ``R = [0, 3, 6, 9]``.
    """
    rights = [cfg.r0 + i * cfg.d_step for i in range(cfg.n + 1)]
    chunks = [cfg.c0 + r for r in rights]
    for c, r in zip(chunks, rights):
        if r >= c:
            raise InvalidConfig(f"invalid (c, r) pair ({c}, {r}): need r < c")
    return ContextRanges(tuple(chunks), tuple(rights))


def _check_sizes(size: int, l: int, c: int) -> None:
    if size < 1 or c < 1 or l < 0:
        raise InvalidConfig(f"need size >= 1, c >= 1, l >= 0 (got size={size}, c={c}, l={l})")


def intervals_to_dense(size: int, intervals: Iterable[ChunkInterval]) -> np.ndarray:
    allowed = np.zeros((size, size), dtype=bool)
    for iv in intervals:
        hi = min(size, iv.start + iv.cur_c)
        allowed[iv.start:hi, max(0, iv.left):hi] = True
    return allowed


def chunk_intervals(size: int, l: int, c: int) -> tuple[ChunkInterval, ...]:
    _check_sizes(size, l, c)
    return tuple(ChunkInterval(i, c, max(0, i - l), False, c) for i in range(0, size, c))


def chunk_mask(size: int, l: int, c: int) -> AttnMask:
    """Conventional chunk mask: each frame sees its chunk plus ``l`` frames of history."""
    ivs = chunk_intervals(size, l, c)
    return AttnMask(intervals_to_dense(size, ivs), ivs)


def drc_intervals(size: int, l: int, c: int, r: int, p: float,
                  rng: np.random.Generator) -> tuple[ChunkInterval, ...]:
    _check_sizes(size, l, c)
    if not 0 <= r < c:
        raise InvalidConfig(f"right context must satisfy 0 <= r < c (got r={r}, c={c})")
    if not 0.0 <= p <= 1.0:
        raise InvalidConfig(f"p must lie in [0, 1], got {p}")
    if r > 0 and r >= l:
        warnings.warn(f"right context r={r} is not smaller than left context l={l}", stacklevel=3)
    out = []
    i = 0
    while i < size:
        extend = rng.random() < p
        out.append(ChunkInterval(i, c + r if extend else c, max(0, i - l), extend, c))
        i += c
    return tuple(out)


def drc_mask(size: int, l: int, c: int, r: int, p: float,
             rng: np.random.Generator) -> AttnMask:
    """Dynamic right context mask.

    Walks the sequence in steps of ``c``; each chunk independently extends by
    ``r`` frames with probability ``p`` (one ``rng.random()`` draw per chunk,
    in order).  Overlapping assignments union.
    """
    ivs = drc_intervals(size, l, c, r, p, rng)
    return AttnMask(intervals_to_dense(size, ivs), ivs)


def full_mask(size: int) -> AttnMask:
    return AttnMask(np.ones((size, size), dtype=bool))


def sample_training_context(ranges: ContextRanges, rng: np.random.Generator) -> tuple[int, int]:
    i = int(rng.integers(len(ranges.chunk_sizes)))
    return ranges.chunk_sizes[i], ranges.right_sizes[i]


def tsca_step_mask(o: int, c: int, r: int, l_att: int, valid_end: int | None = None) -> AttnMask:
    """Mask for one streaming step.

    Queries are the ``c + r`` window frames (global ``o .. o+c+r-1``); keys are
    the ``l_att`` cached slots followed by the same window, i.e. global
    ``o - l_att .. o+c+r-1``.  Key columns before frame 0 (initial padding and
    not-yet-filled cache slots) or at/after ``valid_end`` (tail padding) are
    disallowed.  Padding queries only see themselves; their outputs are
    discarded.
    """
    if c < 1 or r < 0 or l_att < 0:
        raise InvalidConfig(f"bad step geometry c={c}, r={r}, l_att={l_att}")
    if o < -r or (o + r) % c:
        raise InvalidOffset(f"offset {o} is not on the grid -r + k*c (r={r}, c={c})")
    n_q, n_k = c + r, l_att + c + r
    end = math.inf if valid_end is None else valid_end
    key_pos = o - l_att + np.arange(n_k)
    real_key = (key_pos >= 0) & (key_pos < end)
    q_pos = o + np.arange(n_q)
    real_q = (q_pos >= 0) & (q_pos < end)
    allowed = np.zeros((n_q, n_k), dtype=bool)
    allowed[real_q] = real_key
    pad_rows = np.flatnonzero(~real_q)
    allowed[pad_rows, l_att + pad_rows] = True
    return AttnMask(allowed)


def windows_mask(windows: Sequence[tuple[int, int]]) -> AttnMask:
    """Square mask whose row ``t`` allows exactly columns ``lo..hi`` of ``windows[t]``."""
    size = len(windows)
    allowed = np.zeros((size, size), dtype=bool)
    for t, (lo, hi) in enumerate(windows):
        allowed[t, lo:hi + 1] = True
    return AttnMask(allowed)


def stream_schedule(total: int, c: int, r: int) -> list[tuple[int, int, int]]:
    """Steps a session takes for ``total`` frames: ``(o, first_final, end_final)``.

    ``total // c`` full pushes, then one finalising step if any real frame is
    still pending (the trailing ``r`` provisional frames or a partial tail).
    """
    steps = []
    full = total // c
    for k in range(full):
        o = -r + k * c
        steps.append((o, max(0, o), o + c))
    o = -r + full * c
    if total > max(0, o):
        steps.append((o, max(0, o), total))
    return steps


def compose_step_masks(total: int, c: int, r: int, l_att: int) -> AttnMask:
    """Stitch per-step masks into a frame-level mask for a stream of ``total`` frames.

    Row ``t`` is taken from the step in which frame ``t`` is finalised.
    """
    allowed = np.zeros((total, total), dtype=bool)
    for o, lo, hi in stream_schedule(total, c, r):
        step = tsca_step_mask(o, c, r, l_att, valid_end=total)
        for t in range(lo, hi):
            cols = np.flatnonzero(step.allowed[t - o]) + o - l_att
            allowed[t, cols] = True
    return AttnMask(allowed)
