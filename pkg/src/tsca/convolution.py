"""Dynamic chunk convolution (DCC) with lookahead, plus the sub-sampling front end.

A depthwise kernel of width ``2 * l_conv + 1`` normally looks ``l_conv`` frames
both ways.  Under chunking, each output frame keeps its full left reach
(history is cached) but its right reach stops at the end of its segment:
the chunk itself plus ``r_min = min(l_conv, r)`` lookahead frames.  Anything
past the segment end is read as zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InvalidConfig
from .masking import ChunkInterval

CHUNKED_C = "chunked_c"
CHUNKED_C_PLUS_R = "chunked_c_plus_r"


@dataclass(frozen=True)
class Segment:
    start: int  # first input frame (left tail included)
    length: int
    valid_lo: int  # outputs [valid_lo, valid_hi) are produced by this segment
    valid_hi: int

    @property
    def end(self) -> int:
        return self.start + self.length


def r_min(l_conv: int, r: int) -> int:
    return min(l_conv, r)


def split_lookahead(total: int, c: int, r: int, l_conv: int) -> list[Segment]:
    """Segments of ``l_conv + c + r_min`` frames taken every ``c`` frames, clipped to the input."""
    if c < 1 or r < 0 or l_conv < 0:
        raise InvalidConfig(f"bad layout c={c}, r={r}, l_conv={l_conv}")
    ahead = r_min(l_conv, r)
    segs = []
    for lo in range(0, total, c):
        hi = min(total, lo + c)
        start = max(0, lo - l_conv)
        end = min(total, lo + c + ahead)
        segs.append(Segment(start, end - start, lo, hi))
    return segs


def layout_for(total: int, c: int, r: int, l_conv: int, mode: str = CHUNKED_C) -> list[Segment]:
    if mode == CHUNKED_C:
        return split_lookahead(total, c, r, l_conv)
    if mode == CHUNKED_C_PLUS_R:
        # the lookahead frames become part of a larger plain chunk
        return split_lookahead(total, c + r_min(l_conv, r), 0, l_conv)
    raise InvalidConfig(f"unknown DCC mode {mode!r}")


def depthwise(x: Tensor, weight: Tensor) -> Tensor:
    """'Valid' depthwise convolution of ``x`` (``(..., T, d)``) with ``weight`` (``(d, K)``)."""
    lead = x.shape[:-2]
    xt = x.reshape(-1, *x.shape[-2:]).transpose(-1, -2)
    y = F.conv1d(xt, weight.unsqueeze(1), groups=weight.shape[0])
    return y.transpose(-1, -2).reshape(*lead, -1, weight.shape[0])


def _segment_outputs(x: Tensor, seg: Segment, weight: Tensor, lookahead_on: bool = True) -> Tensor:
    l_conv = (weight.shape[-1] - 1) // 2
    win = x[..., seg.start:seg.end, :]
    if not lookahead_on:
        win = win.clone()
        win[..., seg.valid_hi - seg.start:, :] = 0
    left = l_conv - (seg.valid_lo - seg.start)
    right = l_conv - (seg.end - seg.valid_hi)
    win = F.pad(win, (0, 0, left, max(0, right)))
    out = depthwise(win, weight)
    return out[..., : seg.valid_hi - seg.valid_lo, :]


def dcc_forward(x: Tensor, c: int, r: int, weight: Tensor, mode: str = CHUNKED_C,
                lookahead: Sequence[bool] | None = None) -> Tensor:
    """Chunked depthwise convolution evaluated segment by segment.

    ``lookahead`` optionally switches the lookahead off for individual
    segments (see :func:`masked_right_context`).
    """
    if weight.shape[-1] % 2 == 0:
        raise InvalidConfig("kernel width must be odd")
    l_conv = (weight.shape[-1] - 1) // 2
    segs = layout_for(x.shape[-2], c, r, l_conv, mode)
    if lookahead is not None and len(lookahead) != len(segs):
        raise ValueError(f"{len(lookahead)} lookahead flags for {len(segs)} segments")
    outs = [
        _segment_outputs(x, seg, weight, True if lookahead is None else lookahead[i])
        for i, seg in enumerate(segs)
    ]
    return torch.cat(outs, dim=-2)


def masked_right_context(x: Tensor, intervals: Sequence[ChunkInterval], c: int, r: int,
                         l_conv: int) -> list[Tensor]:
    """Per-segment convolution windows with unselected segments' lookahead zeroed."""
    segs = split_lookahead(x.shape[-2], c, r, l_conv)
    if len(segs) != len(intervals):
        raise ValueError("interval list does not match the segment layout")
    wins = []
    for seg, iv in zip(segs, intervals):
        win = x[..., seg.start:seg.end, :].clone()
        if not iv.extended:
            win[..., seg.valid_hi - seg.start:, :] = 0
        wins.append(win)
    return wins


def lookahead_flags(intervals: Sequence[ChunkInterval]) -> list[bool]:
    return [iv.extended for iv in intervals]


@dataclass
class ConvCache:
    """Last ``l_conv`` finalised depthwise inputs; zeros before the stream starts."""

    left_tail: Tensor
    position: int

    @classmethod
    def empty(cls, batch: int, l_conv: int, d: int, start: int = 0, dtype=torch.float64) -> "ConvCache":
        return cls(torch.zeros(batch, l_conv, d, dtype=dtype), start - l_conv)


def conv_window_step(x_win: Tensor, cache: ConvCache, weight: Tensor, n_final: int,
                     o: int) -> tuple[Tensor, ConvCache]:
    """Depthwise conv over a streaming window.

    ``x_win`` covers global ``o ..``; the cache supplies the ``l_conv`` frames
    before ``o``.  The window's right edge is zero-padded.  The first
    ``n_final`` window frames are final and roll into the new cache.
    """
    l_conv = cache.left_tail.shape[-2]
    if cache.position != o - l_conv:
        raise ValueError(f"conv cache at {cache.position}, expected {o - l_conv}")
    full = torch.cat([cache.left_tail, x_win], dim=-2)
    y = depthwise(F.pad(full, (0, 0, 0, l_conv)), weight)
    hist = full[..., : l_conv + n_final, :]
    tail = hist[..., hist.shape[-2] - l_conv:, :]
    return y, ConvCache(tail, o + n_final - l_conv)


def dcc_stream(x: Tensor, c: int, r: int, weight: Tensor) -> Tensor:
    """Chunk-by-chunk evaluation with a left-tail cache (each push: chunk + lookahead)."""
    l_conv = (weight.shape[-1] - 1) // 2
    ahead = r_min(l_conv, r)
    total = x.shape[-2]
    cache = ConvCache.empty(1, l_conv, x.shape[-1], dtype=x.dtype)
    cache = ConvCache(cache.left_tail[0], cache.position)
    outs = []
    for lo in range(0, total, c):
        hi = min(total, lo + c)
        win = x[..., lo:min(total, hi + ahead), :]
        y, cache = conv_window_step(win, cache, weight, hi - lo, lo)
        outs.append(y[..., : hi - lo, :])
    return torch.cat(outs, dim=-2)


class Conv2dSubsampling(nn.Module):
    """Two 3x3 stride-2 convolutions over (time, feature): 4x fewer frames.

    Time is padded by one zero frame on the left of each stage, so ``T`` raw
    frames give ``T // 4`` outputs and output ``k`` starts at raw frame ``4k``.
    The feature axis is convolved without padding.
    """

    factor = 4

    def __init__(self, d_feat: int, d_model: int, channels: int = 8, seed: int = 0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        self.conv1 = nn.Conv2d(1, channels, 3, stride=2, dtype=dtype)
        self.conv2 = nn.Conv2d(channels, channels, 3, stride=2, dtype=dtype)
        f_out = ((d_feat - 3) // 2 + 1 - 3) // 2 + 1
        if f_out < 1:
            raise InvalidConfig(f"d_feat={d_feat} too small for two 3x3 stride-2 stages")
        self.out = nn.Linear(channels * f_out, d_model, dtype=dtype)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                fan = p.shape[-1] if p.dim() == 1 else math.prod(p.shape[1:])
                bound = 1.0 / math.sqrt(max(fan, 1))
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)

    def _stage(self, conv: nn.Conv2d, x: Tensor, tail: Tensor) -> Tensor:
        return torch.relu(conv(torch.cat([tail, x], dim=-2)))

    def forward(self, feats: Tensor) -> Tensor:
        """Offline: ``(B, T, d_feat) -> (B, T // 4, d_model)``."""
        if feats.shape[-2] < 4:
            raise InvalidConfig(f"need at least 4 input frames, got {feats.shape[-2]}")
        x = feats.unsqueeze(1)
        h = self._stage(self.conv1, x, torch.zeros_like(x[..., :1, :]))
        h = self._stage(self.conv2, h, torch.zeros_like(h[..., :1, :]))
        return self.out(h.transpose(1, 2).flatten(2))

    def initial_state(self, batch: int, d_feat: int) -> tuple[Tensor, Tensor]:
        dtype = self.out.weight.dtype
        ch = self.conv1.out_channels
        f1 = (d_feat - 3) // 2 + 1
        return (torch.zeros(batch, 1, 1, d_feat, dtype=dtype),
                torch.zeros(batch, ch, 1, f1, dtype=dtype))

    def step(self, feats: Tensor, state: tuple[Tensor, Tensor]):
        """Streaming: ``4c`` raw frames in, ``c`` frames out; state is one frame per stage."""
        if feats.shape[-2] % self.factor:
            raise InvalidConfig("streaming sub-sampling needs a multiple of 4 raw frames")
        x = feats.unsqueeze(1)
        h = self._stage(self.conv1, x, state[0])
        y = self._stage(self.conv2, h, state[1])
        return self.out(y.transpose(1, 2).flatten(2)), (x[..., -1:, :], h[..., -1:, :])
