"""Toy Conformer encoder with a CTC head, runnable offline or step by step.

Each block is ``FFN/2 -> relative MHSA -> conv module -> FFN/2 -> LayerNorm``
with pre-norm residuals; the conv module uses LayerNorm in place of
BatchNorm so that training/inference statistics never diverge.

The offline path evaluates a :class:`Layout`: a set of tokens, each a copy of
some input frame at a global position, plus an attention mask and an explicit
depthwise-conv neighbour table.  A plain frame-level mask is the special case
of one token per frame.  Streaming produces a layout in which a frame that was
first computed provisionally and then revised appears once per step that
computed it, which is what makes a deep stack comparable offline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .attention import RelPosAttention
from .convolution import Conv2dSubsampling, ConvCache, conv_window_step
from .errors import CacheDesync, ChunkSizeMismatch, InvalidConfig
from .masking import AttnMask, tsca_step_mask

BLANK = 0
_DTYPES = {"single": torch.float32, "double": torch.float64}


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    d_model: int = 64
    heads: int = 2
    ffn_dim: int = 256
    kernel_size: int = 15
    vocab_size: int = 32
    d_feat: int = 80
    subsample: bool = False
    precision: str = "double"
    seed: int = 0

    def __post_init__(self):
        if self.precision not in _DTYPES:
            raise InvalidConfig(f"precision must be one of {sorted(_DTYPES)}")
        if self.d_model % self.heads:
            raise InvalidConfig("d_model must be divisible by heads")
        if self.kernel_size % 2 == 0:
            raise InvalidConfig("kernel_size must be odd")
        if self.layers < 1 or self.vocab_size < 2:
            raise InvalidConfig("need at least one layer and a non-blank token")

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.precision]

    @property
    def l_conv(self) -> int:
        return (self.kernel_size - 1) // 2


@dataclass
class Layout:
    """Token graph evaluated by :meth:`Encoder.forward_offline`.

    ``source[n]`` is the input frame token ``n`` reads at the bottom of the
    stack, ``positions[n]`` its global frame index (for relative distances),
    ``allowed`` the token-level attention mask and ``conv_index[n, k]`` the
    token feeding kernel tap ``k`` of token ``n`` (``-1`` reads zero).
    ``final_tokens[t]`` is the token whose output is frame ``t``'s result.
    """

    source: np.ndarray
    positions: np.ndarray
    allowed: np.ndarray
    conv_index: np.ndarray
    final_tokens: np.ndarray

    @property
    def n_tokens(self) -> int:
        return len(self.source)

    @classmethod
    def from_mask(cls, mask: AttnMask, l_conv: int) -> "Layout":
        """One token per frame.

        Conv right reach follows the mask's interval form when present: the
        chunk end, plus ``min(l_conv, extension)`` for extended chunks.  Masks without
        intervals get unrestricted (offline) convolution.
        """
        size = mask.allowed.shape[0]
        limit = np.full(size, size - 1)
        if mask.intervals is not None:
            for iv in mask.intervals:
                ahead = min(l_conv, iv.cur_c - (iv.chunk or iv.cur_c)) if iv.extended else 0
                lo, hi = iv.start, min(size, iv.chunk_end)
                limit[lo:hi] = iv.chunk_end - 1 + ahead
        t = np.arange(size)[:, None]
        nb = t + np.arange(-l_conv, l_conv + 1)[None, :]
        ok = (nb >= 0) & (nb < size) & (nb <= limit[:, None])
        frames = np.arange(size)
        return cls(frames, frames.copy(), mask.allowed.copy(), np.where(ok, nb, -1), frames.copy())


def _init_linear(lin: nn.Linear, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(lin.in_features)
    with torch.no_grad():
        for p in (lin.weight, lin.bias):
            if p is not None:
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, gen: torch.Generator, dtype):
        super().__init__()
        self.w1 = nn.Linear(d, hidden, dtype=dtype)
        self.w2 = nn.Linear(hidden, d, dtype=dtype)
        _init_linear(self.w1, gen)
        _init_linear(self.w2, gen)

    def forward(self, x: Tensor) -> Tensor:
        return self.w2(F.silu(self.w1(x)))


class ConformerBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig, rel_range: tuple[int, int], seed: int):
        super().__init__()
        d, dtype = cfg.d_model, cfg.dtype
        gen = torch.Generator().manual_seed(seed)
        self.ff1 = FeedForward(d, cfg.ffn_dim, gen, dtype)
        self.ff2 = FeedForward(d, cfg.ffn_dim, gen, dtype)
        self.attn = RelPosAttention(d, cfg.heads, rel_range, seed=seed + 1, dtype=dtype)
        self.pw1 = nn.Linear(d, 2 * d, dtype=dtype)
        self.pw2 = nn.Linear(d, d, dtype=dtype)
        _init_linear(self.pw1, gen)
        _init_linear(self.pw2, gen)
        bound = 1.0 / math.sqrt(cfg.kernel_size)
        self.dw = nn.Parameter(
            ((torch.rand(d, cfg.kernel_size, generator=gen, dtype=torch.float64) * 2 - 1) * bound).to(dtype))
        self.norm_ff1, self.norm_att, self.norm_conv, self.norm_dw, self.norm_ff2, self.norm_out = (
            nn.LayerNorm(d, dtype=dtype) for _ in range(6))

    def _conv_in(self, x: Tensor) -> Tensor:
        return F.glu(self.pw1(self.norm_conv(x)), dim=-1)

    def _conv_out(self, h: Tensor) -> Tensor:
        return self.pw2(F.silu(self.norm_dw(h)))

    def _tail(self, x: Tensor) -> Tensor:
        x = x + 0.5 * self.ff2(self.norm_ff2(x))
        return self.norm_out(x)

    def forward(self, x: Tensor, layout: Layout) -> Tensor:
        """Offline evaluation over layout tokens ``x`` (``(N, d)``)."""
        x = x + 0.5 * self.ff1(self.norm_ff1(x))
        allowed = torch.from_numpy(layout.allowed)
        x = x + self.attn(self.norm_att(x), allowed, torch.from_numpy(layout.positions))
        h = self._conv_in(x)
        h_pad = torch.cat([h, torch.zeros_like(h[:1])], dim=0)
        idx = torch.from_numpy(layout.conv_index)
        taps = h_pad[torch.where(idx < 0, h.shape[0], idx)]  # (N, K, d)
        y = (taps * self.dw.T.unsqueeze(0)).sum(1)
        x = x + self._conv_out(y)
        return self._tail(x)

    def step(self, x_win: Tensor, cache: "LayerCache", o: int, c: int, allowed: Tensor,
             real: Tensor) -> tuple[Tensor, "LayerCache"]:
        l_att = cache.k.shape[-2]
        x = x_win + 0.5 * self.ff1(self.norm_ff1(x_win))
        a, keys, vals = self.attn.window_forward(self.norm_att(x), cache.k, cache.v, o, allowed)
        x = x + a
        h = self._conv_in(x) * real.unsqueeze(-1)
        y, conv = conv_window_step(h, cache.conv, self.dw, c, o)
        x = x + self._conv_out(y)
        new = LayerCache(keys[:, c:c + l_att], vals[:, c:c + l_att], conv)
        return self._tail(x), new


@dataclass
class LayerCache:
    k: Tensor
    v: Tensor
    conv: ConvCache


@dataclass
class EncoderState:
    o: int
    c: int
    r: int
    l_att: int
    input_tail: Tensor
    layers: list[LayerCache]
    frontend: tuple[Tensor, Tensor] | None = None
    steps: int = 0
    window_sizes: list[int] = field(default_factory=list)

    @property
    def batch(self) -> int:
        return self.input_tail.shape[0]


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, rel_range: tuple[int, int] = (-64, 128)):
        super().__init__()
        self.cfg = cfg
        self.rel_range = rel_range
        dtype = cfg.dtype
        gen = torch.Generator().manual_seed(cfg.seed)
        if cfg.subsample:
            self.frontend = Conv2dSubsampling(cfg.d_feat, cfg.d_model, seed=cfg.seed + 7, dtype=dtype)
        else:
            self.frontend = nn.Linear(cfg.d_feat, cfg.d_model, dtype=dtype)
            _init_linear(self.frontend, gen)
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg, rel_range, seed=cfg.seed * 1000 + 10 * (i + 1)) for i in range(cfg.layers))
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, dtype=dtype)
        _init_linear(self.head, gen)
        self.requires_grad_(False)

    @property
    def frame_factor(self) -> int:
        return Conv2dSubsampling.factor if self.cfg.subsample else 1

    def embed(self, feats: Tensor) -> Tensor:
        """Input features ``(T_raw, d_feat)`` -> block inputs ``(T, d_model)``."""
        feats = torch.as_tensor(feats, dtype=self.cfg.dtype)
        if self.cfg.subsample:
            return self.frontend(feats.unsqueeze(0))[0]
        return self.frontend(feats)

    # -- offline -------------------------------------------------------------

    def forward_offline(self, features, mask: AttnMask | Layout) -> Tensor:
        """Logits ``(T, vocab)`` for every frame under a frame mask or token layout."""
        frames = self.embed(features)
        layout = mask if isinstance(mask, Layout) else Layout.from_mask(mask, self.cfg.l_conv)
        n_frames = len(layout.final_tokens)
        if frames.shape[0] != n_frames:
            raise ValueError(f"layout covers {n_frames} frames, input has {frames.shape[0]}")
        x = frames[torch.from_numpy(layout.source)]
        for block in self.blocks:
            x = block(x, layout)
        return self.head(x[torch.from_numpy(layout.final_tokens)])

    # -- streaming -----------------------------------------------------------

    def initial_state(self, c: int, r: int, l_att: int, batch: int = 1) -> EncoderState:
        if not 0 <= r < c:
            raise InvalidConfig(f"need 0 <= r < c, got c={c}, r={r}")
        lo, hi = self.rel_range
        if lo > -(c + r) or hi < l_att + r + c - 1:
            raise InvalidConfig(f"relative table {self.rel_range} too small for c={c}, r={r}, l_att={l_att}")
        d, dtype, o = self.cfg.d_model, self.cfg.dtype, -r
        layers = [
            LayerCache(torch.zeros(batch, l_att, d, dtype=dtype), torch.zeros(batch, l_att, d, dtype=dtype),
                       ConvCache.empty(batch, self.cfg.l_conv, d, start=o, dtype=dtype))
            for _ in self.blocks
        ]
        frontend = self.frontend.initial_state(batch, self.cfg.d_feat) if self.cfg.subsample else None
        return EncoderState(o, c, r, l_att, torch.zeros(batch, r, d, dtype=dtype), layers, frontend)

    def forward_step(self, chunk, state: EncoderState,
                     valid_end: Sequence[int | None] | int | None = None):
        """One TSCA step for a batch of sessions in lockstep.

        ``chunk`` is ``(B, c * frame_factor, d_feat)``.  Returns final logits
        ``(B, c, V)`` for global frames ``o .. o+c-1``, provisional logits
        ``(B, r, V)`` for ``o+c .. o+c+r-1`` and the advanced state.
        """
        c, r, l_att, o = state.c, state.r, state.l_att, state.o
        chunk = torch.as_tensor(chunk, dtype=self.cfg.dtype)
        if chunk.dim() == 2:
            chunk = chunk.unsqueeze(0)
        if chunk.shape[-2] != c * self.frame_factor or chunk.shape[0] != state.batch:
            raise ChunkSizeMismatch(
                f"expected ({state.batch}, {c * self.frame_factor}, d_feat), got {tuple(chunk.shape)}")
        for layer in state.layers:
            if layer.conv.position != o - self.cfg.l_conv:
                raise CacheDesync(f"layer cache at {layer.conv.position} but offset is {o}")
        if self.cfg.subsample:
            frames, frontend = self.frontend.step(chunk, state.frontend)
        else:
            frames, frontend = self.frontend(chunk), None
        x = torch.cat([state.input_tail, frames], dim=-2)
        if not isinstance(valid_end, (list, tuple)):
            valid_end = [valid_end] * state.batch
        masks = [tsca_step_mask(o, c, r, l_att, v).allowed for v in valid_end]
        allowed = torch.from_numpy(np.stack(masks))
        pos = torch.arange(o, o + c + r)
        ends = torch.tensor([math.inf if v is None else v for v in valid_end], dtype=torch.float64)
        real = ((pos >= 0).unsqueeze(0) & (pos.unsqueeze(0) < ends.unsqueeze(1))).to(self.cfg.dtype)
        layers = []
        for block, cache in zip(self.blocks, state.layers):
            x, new = block.step(x, cache, o, c, allowed, real)
            layers.append(new)
        logits = self.head(x)
        new_state = EncoderState(
            o + c, c, r, l_att, frames[:, frames.shape[1] - r:], layers, frontend,
            state.steps + 1, state.window_sizes + [l_att + c + r])
        return logits[:, :c], logits[:, c:], new_state

    # -- weights -------------------------------------------------------------

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def load_named_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(tensors)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)[:5]}")
        self.load_state_dict({k: torch.as_tensor(np.asarray(tensors[k]), dtype=own[k].dtype) for k in own})


def ctc_greedy(logits) -> list[int]:
    """Per-frame argmax, merge adjacent repeats, drop blanks."""
    path = torch.as_tensor(logits).argmax(-1).tolist()
    return ctc_collapse(path)


def ctc_collapse(path: Sequence[int], prev: int | None = None) -> list[int]:
    """Collapse a frame path, continuing from the symbol of the frame before it."""
    out = []
    for p in path:
        if p != BLANK and p != prev:
            out.append(int(p))
        prev = p
    return out
