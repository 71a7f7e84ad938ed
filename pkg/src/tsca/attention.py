"""Relative-position multi-head self-attention and its streaming (TSCA) step.

Scores follow the Transformer-XL decomposition::

    e[i, j] = ((q_i + u) . k_j + (q_i + v) . p_{i-j}) / sqrt(d_k)

with ``q = W_q x``, ``k = W_k x`` and ``p_delta = W_R R_delta`` where ``R`` is
a fixed sinusoidal table indexed by the signed distance ``delta = i - j``
between *global* frame positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .errors import CacheDesync, ChunkSizeMismatch, DistanceOutOfTable, EmptyRow
from .masking import tsca_step_mask


def sinusoid_table(lo: int, hi: int, d: int) -> np.ndarray:
    """Sinusoidal encodings for every signed distance in ``[lo, hi]`` (row 0 is ``lo``)."""
    pos = np.arange(lo, hi + 1, dtype=np.float64)[:, None]
    inv = 1.0 / (10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d))
    table = np.zeros((hi - lo + 1, d))
    table[:, 0::2] = np.sin(pos * inv)
    table[:, 1::2] = np.cos(pos * inv[: d // 2])
    return table


def rel_range_for(c: int, r: int, l_att: int) -> tuple[int, int]:
    """Signed distances a streaming step can produce."""
    return -(c + r), l_att + r + c - 1


def _uniform(shape, bound, gen, dtype):
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)


class RelPosAttention(nn.Module):
    """Multi-head self-attention with relative positional scores.

    Parameters ``W_q, W_k, W_v, W_R`` are ``d x d`` matrices applied as
    ``x @ W.T``; ``u`` and ``v`` are ``d``-vectors split per head.  ``W_o`` is
    the usual output projection after concatenating heads.
    """

    def __init__(self, d_model: int, heads: int, rel_range: tuple[int, int],
                 seed: int = 0, dtype: torch.dtype = torch.float64):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.d_model, self.heads, self.d_k = d_model, heads, d_model // heads
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(d_model)
        for name in ("W_q", "W_k", "W_v", "W_R", "W_o"):
            setattr(self, name, nn.Parameter(_uniform((d_model, d_model), bound, gen, dtype)))
        self.u = nn.Parameter(_uniform((d_model,), bound, gen, dtype))
        self.v = nn.Parameter(_uniform((d_model,), bound, gen, dtype))
        self.rel_lo, self.rel_hi = rel_range
        table = torch.from_numpy(sinusoid_table(self.rel_lo, self.rel_hi, d_model)).to(dtype)
        self.register_buffer("rel_table", table, persistent=False)

    # -- pieces -----------------------------------------------------------

    def _split(self, t: Tensor) -> Tensor:
        # (..., T, d) -> (..., H, T, d_k)
        return t.unflatten(-1, (self.heads, self.d_k)).transpose(-3, -2)

    def _split_vec(self, w: Tensor) -> Tensor:
        return w.view(self.heads, 1, self.d_k)

    def project_kv(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return x @ self.W_k.T, x @ self.W_v.T

    def rel_scores(self, x_q: Tensor, k: Tensor, q_pos: Tensor, k_pos: Tensor,
                   allowed: Tensor | None = None) -> Tensor:
        """Scores ``(..., H, Tq, Tk)`` for query inputs ``x_q`` against projected keys ``k``.

        ``q_pos`` / ``k_pos`` hold global frame positions, either shared
        (1-D) or per batch element.  Distances outside the table raise
        :class:`DistanceOutOfTable` unless the pair is masked out.
        """
        q = self._split(x_q @ self.W_q.T)
        kh = self._split(k)
        content = (q + self._split_vec(self.u)) @ kh.transpose(-1, -2)
        pos_proj = self._split(self.rel_table @ self.W_R.T)  # (H, L, d_k)
        pos_all = (q + self._split_vec(self.v)) @ pos_proj.transpose(-1, -2)  # (..., H, Tq, L)
        dist = q_pos[..., :, None] - k_pos[..., None, :]
        idx = dist - self.rel_lo
        bad = (idx < 0) | (idx > self.rel_hi - self.rel_lo)
        if allowed is not None:
            bad = bad & allowed
        if bool(bad.any()):
            raise DistanceOutOfTable(
                f"distance range [{int(dist.min())}, {int(dist.max())}] exceeds table "
                f"[{self.rel_lo}, {self.rel_hi}]"
            )
        idx = idx.clamp(0, self.rel_hi - self.rel_lo)
        idx = idx.unsqueeze(-3).expand(*pos_all.shape[:-1], idx.shape[-1])
        position = torch.gather(pos_all, -1, idx)
        return (content + position) / math.sqrt(self.d_k)

    def attend(self, alpha: Tensor, vals: Tensor) -> Tensor:
        """Weighted sum of projected values, heads concatenated, then ``W_o``."""
        z = alpha @ self._split(vals)
        return z.transpose(-3, -2).flatten(-2) @ self.W_o.T

    def forward(self, x: Tensor, allowed: Tensor, positions: Tensor | None = None) -> Tensor:
        """Offline self-attention over ``x`` (``(..., T, d)``) under a query x key mask."""
        if positions is None:
            positions = torch.arange(x.shape[-2])
        k, vals = self.project_kv(x)
        e = self.rel_scores(x, k, positions, positions, allowed)
        return self.attend(masked_softmax(e, allowed), vals)

    # -- streaming ----------------------------------------------------------

    def window_forward(self, x_win: Tensor, cache_k: Tensor, cache_v: Tensor, o: int,
                       allowed: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Attend ``c + r`` window frames to ``l_att`` cached keys plus the window.

        Returns the window outputs and the full key/value stacks (cache rows
        first) so the caller can slice out the next step's history.
        """
        l_att = cache_k.shape[-2]
        n_q = x_win.shape[-2]
        k_win, v_win = self.project_kv(x_win)
        keys = torch.cat([cache_k, k_win], dim=-2)
        vals = torch.cat([cache_v, v_win], dim=-2)
        k_pos = torch.arange(o - l_att, o + n_q)
        q_pos = torch.arange(o, o + n_q)
        e = self.rel_scores(x_win, keys, q_pos, k_pos, allowed)
        z = self.attend(masked_softmax(e, allowed), vals)
        return z, keys, vals


def masked_softmax(e: Tensor, allowed: Tensor) -> Tensor:
    """Softmax over allowed keys with row-max subtraction; masked entries are exactly 0."""
    allowed = allowed.to(torch.bool)
    if not bool(allowed.any(-1).all()):
        raise EmptyRow("a query row has no allowed key")
    allowed = allowed.unsqueeze(-3) if allowed.dim() == e.dim() - 1 else allowed
    masked = e.masked_fill(~allowed, float("-inf"))
    shifted = masked - masked.amax(-1, keepdim=True)
    w = torch.exp(shifted)
    return w / w.sum(-1, keepdim=True)


@dataclass
class AttnCache:
    """Per-session streaming state of one attention layer.

    ``k``/``v`` always hold ``l_att`` rows for global positions
    ``start .. start + l_att - 1``; rows before frame 0 are placeholders that
    the step mask hides.  ``input_tail`` holds the raw last ``r`` input frames
    of the previous chunk.
    """

    k: Tensor
    v: Tensor
    input_tail: Tensor
    start: int

    @classmethod
    def empty(cls, batch: int, l_att: int, r: int, d: int, dtype=torch.float64) -> "AttnCache":
        z = lambda n: torch.zeros(batch, n, d, dtype=dtype)  # noqa: E731
        return cls(z(l_att), z(l_att), z(r), -r - l_att)

    def valid_rows(self) -> tuple[Tensor, Tensor]:
        """The cached rows that belong to real (non-negative) frames."""
        skip = max(0, -self.start)
        return self.k[:, skip:], self.v[:, skip:]


def tsca_step(attn: RelPosAttention, chunk: Tensor, state: AttnCache, o: int,
              c: int, r: int, valid_end: int | None = None):
    """One time-shifted streaming step of a single attention layer.

    The cached ``r`` input frames are prepended to the ``c`` new frames, so the
    window covers global ``o .. o + c + r - 1``.  The first ``c`` outputs are
    final; the trailing ``r`` are provisional and get recomputed next step.
    Returns ``(z_final, z_provisional, new_state)``.
    """
    if chunk.shape[-2] != c:
        raise ChunkSizeMismatch(f"expected {c} frames, got {chunk.shape[-2]}")
    l_att = state.k.shape[-2]
    if state.start != o - l_att:
        raise CacheDesync(f"cache starts at {state.start}, offset {o} needs {o - l_att}")
    x_win = torch.cat([state.input_tail, chunk], dim=-2)
    allowed = torch.from_numpy(tsca_step_mask(o, c, r, l_att, valid_end).allowed)
    z, keys, vals = attn.window_forward(x_win, state.k, state.v, o, allowed)
    new = AttnCache(keys[:, c:c + l_att], vals[:, c:c + l_att], chunk[:, c - r:], o + c - l_att)
    return z[:, :c], z[:, c:], new
