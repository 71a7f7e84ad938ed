"""Low-latency streaming pipeline around a TSCA encoder.

A session starts at offset ``o = -r`` (the first window is preceded by ``r``
masked padding frames) and advances by ``c`` per pushed chunk.  Every step
emits a *final* event for global frames ``[o, o + c)`` and, when ``r > 0``, a
*provisional* event for the in-context future ``[o + c, o + c + r)`` that the
next step revises.  Token ids are decoded greedily with CTC, carrying the
previous frame's symbol across event boundaries so that the concatenated final
tokens equal a greedy decode of all final frames at once.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .encoder import EncoderState, Layout, ctc_collapse
from .errors import (ChunkSizeMismatch, HeterogeneousConfig, InvalidConfig, SessionClosed,
                     SessionOpen)
from .masking import AttnMask, windows_mask

FINAL, PROVISIONAL, REVISED = "final", "provisional", "revised"


@dataclass(frozen=True)
class StreamConfig:
    c: int = 10
    r: int = 6
    l_att: int = 60
    frame_ms: float = 40.0

    def __post_init__(self):
        if self.c < 1 or not 0 <= self.r < self.c:
            raise InvalidConfig(f"need c >= 1 and 0 <= r < c, got c={self.c}, r={self.r}")
        if self.l_att < 0 or self.frame_ms <= 0:
            raise InvalidConfig("l_att must be >= 0 and frame_ms > 0")

    @property
    def window(self) -> int:
        return self.l_att + self.r + self.c


class Clock(Protocol):
    def now(self) -> float: ...

    def measure(self, fn: Callable, *args): ...


class RealClock:
    """Wall clock in milliseconds."""

    def now(self) -> float:
        return time.perf_counter() * 1000.0

    def measure(self, fn, *args):
        t0 = self.now()
        out = fn(*args)
        return out, self.now() - t0


class SimClock:
    """Deterministic clock; each measured computation costs ``compute_ms``."""

    def __init__(self, start: float = 0.0, compute_ms: float = 0.0):
        self.t = float(start)
        self.compute_ms = float(compute_ms)

    def now(self) -> float:
        return self.t

    def advance(self, ms: float) -> None:
        self.t += ms

    def measure(self, fn, *args):
        out = fn(*args)
        self.t += self.compute_ms
        return out, self.compute_ms


class StreamModel(Protocol):
    frame_factor: int

    def initial_state(self, c: int, r: int, l_att: int, batch: int = 1): ...

    def forward_step(self, chunk, state, valid_end=None): ...


@dataclass
class EmissionEvent:
    step: int
    start: int
    end: int
    status: str
    tokens: list[int]
    wall_ms: float

    def to_line(self) -> str:
        toks = " ".join(str(t) for t in self.tokens)
        return f"{self.step}\t{self.status}\t{self.start}\t{self.end}\t{self.wall_ms:.3f}\t{toks}"

    @classmethod
    def from_line(cls, line: str) -> "EmissionEvent":
        step, status, start, end, wall, toks = line.rstrip("\n").split("\t")
        return cls(int(step), int(start), int(end), status, [int(t) for t in toks.split()], float(wall))


@dataclass(frozen=True)
class StepRecord:
    step: int
    o: int
    final_lo: int
    final_hi: int
    valid_end: int | None


@dataclass
class LatencyReport:
    upl_per_frame: list[float]
    upl_mean: float
    upl_max: float
    rtf: float
    per_step_compute: list[float]

    def to_text(self) -> str:
        return (f"upl_mean_ms={self.upl_mean:.6g}\nupl_max_ms={self.upl_max:.6g}\n"
                f"rtf={self.rtf:.6g}\nsteps={len(self.per_step_compute)}\n")


@dataclass
class StreamState:
    cfg: StreamConfig
    model: StreamModel
    clock: Clock
    encoder_state: object
    o: int
    step: int = 0
    events: list[EmissionEvent] = field(default_factory=list)
    provisional: EmissionEvent | None = None
    records: list[StepRecord] = field(default_factory=list)
    final_path: list[int] = field(default_factory=list)
    final_logits: list[np.ndarray] = field(default_factory=list)
    inputs: list[np.ndarray] = field(default_factory=list)
    arrival_ms: list[float] = field(default_factory=list)
    finalized_ms: list[float] = field(default_factory=list)
    compute_ms: list[float] = field(default_factory=list)
    frames_in: int = 0  # sub-sampled frames received
    raw_in: int = 0
    closed: bool = False

    @property
    def committed(self) -> list[int]:
        return [t for ev in self.events if ev.status != PROVISIONAL for t in ev.tokens]

    def display(self) -> list[int]:
        """What the user currently sees: committed tokens plus the provisional tail."""
        tail = self.provisional.tokens if self.provisional is not None and not self.closed else []
        return self.committed + tail

    def log_text(self) -> str:
        return "".join(ev.to_line() + "\n" for ev in self.events)


def open_session(cfg: StreamConfig, model: StreamModel, clock: Clock | None = None) -> StreamState:
    return StreamState(cfg, model, clock or SimClock(), model.initial_state(cfg.c, cfg.r, cfg.l_att), -cfg.r)


def _factor(state: StreamState) -> int:
    return getattr(state.model, "frame_factor", 1)


def _check_open(state: StreamState) -> None:
    if state.closed:
        raise SessionClosed("session already finalised")


def _record_arrival(state: StreamState, raw: np.ndarray, n_frames: int) -> None:
    now = state.clock.now()
    end = state.frames_in + n_frames
    fm = state.cfg.frame_ms
    state.arrival_ms.extend(now - (end - t) * fm for t in range(state.frames_in, end))
    state.inputs.append(raw)
    state.frames_in = end
    state.raw_in += len(raw)


def _emit(state: StreamState, final_logits, prov_logits, valid_end: int | None, wall: float,
          compute: float) -> list[EmissionEvent]:
    cfg, o = state.cfg, state.o
    events = []
    closing = valid_end is not None
    logits = final_logits
    if closing:
        logits = torch.cat([final_logits, prov_logits], dim=0)
    lo = max(0, o)
    hi = min(o + len(logits), valid_end) if closing else o + cfg.c
    rows = logits[lo - o:hi - o].detach().cpu().numpy()
    if hi > lo:
        path = rows.argmax(-1).tolist()
        prev = state.final_path[-1] if state.final_path else None
        status = FINAL
        if state.provisional is not None:
            n_rev = state.provisional.end - state.provisional.start
            if ctc_collapse(path[:n_rev], prev) != state.provisional.tokens:
                status = REVISED
        events.append(EmissionEvent(state.step, lo, hi, status, ctc_collapse(path, prev), wall))
        state.final_path.extend(path)
        state.final_logits.append(rows)
        state.finalized_ms.extend([wall] * (hi - lo))
    state.provisional = None
    if cfg.r and not closing:
        prov = prov_logits.detach().cpu().numpy()
        prev = state.final_path[-1] if state.final_path else None
        ev = EmissionEvent(state.step, o + cfg.c, o + cfg.c + cfg.r, PROVISIONAL,
                           ctc_collapse(prov.argmax(-1).tolist(), prev), wall)
        events.append(ev)
        state.provisional = ev
    state.records.append(StepRecord(state.step, o, lo, hi, valid_end))
    state.compute_ms.append(compute)
    state.events.extend(events)
    state.step += 1
    state.o += cfg.c
    return events


def _prepare_push(state: StreamState, frames) -> np.ndarray:
    _check_open(state)
    frames = np.asarray(frames)
    need = state.cfg.c * _factor(state)
    if frames.ndim != 2 or frames.shape[0] != need:
        raise ChunkSizeMismatch(f"push expects exactly {need} frames, got {frames.shape}")
    _record_arrival(state, frames, state.cfg.c)
    return frames


def _prepare_tail(state: StreamState, tail) -> tuple[np.ndarray | None, int]:
    """Pad the tail to a full chunk; returns (chunk or None if nothing pending, valid end)."""
    _check_open(state)
    factor = _factor(state)
    need = state.cfg.c * factor
    tail = None if tail is None else np.asarray(tail)
    n = 0 if tail is None else tail.shape[0]
    if n > need:
        raise ChunkSizeMismatch(f"tail of {n} frames exceeds one chunk ({need})")
    valid_end = (state.raw_in + n) // factor
    if n:
        _record_arrival(state, tail, valid_end - state.frames_in)
    if valid_end <= max(0, state.o):
        return None, valid_end
    width = tail.shape[1] if n else _feature_width(state)
    chunk = np.zeros((need, width), dtype=tail.dtype if n else np.float64)
    chunk[:n] = tail
    return chunk, valid_end


def _feature_width(state: StreamState) -> int:
    if state.inputs:
        return state.inputs[0].shape[1]
    return getattr(getattr(state.model, "cfg", None), "d_feat", 1)


def push_chunk(state: StreamState, frames) -> list[EmissionEvent]:
    """Feed exactly ``c`` (sub-sampled) frames; returns the events of this step."""
    frames = _prepare_push(state, frames)
    (fin, prov, new), compute = state.clock.measure(
        state.model.forward_step, frames[None], state.encoder_state, None)
    state.encoder_state = new
    return _emit(state, fin[0], prov[0], None, state.clock.now(), compute)


def finalize(state: StreamState, tail=None) -> list[EmissionEvent]:
    """Flush the stream: pad ``tail`` to a chunk, run one last step, close the session."""
    chunk, valid_end = _prepare_tail(state, tail)
    events = []
    if chunk is not None:
        (fin, prov, new), compute = state.clock.measure(
            state.model.forward_step, chunk[None], state.encoder_state, valid_end)
        state.encoder_state = new
        events = _emit(state, fin[0], prov[0], valid_end, state.clock.now(), compute)
    state.provisional = None
    state.closed = True
    return events


def stream_features(state: StreamState, feats, clock_step: bool = True) -> list[EmissionEvent]:
    """Push a whole feature array chunk by chunk and finalise; advances a SimClock per chunk."""
    feats = np.asarray(feats)
    need = state.cfg.c * _factor(state)
    out = []
    full = len(feats) // need
    for k in range(full):
        if clock_step and isinstance(state.clock, SimClock):
            state.clock.advance(state.cfg.c * state.cfg.frame_ms)
        out += push_chunk(state, feats[k * need:(k + 1) * need])
    rest = feats[full * need:]
    if clock_step and isinstance(state.clock, SimClock) and len(rest):
        state.clock.advance(len(rest) // _factor(state) * state.cfg.frame_ms)
    out += finalize(state, rest if len(rest) else None)
    return out


# -- batching -----------------------------------------------------------------

def _advance(state: StreamState, ms: float) -> None:
    if isinstance(state.clock, SimClock) and ms:
        state.clock.advance(ms)


def _stack_states(states: Sequence[EncoderState]) -> EncoderState:
    s0 = states[0]
    cat = lambda xs: torch.cat(xs, dim=0)  # noqa: E731
    layers = []
    for i, l0 in enumerate(s0.layers):
        ls = [s.layers[i] for s in states]
        conv = type(l0.conv)(cat([l.conv.left_tail for l in ls]), l0.conv.position)
        layers.append(type(l0)(cat([l.k for l in ls]), cat([l.v for l in ls]), conv))
    frontend = None
    if s0.frontend is not None:
        frontend = tuple(cat([s.frontend[j] for s in states]) for j in range(2))
    return EncoderState(s0.o, s0.c, s0.r, s0.l_att, cat([s.input_tail for s in states]), layers,
                        frontend, s0.steps, list(s0.window_sizes))


def _split_state(state: EncoderState, i: int) -> EncoderState:
    sl = slice(i, i + 1)
    layers = [type(l)(l.k[sl], l.v[sl], type(l.conv)(l.conv.left_tail[sl], l.conv.position))
              for l in state.layers]
    frontend = None if state.frontend is None else tuple(t[sl] for t in state.frontend)
    return EncoderState(state.o, state.c, state.r, state.l_att, state.input_tail[sl], layers,
                        frontend, state.steps, list(state.window_sizes))


def run_batch(sessions: Sequence[StreamState], streams: Sequence) -> list[list[EmissionEvent]]:
    """Drive sessions in lockstep, one batched encoder call per round.

    Sessions whose stream runs out finalise in the round where the others
    push their next chunk (their windows share the same offset), then drop
    out of the batch.
    """
    if len(sessions) != len(streams):
        raise ValueError("one stream per session")
    if not sessions:
        return []
    ref = sessions[0]
    for s in sessions:
        if s.cfg != ref.cfg or s.model is not ref.model:
            raise HeterogeneousConfig("all sessions must share (c, r, l_att) and the model")
        if s.step or s.closed:
            raise HeterogeneousConfig("run_batch needs freshly opened sessions")
    need = ref.cfg.c * _factor(ref)
    feats = [np.asarray(f) for f in streams]
    logs: list[list[EmissionEvent]] = [[] for _ in sessions]
    k = 0
    active = list(range(len(sessions)))
    while active:
        chunks, ends, members = [], [], []
        for i in active:
            s, f = sessions[i], feats[i]
            if (k + 1) * need <= len(f):
                _advance(s, ref.cfg.c * ref.cfg.frame_ms)
                chunks.append(_prepare_push(s, f[k * need:(k + 1) * need]))
                ends.append(None)
                members.append(i)
                continue
            rest = f[k * need:]
            _advance(s, len(rest) // _factor(s) * ref.cfg.frame_ms)
            chunk, valid_end = _prepare_tail(s, rest if len(rest) else None)
            if chunk is None:
                s.provisional = None
                s.closed = True
                continue
            chunks.append(chunk)
            ends.append(valid_end)
            members.append(i)
        if not members:
            break
        batch_state = _stack_states([sessions[i].encoder_state for i in members])
        lead = sessions[members[0]].clock
        (fin, prov, new), compute = lead.measure(
            ref.model.forward_step, np.stack(chunks), batch_state, ends)
        seen = {id(lead)}
        for i in members:
            clk = sessions[i].clock
            if id(clk) not in seen and isinstance(clk, SimClock):
                clk.advance(compute)
            seen.add(id(clk))
        for j, i in enumerate(members):
            s = sessions[i]
            s.encoder_state = _split_state(new, j)
            logs[i] += _emit(s, fin[j], prov[j], ends[j], s.clock.now(), compute)
            if ends[j] is not None:
                s.provisional = None
                s.closed = True
        active = [i for i in active if not sessions[i].closed]
        k += 1
    return logs


# -- geometry ------------------------------------------------------------------

def _require_closed(state: StreamState) -> None:
    if not state.closed:
        raise SessionOpen("session must be finalised first")


def realized_windows(state: StreamState) -> list[tuple[int, int]]:
    """Per final frame, the ``[lo, hi]`` key range its output was computed under."""
    _require_closed(state)
    cfg = state.cfg
    total = state.records[-1].final_hi if state.records else 0
    out = []
    for rec in state.records:
        hi = rec.o + cfg.c + cfg.r
        if rec.valid_end is not None:
            hi = min(hi, rec.valid_end)
        hi = min(hi, total)
        out += [(max(0, rec.o - cfg.l_att), hi - 1)] * (rec.final_hi - rec.final_lo)
    return out


def realized_mask(state: StreamState) -> AttnMask:
    return windows_mask(realized_windows(state))


def realized_layout(state: StreamState, l_conv: int) -> Layout:
    """Token-level layout reproducing every step's window (see :class:`Layout`).

    Each step contributes one token per real window frame.  Tokens attend to
    the final tokens of the ``l_att`` frames before the window plus their own
    step's tokens; conv taps read final tokens left of the window, step tokens
    inside it and zeros past the window's right edge.
    """
    _require_closed(state)
    cfg = state.cfg
    total = state.records[-1].final_hi if state.records else 0
    final_tok = np.full(total, -1)
    source, positions, groups, conv_rows = [], [], [], []
    key_rows: list[tuple[list[int], list[int]]] = []
    for rec in state.records:
        o = rec.o
        w_lo, w_hi = max(0, o), min(o + cfg.c + cfg.r, total)
        base = len(source)
        step_tok = {t: base + i for i, t in enumerate(range(w_lo, w_hi))}
        hist = [int(final_tok[t]) for t in range(max(0, o - cfg.l_att), w_lo)]
        own = list(step_tok.values())
        for t in range(w_lo, w_hi):
            source.append(t)
            positions.append(t)
            key_rows.append((hist, own))
            taps = []
            for u in range(t - l_conv, t + l_conv + 1):
                if u < 0 or u >= w_hi:
                    taps.append(-1)
                elif u < w_lo:
                    taps.append(int(final_tok[u]))
                else:
                    taps.append(step_tok[u])
            conv_rows.append(taps)
        for t in range(rec.final_lo, rec.final_hi):
            final_tok[t] = step_tok[t]
    n = len(source)
    allowed = np.zeros((n, n), dtype=bool)
    for i, (hist, own) in enumerate(key_rows):
        allowed[i, hist] = True
        allowed[i, own] = True
    if (final_tok < 0).any():
        raise RuntimeError("stream log leaves frames without a final token")
    conv = np.array(conv_rows, dtype=np.int64).reshape(n, 2 * l_conv + 1)
    return Layout(np.array(source, dtype=np.int64), np.array(positions, dtype=np.int64), allowed,
                  conv, final_tok)


def session_inputs(state: StreamState) -> np.ndarray:
    """All raw frames received, in order."""
    if not state.inputs:
        return np.zeros((0, _feature_width(state)))
    return np.concatenate(state.inputs, axis=0)


def final_logits(state: StreamState) -> np.ndarray:
    if not state.final_logits:
        return np.zeros((0, 0))
    return np.concatenate(state.final_logits, axis=0)


def latency_report(state: StreamState) -> LatencyReport:
    _require_closed(state)
    upl = [f - a for f, a in zip(state.finalized_ms, state.arrival_ms)]
    steps = state.compute_ms
    rtf = float(np.mean(steps)) / (state.cfg.c * state.cfg.frame_ms) if steps else 0.0
    return LatencyReport(upl, float(np.mean(upl)) if upl else 0.0, float(max(upl)) if upl else 0.0,
                         rtf, list(steps))
