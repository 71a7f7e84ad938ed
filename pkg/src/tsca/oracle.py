"""Independent reference implementations and verification harnesses.

Everything here is deliberately naive: explicit loops over frames and heads,
plain numpy, no caching.  Nothing is imported from the attention or
convolution modules except to read their parameters.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import DegenerateInput

TOL_DOUBLE = 1e-10
TOL_SINGLE = 1e-4
GRAD_RTOL = 1e-4


def tolerance(precision: str) -> float:
    return TOL_DOUBLE if precision == "double" else TOL_SINGLE


@dataclass
class EquivalenceReport:
    name: str
    max_abs_diff: float
    max_rel_diff: float
    frames_compared: int
    tolerance: float
    passed: bool = field(init=False)
    metric: str = "abs"

    def __post_init__(self):
        err = self.max_abs_diff if self.metric == "abs" else self.max_rel_diff
        self.passed = bool(err <= self.tolerance)

    def to_text(self) -> str:
        return (f"name={self.name}\nmax_abs_diff={self.max_abs_diff:.3e}\n"
                f"max_rel_diff={self.max_rel_diff:.3e}\nframes_compared={self.frames_compared}\n"
                f"tolerance={self.tolerance:.1e}\npass={str(self.passed).lower()}\n")


def compare(name: str, got, want, tol: float) -> EquivalenceReport:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        return EquivalenceReport(name, math.inf, math.inf, 0, tol)
    if got.size == 0:
        return EquivalenceReport(name, 0.0, 0.0, 0, tol)
    diff = np.abs(got - want)
    rel = diff / np.maximum(np.abs(want), 1e-300)
    return EquivalenceReport(name, float(diff.max()), float(rel.max()), got.shape[0], tol)


# -- attention -----------------------------------------------------------------

def _sinusoid_row(delta: int, d: int) -> np.ndarray:
    row = np.empty(d)
    for k in range(d):
        freq = 10000.0 ** (-(k - k % 2) / d)
        row[k] = math.sin(delta * freq) if k % 2 == 0 else math.cos(delta * freq)
    return row


def attention_params(attn) -> dict:
    """Parameters of a ``RelPosAttention`` as float64 numpy arrays."""
    p = {name: getattr(attn, name).detach().cpu().double().numpy().copy()
         for name in ("W_q", "W_k", "W_v", "W_R", "W_o", "u", "v")}
    p["heads"] = attn.heads
    return p


def direct_attention(x, allowed, params: dict, positions=None) -> np.ndarray:
    """Term-by-term relative attention for every query, with no vectorised shortcuts."""
    x = np.asarray(x, dtype=np.float64)
    allowed = np.asarray(allowed, dtype=bool)
    n_q, n_k = allowed.shape
    d = x.shape[1]
    heads = params["heads"]
    dk = d // heads
    pos = np.arange(x.shape[0]) if positions is None else np.asarray(positions)
    q_off = n_k - n_q  # queries are the last n_q of the keys
    Wq, Wk, Wv, WR, Wo = (params[k] for k in ("W_q", "W_k", "W_v", "W_R", "W_o"))
    u, v = params["u"], params["v"]
    out = np.zeros((n_q, d))
    for i in range(n_q):
        xi = x[q_off + i]
        concat = np.zeros(d)
        for h in range(heads):
            sl = slice(h * dk, (h + 1) * dk)
            scores = {}
            for j in range(n_k):
                if not allowed[i, j]:
                    continue
                xj = x[j]
                rel = _sinusoid_row(int(pos[q_off + i] - pos[j]), d)
                t1 = (Wq[sl] @ xi) @ (Wk[sl] @ xj)
                t2 = (Wq[sl] @ xi) @ (WR[sl] @ rel)
                t3 = u[sl] @ (Wk[sl] @ xj)
                t4 = v[sl] @ (WR[sl] @ rel)
                scores[j] = (t1 + t2 + t3 + t4) / math.sqrt(dk)
            top = max(scores.values())
            weights = {j: math.exp(s - top) for j, s in scores.items()}
            total = sum(weights.values())
            acc = np.zeros(dk)
            for j, w in weights.items():
                acc += (w / total) * (Wv[sl] @ x[j])
            concat[sl] = acc
        out[i] = Wo @ concat
    return out


# -- convolution -----------------------------------------------------------------

def conv_reference(x, weight, c: int, r: int, lookahead: Sequence[bool] | None = None) -> np.ndarray:
    """Per-frame receptive windows: left ``l_conv`` always, right up to chunk end + lookahead."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    total, d = x.shape
    l_conv = (w.shape[1] - 1) // 2
    ahead = min(l_conv, r)
    y = np.zeros((total, d))
    for t in range(total):
        k = t // c
        on = True if lookahead is None else lookahead[k]
        limit = min(total - 1, (k + 1) * c - 1 + (ahead if on else 0))
        for tap in range(w.shape[1]):
            u = t + tap - l_conv
            if 0 <= u <= limit:
                y[t] += w[:, tap] * x[u]
    return y


# -- masks -------------------------------------------------------------------------

def drc_reference(size: int, l: int, c: int, r: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Direct transcription of the DRC pseudocode, with index clipping."""
    mask = np.zeros((size, size), dtype=int)
    i = 0
    while i < size:
        cur_c = c
        if rng.random() < p:
            cur_c = c + r
        rows = range(i, min(i + cur_c, size))
        cols = range(max(i - l, 0), min(i + cur_c, size))
        for a in rows:
            for b in cols:
                mask[a][b] = 1
        i = i + c
    return mask.astype(bool)


@dataclass
class MaskStats:
    p: float
    chunks: int
    rate: float
    sigma: float
    run_rates: dict[int, float]
    run_sigmas: dict[int, float]
    run_blocks: dict[int, int]

    def within(self, k: float = 3.0) -> bool:
        if abs(self.rate - self.p) > k * self.sigma:
            return False
        return all(abs(self.run_rates[m] - self.p ** m) <= k * self.run_sigmas[m] for m in self.run_rates)


def mask_statistics(generator: Callable[[np.random.Generator], Sequence], seeds: Sequence[int],
                    n_chunks: int, p: float, ms: Sequence[int] = (1, 2, 3)) -> MaskStats:
    """Empirical extension statistics over at least ``n_chunks`` chunks.

    ``generator(rng)`` returns a mask's interval list.  Runs of ``m``
    extended chunks are counted on non-overlapping blocks of ``m`` consecutive
    chunks within each mask, so every block is an independent Bernoulli(p**m).
    """
    if n_chunks < 1000:
        raise ValueError("need at least 1000 chunks for meaningful statistics")
    flags_per_mask = []
    total = 0
    for seed in seeds:
        flags = [iv.extended for iv in generator(np.random.default_rng(seed))]
        flags_per_mask.append(flags)
        total += len(flags)
        if total >= n_chunks:
            break
    if total < n_chunks:
        raise ValueError(f"only {total} chunks from {len(seeds)} seeds")
    all_flags = np.array([f for fl in flags_per_mask for f in fl], dtype=float)
    rate = float(all_flags.mean())
    sigma = math.sqrt(p * (1 - p) / len(all_flags))
    run_rates, run_sigmas, run_blocks = {}, {}, {}
    for m in ms:
        hits = blocks = 0
        for fl in flags_per_mask:
            for b in range(0, len(fl) - m + 1, m):
                blocks += 1
                hits += all(fl[b:b + m])
        pm = p ** m
        run_rates[m] = hits / blocks
        run_sigmas[m] = math.sqrt(pm * (1 - pm) / blocks)
        run_blocks[m] = blocks
    return MaskStats(p, len(all_flags), rate, sigma, run_rates, run_sigmas, run_blocks)


# -- gradients ---------------------------------------------------------------------

GRAD_GROUPS = ("W_q", "W_k", "W_v", "W_R", "u", "v")


def fd_gradcheck(attn, x, allowed, loss: Callable | None = None, step: float = 1e-5,
                 rtol: float = GRAD_RTOL, positions=None) -> dict[str, EquivalenceReport]:
    """Autograd vs central differences for each attention parameter group and the input.

    The relative error of a group is ``|g_a - g_fd|_inf / max(|g_a|_inf, |g_fd|_inf)``
    (taken as 0 when both gradients vanish).
    """
    if loss is None:
        loss = lambda z: (z ** 2).sum() * 0.5  # noqa: E731
    x = torch.as_tensor(x, dtype=torch.float64).clone()
    allowed = torch.as_tensor(np.asarray(allowed), dtype=torch.bool)
    tensors = {name: getattr(attn, name) for name in GRAD_GROUPS}
    tensors["x"] = x

    def value() -> float:
        with torch.no_grad():
            return float(loss(attn(x, allowed, positions)))

    with torch.enable_grad():
        for t in tensors.values():
            t.requires_grad_(True)
            t.grad = None
        loss(attn(x, allowed, positions)).backward()
    analytic = {k: t.grad.detach().clone() for k, t in tensors.items()}
    for t in tensors.values():
        t.requires_grad_(False)
        t.grad = None

    reports = {}
    for name, t in tensors.items():
        fd = torch.zeros_like(t)
        flat, gflat = t.data.view(-1), fd.view(-1)
        for idx in range(flat.numel()):
            orig = float(flat[idx])
            flat[idx] = orig + step
            up = value()
            flat[idx] = orig - step
            down = value()
            flat[idx] = orig
            gflat[idx] = (up - down) / (2 * step)
        a = analytic[name]
        scale = max(float(a.abs().max()), float(fd.abs().max()))
        abs_err = float((a - fd).abs().max())
        rel = 0.0 if scale < 1e-12 else abs_err / scale
        reports[name] = EquivalenceReport(f"grad_{name}", abs_err, rel, t.numel(), rtol, metric="rel")
    return reports


# -- streaming equivalence ---------------------------------------------------------

def offline_equivalence(state, encoder, tol: float | None = None) -> EquivalenceReport:
    """Compare a finalised session's final logits with one offline pass over its realized layout."""
    from .streaming import final_logits, realized_layout, session_inputs

    tol = tolerance(encoder.cfg.precision) if tol is None else tol
    got = final_logits(state)
    if got.size == 0:
        return EquivalenceReport("offline_equivalence", 0.0, 0.0, 0, tol)
    layout = realized_layout(state, encoder.cfg.l_conv)
    with torch.no_grad():
        want = encoder.forward_offline(session_inputs(state), layout).double().numpy()
    return compare("offline_equivalence", got, want, tol)


# -- evaluation metrics ------------------------------------------------------------

def wer(hyp: Sequence, ref: Sequence) -> tuple[int, int, int, int]:
    """Levenshtein alignment -> (substitutions, insertions, deletions, reference length)."""
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=int)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(sub, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i or j:
        if i and j and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and cost[i, j] == cost[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), ins, dels, n


def _rwerr(err_a: float, err_b: float, words: float) -> float:
    if err_a == 0:
        return 0.0 if err_b == 0 else math.nan
    return (err_a / words - err_b / words) / (err_a / words)


@dataclass
class BootstrapResult:
    mean: float
    lo: float
    hi: float
    samples: np.ndarray

    def format(self, scale: float = 100.0) -> str:
        return f"{self.mean * scale:.1f}_[{self.lo * scale:.1f}, {self.hi * scale:.1f}]"


def bootstrap_ci(pairs: Sequence[tuple[float, float, float]], B: int = 5000, alpha: float = 0.05,
                 seed: int = 0, exhaustive: bool = False) -> BootstrapResult:
    """Percentile bootstrap of the relative WER reduction of system B over system A.

    ``pairs`` holds ``(errors_A, errors_B, ref_words)`` per utterance.  Each
    resample draws utterances with replacement and pools their counts.  The
    interval is the ``alpha`` and ``1 - alpha`` percentiles of the resampled
    values.  ``exhaustive`` enumerates all ``n**n`` ordered resamples instead
    of drawing ``B`` (tiny sets only).
    """
    if B < 1 or not 0 < alpha < 0.5:
        raise ValueError("need B >= 1 and 0 < alpha < 0.5")
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 3)
    if len(arr) == 0 or (arr[:, 2] <= 0).any():
        raise DegenerateInput("every utterance needs a positive reference length")
    ea, eb, words = arr.sum(0)
    if ea == 0:
        raise DegenerateInput("system A has zero errors; relative reduction undefined")
    point = _rwerr(ea, eb, words)
    n = len(arr)
    if exhaustive:
        idx = np.array(list(itertools.product(range(n), repeat=n)))
    else:
        idx = np.random.default_rng(seed).integers(0, n, size=(B, n))
    sums = arr[idx].sum(axis=1)
    samples = np.array([_rwerr(a, b, w) for a, b, w in sums])
    lo, hi = np.nanpercentile(samples, [100 * alpha, 100 * (1 - alpha)])
    return BootstrapResult(point, float(lo), float(hi), samples)
