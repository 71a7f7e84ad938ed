"""Verification suites run by ``tsca verify``.

Each suite returns a list of :class:`Check` results; a suite passes when every
check does.  The ``faults`` suite injects known defects and passes when the
oracles catch them.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import oracle
from .attention import AttnCache, RelPosAttention, rel_range_for, tsca_step
from .convolution import dcc_forward, dcc_stream
from .encoder import Encoder, EncoderConfig, ctc_greedy
from .masking import chunk_mask, compose_step_masks, drc_intervals, drc_mask, stream_schedule
from .streaming import (SimClock, StreamConfig, final_logits, finalize, open_session, push_chunk,
                        stream_features)

P_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0)
E2E_C = 10
E2E_RS = (0, 3, 6, 9)
E2E_L_ATT = 12


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} {self.detail}".rstrip()


def _from_report(rep: oracle.EquivalenceReport) -> Check:
    return Check(rep.name, rep.passed,
                 f"max_abs={rep.max_abs_diff:.3e} max_rel={rep.max_rel_diff:.3e} "
                 f"frames={rep.frames_compared} tol={rep.tolerance:.0e}")


def small_encoder(seed: int, precision: str = "double", layers: int = 2, kernel_size: int = 5,
                  c: int = E2E_C, r: int = max(E2E_RS), l_att: int = E2E_L_ATT) -> Encoder:
    cfg = EncoderConfig(layers=layers, d_model=16, heads=2, ffn_dim=32, kernel_size=kernel_size,
                        vocab_size=8, d_feat=8, precision=precision, seed=seed)
    return Encoder(cfg, rel_range=rel_range_for(c, r, l_att))


# -- masks ------------------------------------------------------------------------

def suite_masks(seeds: int = 5, precision: str = "double") -> list[Check]:
    checks = []
    for p in P_SWEEP:
        mismatches = 0
        for s in range(seeds):
            rng = np.random.default_rng(s)
            size, l, c = int(rng.integers(1, 60)), int(rng.integers(0, 12)), int(rng.integers(2, 12))
            r = int(rng.integers(0, c))
            with warnings.catch_warnings():
                # random sizes may put r >= l; the warning is expected here
                warnings.simplefilter("ignore", UserWarning)
                got = drc_mask(size, l, c, r, p, np.random.default_rng(1000 + s)).allowed
            want = oracle.drc_reference(size, l, c, r, p, np.random.default_rng(1000 + s))
            mismatches += int((got != want).sum())
            if p == 0.0:
                mismatches += int((got != chunk_mask(size, l, c).allowed).sum())
        checks.append(Check(f"drc_vs_reference_p{p}", mismatches == 0, f"mismatched_entries={mismatches}"))
    for p in P_SWEEP:
        stats = oracle.mask_statistics(lambda g: drc_intervals(3000, 6, 10, 3, p, g),
                                       range(10_000), 10_000, p)
        detail = f"rate={stats.rate:.4f} " + " ".join(
            f"m{m}={stats.run_rates[m]:.4f}" for m in sorted(stats.run_rates))
        checks.append(Check(f"extension_stats_p{p}", stats.within(3.0), detail))
    return checks


# -- attention --------------------------------------------------------------------

def suite_attention(seeds: int = 5, precision: str = "double") -> list[Check]:
    tol = 1e-12 if precision == "double" else oracle.TOL_SINGLE
    dtype = torch.float64 if precision == "double" else torch.float32
    worst_direct = worst_stream = 0.0
    frames = 0
    for s in range(seeds):
        rng = np.random.default_rng(s)
        c, l_att = int(rng.integers(2, 6)), int(rng.integers(0, 8))
        r = int(rng.integers(0, c))
        total = int(rng.integers(1, 25))
        attn = RelPosAttention(8, 2, rel_range_for(c, r, max(l_att, total)), seed=s, dtype=dtype)
        params = oracle.attention_params(attn)
        x = rng.standard_normal((total, 8))
        xt = torch.as_tensor(x, dtype=dtype)
        mask = drc_mask(total, l_att, c, r, 0.5, rng).allowed
        with torch.no_grad():
            z = attn(xt, torch.from_numpy(mask)).double().numpy()
        worst_direct = max(worst_direct, float(np.abs(z - oracle.direct_attention(x, mask, params)).max()))
        z_stream = _stream_attention(attn, xt, c, r, l_att)
        composed = compose_step_masks(total, c, r, l_att).allowed
        want = oracle.direct_attention(x, composed, params)
        worst_stream = max(worst_stream, float(np.abs(z_stream - want).max()))
        frames += total
    return [
        Check("engine_vs_direct", worst_direct <= tol, f"max_abs={worst_direct:.3e} tol={tol:.0e}"),
        Check("tsca_stream_vs_direct", worst_stream <= tol,
              f"max_abs={worst_stream:.3e} frames={frames} tol={tol:.0e}"),
    ]


def _stream_attention(attn: RelPosAttention, x: torch.Tensor, c: int, r: int, l_att: int) -> np.ndarray:
    """Single-layer TSCA over ``x``; the final partial chunk is zero padded and masked."""
    total, d = x.shape
    state = AttnCache.empty(1, l_att, r, d, dtype=x.dtype)
    outs = [np.zeros((0, d))]
    with torch.no_grad():
        for o, lo, hi in stream_schedule(total, c, r):
            chunk = torch.zeros(1, c, d, dtype=x.dtype)
            seg = x[o + r:min(total, o + r + c)]
            chunk[0, :len(seg)] = seg
            last = o + r + c > total
            fin, prov, state = tsca_step(attn, chunk, state, o, c, r, total if last else None)
            z = torch.cat([fin, prov], dim=1)[0]
            outs.append(z[lo - o:hi - o].double().numpy())
    return np.concatenate(outs)


# -- convolution --------------------------------------------------------------------

def suite_conv(seeds: int = 5, precision: str = "double") -> list[Check]:
    tol = 1e-12 if precision == "double" else oracle.TOL_SINGLE
    dtype = torch.float64 if precision == "double" else torch.float32
    checks = []
    for kernel in (3, 15):
        worst_stream = worst_layout = 0.0
        for s in range(seeds):
            for r in E2E_RS:
                rng = np.random.default_rng(100 * s + r)
                total = int(rng.integers(1, 60))
                x = rng.standard_normal((total, 4))
                w = rng.standard_normal((4, kernel))
                want = oracle.conv_reference(x, w, E2E_C, r)
                xt, wt = torch.as_tensor(x, dtype=dtype), torch.as_tensor(w, dtype=dtype)
                worst_stream = max(worst_stream, float(np.abs(
                    dcc_stream(xt, E2E_C, r, wt).double().numpy() - want).max()))
                worst_layout = max(worst_layout, float(np.abs(
                    dcc_forward(xt, E2E_C, r, wt).double().numpy() - want).max()))
        checks.append(Check(f"dcc_stream_k{kernel}", worst_stream <= tol, f"max_abs={worst_stream:.3e}"))
        checks.append(Check(f"dcc_layout_k{kernel}", worst_layout <= tol, f"max_abs={worst_layout:.3e}"))
    return checks


# -- end to end ---------------------------------------------------------------------

def run_stream(enc: Encoder, feats: np.ndarray, c: int, r: int, l_att: int,
               hook: Callable | None = None):
    """Stream ``feats`` through a fresh session; ``hook(state, k)`` runs before push ``k``."""
    state = open_session(StreamConfig(c, r, l_att), enc, SimClock())
    if hook is None:
        stream_features(state, feats)
        return state
    need = c * enc.frame_factor
    full = len(feats) // need
    for k in range(full):
        hook(state, k)
        push_chunk(state, feats[k * need:(k + 1) * need])
    rest = feats[full * need:]
    finalize(state, rest if len(rest) else None)
    return state


def suite_e2e(seeds: int = 20, precision: str = "double") -> list[Check]:
    tol = oracle.tolerance(precision)
    checks = []
    for r in E2E_RS:
        worst, frames, token_ok = 0.0, 0, True
        for s in range(seeds):
            enc = small_encoder(s, precision)
            rng = np.random.default_rng(s)
            feats = rng.standard_normal((int(rng.integers(1, 6 * E2E_C)), enc.cfg.d_feat))
            state = run_stream(enc, feats, E2E_C, r, E2E_L_ATT)
            rep = oracle.offline_equivalence(state, enc, tol)
            worst, frames = max(worst, rep.max_abs_diff), frames + rep.frames_compared
            token_ok &= state.committed == ctc_greedy(torch.from_numpy(final_logits(state)))
        checks.append(Check(f"stream_vs_offline_c{E2E_C}_r{r}", worst <= tol,
                            f"max_abs={worst:.3e} frames={frames} tol={tol:.0e}"))
        checks.append(Check(f"tokens_vs_greedy_c{E2E_C}_r{r}", token_ok))
    return checks


# -- gradients ----------------------------------------------------------------------

def suite_grad(seeds: int = 3, precision: str = "double") -> list[Check]:
    checks = []
    for s in range(seeds):
        rng = np.random.default_rng(s)
        attn = RelPosAttention(8, 2, (-8, 8), seed=s)
        x = rng.standard_normal((5, 8))
        mask = drc_mask(5, 2, 2, 1, 0.5, rng).allowed
        for rep in oracle.fd_gradcheck(attn, x, mask).values():
            rep.name = f"seed{s}_{rep.name}"
            checks.append(_from_report(rep))
    return checks


# -- fault injection ----------------------------------------------------------------

class _ScaledGrad(RelPosAttention):
    """Same forward values, gradients scaled by 1.01."""

    def forward(self, x, allowed, positions=None):
        z = super().forward(x, allowed, positions)
        return z + 0.01 * (z - z.detach())


def suite_faults(seeds: int = 3, precision: str = "double") -> list[Check]:
    checks = []
    enc = small_encoder(0, "double")
    feats = np.random.default_rng(0).standard_normal((45, enc.cfg.d_feat))

    def corrupt(state, k):
        if k == 2:
            state.encoder_state.layers[0].k[0, -1, 0] += 1e-3

    clean = oracle.offline_equivalence(run_stream(enc, feats, 10, 6, 12), enc)
    broken = oracle.offline_equivalence(run_stream(enc, feats, 10, 6, 12, corrupt), enc)
    checks.append(Check("clean_stream_passes", clean.passed, f"max_abs={clean.max_abs_diff:.3e}"))
    checks.append(Check("cache_corruption_detected", not broken.passed,
                        f"max_abs={broken.max_abs_diff:.3e}"))

    rng = np.random.default_rng(1)
    attn = RelPosAttention(8, 2, (-10, 10), seed=1)
    params = oracle.attention_params(attn)
    x = rng.standard_normal((6, 8))
    mask = np.ones((6, 6), dtype=bool)
    with torch.no_grad():
        attn.u[0] += 1e-6
        z = attn(torch.from_numpy(x), torch.from_numpy(mask)).numpy()
    diff = float(np.abs(z - oracle.direct_attention(x, mask, params)).max())
    checks.append(Check("attention_bias_perturbation_detected", diff > 1e-12, f"max_abs={diff:.3e}"))

    x = rng.standard_normal((30, 4))
    w = rng.standard_normal((4, 5))
    y = dcc_stream(torch.from_numpy(x), 10, 3, torch.from_numpy(w)).numpy()
    want = oracle.conv_reference(x, w, 10, 0)
    diff = float(np.abs(y - want).max())
    checks.append(Check("conv_lookahead_change_detected", diff > 1e-12, f"max_abs={diff:.3e}"))

    got = drc_mask(40, 4, 5, 2, 0.5, np.random.default_rng(7)).allowed
    want = oracle.drc_reference(40, 4, 5, 2, 0.5, np.random.default_rng(8))
    checks.append(Check("mask_seed_change_detected", bool((got != want).any())))

    faulty = copy.deepcopy(RelPosAttention(8, 2, (-8, 8), seed=2))
    faulty.__class__ = _ScaledGrad
    reps = oracle.fd_gradcheck(faulty, rng.standard_normal((4, 8)), np.ones((4, 4), dtype=bool))
    caught = [k for k, rep in reps.items() if not rep.passed]
    checks.append(Check("gradient_scaling_detected", len(caught) == len(reps), f"caught={','.join(caught)}"))
    return checks


SUITES: dict[str, Callable[..., list[Check]]] = {
    "masks": suite_masks,
    "attention": suite_attention,
    "conv": suite_conv,
    "e2e": suite_e2e,
    "grad": suite_grad,
    "faults": suite_faults,
}
