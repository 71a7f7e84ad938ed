"""Command-line interface: ``tsca <command> [flags]``.

Exit codes: 0 success, 2 usage or input error, 3 invariant breach (including
a failed verification suite).
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import formats
from .attention import rel_range_for
from .encoder import Encoder, EncoderConfig
from .errors import (ChunkSizeMismatch, DegenerateInput, FormatError, InvalidConfig,
                     TSCAError)
from .masking import drc_mask
from .oracle import bootstrap_ci
from .streaming import (PROVISIONAL, RealClock, SimClock, StreamConfig, latency_report,
                        open_session, push_chunk, run_batch, stream_features)
from .verify import SUITES

EXIT_OK, EXIT_INPUT, EXIT_BREACH = 0, 2, 3
INPUT_ERRORS = (InvalidConfig, FormatError, ChunkSizeMismatch, DegenerateInput, OSError, ValueError,
                KeyError)


@dataclass
class RunConfig:
    # context
    c0: int = 10
    r0: int = 0
    n: int = 3
    d_step: int = 3
    p: float = 0.75
    c: int = 10
    r: int = 6
    l_att: int = 60
    # encoder
    layers: int = 4
    d_model: int = 64
    heads: int = 2
    ffn_dim: int = 256
    kernel_size: int = 15
    vocab_size: int = 32
    d_feat: int = 0  # 0: take from the feature file
    subsample: bool = False
    precision: str = "double"
    seed: int = 0
    # paths
    features: str = ""
    weights: str = ""
    tokens: str = ""
    out_dir: str = "."

    def encoder_config(self, d_feat: int) -> EncoderConfig:
        return EncoderConfig(layers=self.layers, d_model=self.d_model, heads=self.heads,
                             ffn_dim=self.ffn_dim, kernel_size=self.kernel_size,
                             vocab_size=self.vocab_size, d_feat=self.d_feat or d_feat,
                             subsample=self.subsample, precision=self.precision, seed=self.seed)


RUN_SCHEMA = {f.name: f.type for f in fields(RunConfig)}


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    """Defaults, then the config file, then any flag that was given."""
    values = {}
    if path:
        values = formats.parse_config_text(Path(path).read_text(encoding="utf-8"), RUN_SCHEMA)
    values.update({k: v for k, v in overrides.items() if v is not None and k in RUN_SCHEMA})
    return RunConfig(**values)


def _fail(msg: str, code: int = EXIT_INPUT) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _indexed(path: str, i: int, n: int) -> Path:
    p = Path(path)
    return p if n == 1 else p.with_name(f"{p.stem}.{i}{p.suffix}")


# -- gen-mask ---------------------------------------------------------------------

def cmd_gen_mask(args) -> int:
    mask = drc_mask(args.size, args.l, args.c, args.r, args.p, np.random.default_rng(args.seed))
    text = mask.to_text() if args.format == "txt" else mask.to_pgm()
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        formats.atomic_write(args.out, text)
    return EXIT_OK


# -- simulate ---------------------------------------------------------------------

def build_encoder(cfg: RunConfig, d_feat: int) -> Encoder:
    enc = Encoder(cfg.encoder_config(d_feat), rel_range=rel_range_for(cfg.c, cfg.r, cfg.l_att))
    if cfg.weights:
        enc.load_named_tensors(formats.load_weights(cfg.weights))
    return enc


def render(ids, tokens: list[str] | None) -> str:
    if tokens is None:
        return " ".join(str(i) for i in ids)
    return formats.detokenize(ids, tokens)


def _transcript_line(state, tokens) -> str:
    text = render(state.committed, tokens)
    if state.provisional is not None and state.provisional.tokens and not state.closed:
        text += f"[{render(state.provisional.tokens, tokens)}]"
    return text


def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config, {"c": args.c, "r": args.r, "l_att": args.l_att, "seed": args.seed,
                                        "weights": args.weights, "tokens": args.tokens,
                                        "precision": args.precision})
    paths = args.features or ([cfg.features] if cfg.features else [])
    if not paths:
        return _fail("no feature file given")
    loaded = [formats.load_features(p) for p in paths]
    widths = {f.shape[1] for f, _ in loaded if f.shape[0]} or {loaded[0][0].shape[1] or 1}
    if len(widths) != 1:
        return _fail("feature files disagree on d_feat")
    enc = build_encoder(cfg, widths.pop())
    tokens = formats.load_tokens(cfg.tokens) if cfg.tokens else None
    raw_ms = loaded[0][1]
    scfg = StreamConfig(cfg.c, cfg.r, cfg.l_att, frame_ms=raw_ms * enc.frame_factor)

    def clock():
        return SimClock(compute_ms=args.sim_compute_ms) if args.sim_compute_ms is not None else RealClock()

    sessions = [open_session(scfg, enc, clock()) for _ in loaded]
    batch = max(1, args.batch)
    for lo in range(0, len(sessions), batch):
        group = list(range(lo, min(len(sessions), lo + batch)))
        if len(group) == 1:
            i = group[0]
            _stream_verbose(sessions[i], loaded[i][0], tokens, prefix="" if len(sessions) == 1 else f"{i}: ")
        else:
            run_batch([sessions[i] for i in group], [loaded[i][0] for i in group])
            for i in group:
                print(f"{i}: {_transcript_line(sessions[i], tokens)}")
    n = len(sessions)
    for i, s in enumerate(sessions):
        _check_log(s)
        if args.log:
            formats.atomic_write(_indexed(args.log, i, n), s.log_text())
        if args.report:
            formats.atomic_write(_indexed(args.report, i, n), latency_report(s).to_text())
    return EXIT_OK


def _stream_verbose(state, feats, tokens, prefix: str) -> None:
    need = state.cfg.c * state.model.frame_factor
    full = len(feats) // need
    for k in range(full):
        if isinstance(state.clock, SimClock):
            state.clock.advance(state.cfg.c * state.cfg.frame_ms)
        push_chunk(state, feats[k * need:(k + 1) * need])
        print(prefix + _transcript_line(state, tokens))
    # the remainder goes through the normal flush path
    stream_features(state, feats[full * need:])
    print(prefix + _transcript_line(state, tokens))


def _check_log(state) -> None:
    """Final spans must tile [0, T) in order; anything else is an internal breach."""
    pos = 0
    for ev in state.events:
        if ev.status == PROVISIONAL:
            continue
        if ev.start != pos:
            raise InvariantBreach(f"final span starts at {ev.start}, expected {pos}")
        pos = ev.end
    if pos != state.frames_in:
        raise InvariantBreach(f"final spans cover {pos} of {state.frames_in} frames")


class InvariantBreach(TSCAError, RuntimeError):
    pass


# -- verify -----------------------------------------------------------------------

def cmd_verify(args) -> int:
    kwargs = {"precision": args.precision}
    if args.seeds is not None:
        kwargs["seeds"] = args.seeds
    checks = SUITES[args.suite](**kwargs)
    for ch in checks:
        print(ch.line())
    failed = sum(not ch.passed for ch in checks)
    print(f"suite={args.suite} checks={len(checks)} failed={failed}")
    return EXIT_OK if failed == 0 else EXIT_BREACH


# -- bootstrap --------------------------------------------------------------------

def read_scores(path: str) -> list[tuple[int, int]]:
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected errors<TAB>ref_words")
        rows.append((int(parts[0]), int(parts[1])))
    return rows


def cmd_bootstrap(args) -> int:
    a, b = read_scores(args.scores[0]), read_scores(args.scores[1])
    if len(a) != len(b):
        return _fail("score files have different utterance counts")
    if any(wa != wb for (_, wa), (_, wb) in zip(a, b)):
        return _fail("score files disagree on reference lengths")
    pairs = [(ea, eb, w) for (ea, w), (eb, _) in zip(a, b)]
    res = bootstrap_ci(pairs, B=args.B, alpha=args.alpha, seed=args.seed, exhaustive=args.exhaustive)
    print(f"rwerr={res.mean:.6g} lo={res.lo:.6g} hi={res.hi:.6g}")
    return EXIT_OK


# -- bench ------------------------------------------------------------------------

def parse_configs(text: str) -> list[tuple[int, int]]:
    out = []
    for item in text.split(","):
        c, _, r = item.strip().partition(":")
        out.append((int(c), int(r or 0)))
    return out


def bench_rows(enc: Encoder, feats: np.ndarray, frame_ms: float, configs, l_att: int,
               repeat: int) -> list[dict]:
    rows = []
    for c, r in configs:
        steps, times, window = 0, [], None
        for _ in range(repeat):
            state = open_session(StreamConfig(c, r, l_att, frame_ms), enc, RealClock())
            stream_features(state, feats)
            times += state.compute_ms
            steps = len(state.compute_ms)
            sizes = set(state.encoder_state.window_sizes)
            window = sizes.pop() if len(sizes) == 1 else None
        mean_ms = float(np.mean(times)) if times else 0.0
        rows.append({"c": c, "r": r, "window": window if window is not None else l_att + c + r,
                     "steps": steps, "mean_ms": mean_ms, "rtf": mean_ms / (c * frame_ms)})
    return rows


def cmd_bench(args) -> int:
    configs = parse_configs(args.configs)
    cfg = load_run_config(args.config, {"l_att": args.l_att, "seed": args.seed,
                                        "precision": args.precision})
    if args.features:
        feats, raw_ms = formats.load_features(args.features)
    else:
        feats, raw_ms = synthetic_features(args.frames, 80, args.seed), 10.0
    top_c = max(c for c, _ in configs)
    top_r = max(r for _, r in configs)
    enc = Encoder(cfg.encoder_config(feats.shape[1]), rel_range=rel_range_for(top_c, top_r, cfg.l_att))
    if cfg.weights:
        enc.load_named_tensors(formats.load_weights(cfg.weights))
    rows = bench_rows(enc, feats, raw_ms * enc.frame_factor, configs, cfg.l_att, max(1, args.repeat))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["c", "r", "window", "steps", "mean_ms", "rtf"],
                            lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "mean_ms": f"{row['mean_ms']:.4f}", "rtf": f"{row['rtf']:.6f}"})
    if args.out:
        formats.atomic_write(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# -- make-features / init-weights ----------------------------------------------------

def synthetic_features(frames: int, d_feat: int, seed: int) -> np.ndarray:
    """Seeded sinusoid mixtures plus noise; stands in for filter-bank features."""
    rng = np.random.default_rng(seed)
    t = np.arange(frames)[:, None]
    freqs = rng.uniform(0.01, 0.3, size=(3, d_feat))
    phases = rng.uniform(0, 2 * np.pi, size=(3, d_feat))
    amps = rng.uniform(0.2, 1.0, size=(3, d_feat))
    mix = sum(amps[k] * np.sin(freqs[k] * t + phases[k]) for k in range(3))
    return (mix + 0.1 * rng.standard_normal((frames, d_feat))).astype(np.float32)


def cmd_make_features(args) -> int:
    formats.save_features(args.out, synthetic_features(args.frames, args.d_feat, args.seed), args.frame_ms)
    return EXIT_OK


def cmd_init_weights(args) -> int:
    cfg = load_run_config(args.config, {"seed": args.seed})
    if not cfg.d_feat:
        cfg = replace(cfg, d_feat=80)
    enc = Encoder(cfg.encoder_config(cfg.d_feat))
    formats.save_weights(args.out, enc.named_tensors())
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tsca", description="Streaming TSCA encoder toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-mask", help="write a dynamic right context mask")
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--l", type=int, required=True)
    g.add_argument("--c", type=int, required=True)
    g.add_argument("--r", type=int, default=0)
    g.add_argument("--p", type=float, default=0.75)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=["txt", "pgm"], default="txt")
    g.add_argument("--out", default="-")
    g.set_defaults(func=cmd_gen_mask)

    s = sub.add_parser("simulate", help="stream feature files through the encoder")
    s.add_argument("--features", nargs="+")
    s.add_argument("--weights")
    s.add_argument("--tokens")
    s.add_argument("--config")
    s.add_argument("--c", type=int)
    s.add_argument("--r", type=int)
    s.add_argument("--l-att", dest="l_att", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--precision", choices=["single", "double"])
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--log")
    s.add_argument("--report")
    s.add_argument("--sim-compute-ms", type=float, default=None,
                   help="use a simulated clock charging this many ms per step")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="run an oracle verification suite")
    v.add_argument("--suite", choices=sorted(SUITES), required=True)
    v.add_argument("--seeds", type=int)
    v.add_argument("--precision", choices=["single", "double"], default="double")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bootstrap", help="percentile bootstrap of relative WER reduction")
    b.add_argument("--scores", nargs=2, required=True, metavar=("A", "B"))
    b.add_argument("--B", type=int, default=5000)
    b.add_argument("--alpha", type=float, default=0.05)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--exhaustive", action="store_true")
    b.set_defaults(func=cmd_bootstrap)

    m = sub.add_parser("bench", help="per-step timing and window sizes per (c, r)")
    m.add_argument("--configs", default="10:6,16:0", help="comma separated c:r pairs")
    m.add_argument("--features")
    m.add_argument("--frames", type=int, default=400)
    m.add_argument("--repeat", type=int, default=1)
    m.add_argument("--config")
    m.add_argument("--l-att", dest="l_att", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--precision", choices=["single", "double"])
    m.add_argument("--out")
    m.set_defaults(func=cmd_bench)

    f = sub.add_parser("make-features", help="write a synthetic feature file")
    f.add_argument("--out", required=True)
    f.add_argument("--frames", type=int, default=200)
    f.add_argument("--d-feat", dest="d_feat", type=int, default=80)
    f.add_argument("--frame-ms", dest="frame_ms", type=float, default=10.0)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_make_features)

    w = sub.add_parser("init-weights", help="write seeded random encoder weights")
    w.add_argument("--out", required=True)
    w.add_argument("--config")
    w.add_argument("--seed", type=int)
    w.set_defaults(func=cmd_init_weights)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        return _fail(str(exc).splitlines()[0] if str(exc) else type(exc).__name__)
    except TSCAError as exc:
        return _fail(f"invariant breach: {exc}", EXIT_BREACH)


if __name__ == "__main__":
    sys.exit(main())
