import numpy as np
import pytest
import torch

from tsca.attention import rel_range_for
from tsca.encoder import Encoder, EncoderConfig
from tsca.streaming import PROVISIONAL


def make_encoder(seed=0, precision="double", layers=2, kernel_size=5, d_feat=8, subsample=False,
                 c=10, r=9, l_att=12, d_model=16, vocab=8):
    cfg = EncoderConfig(layers=layers, d_model=d_model, heads=2, ffn_dim=32, kernel_size=kernel_size,
                        vocab_size=vocab, d_feat=d_feat, precision=precision, seed=seed,
                        subsample=subsample)
    return Encoder(cfg, rel_range=rel_range_for(c, r, l_att))


@pytest.fixture
def encoder():
    return make_encoder()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- scripted stub ------------------------------------------------------------------

TOKENS = ["<blank>", "he", "lo", "llo", " wor", "ld"]


class ScriptedModel:
    """Emits fixed per-step argmax paths over the c + r window."""

    frame_factor = 1

    def __init__(self, script, c, r, vocab=len(TOKENS)):
        self.script, self.c, self.r, self.vocab = script, c, r, vocab

    def initial_state(self, c, r, l_att, batch=1):
        return 0

    def forward_step(self, chunk, state, valid_end=None):
        path = self.script[state]
        logits = torch.nn.functional.one_hot(torch.tensor(path), self.vocab).double()[None]
        return logits[:, :self.c], logits[:, self.c:], state + 1


def check_log(events, r):
    """Immutability and one revision per provisional span; returns number of provisional spans."""
    final_end = 0
    pending = None
    spans = 0
    for ev in events:
        if ev.status == PROVISIONAL:
            assert ev.start >= final_end and ev.end - ev.start <= r
            assert pending is None
            pending = ev
            spans += 1
            continue
        assert ev.start == final_end  # never re-touches committed frames
        if pending is not None:
            assert ev.step == pending.step + 1
            assert ev.start <= pending.start and ev.end >= min(pending.end, ev.end)
            assert ev.end >= pending.start
            pending = None
        final_end = ev.end
    return spans


# -- acceptance summary ---------------------------------------------------------------

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
