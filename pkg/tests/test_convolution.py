import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tsca.convolution import (CHUNKED_C, CHUNKED_C_PLUS_R, Conv2dSubsampling, ConvCache,
                              conv_window_step, dcc_forward, dcc_stream, lookahead_flags,
                              masked_right_context, r_min, split_lookahead)
from tsca.errors import InvalidConfig
from tsca.masking import drc_intervals
from tsca.oracle import conv_reference


def full_conv(x, w):
    """Non-causal zero-padded depthwise convolution, channel by channel."""
    l_conv = (w.shape[1] - 1) // 2
    return np.stack([np.convolve(x[:, ch], w[ch, ::-1], mode="full")[l_conv:l_conv + len(x)]
                     for ch in range(x.shape[1])], axis=1)


def test_split_lookahead_segment_geometry():
    segs = split_lookahead(30, 10, 6, 7)
    assert r_min(7, 6) == 6
    assert [s.valid_lo for s in segs] == [0, 10, 20]
    assert [(s.valid_lo, s.valid_hi) for s in segs] == [(0, 10), (10, 20), (20, 30)]
    interior = segs[1]
    assert (interior.start, interior.length) == (3, 23)  # l_conv + c + r_min
    assert segs[0].length == 16 and segs[2].length == 17  # clipped at the edges


def test_split_lookahead_no_right_context():
    segs = split_lookahead(40, 10, 0, 7)
    assert segs[1].length == 17 and segs[1].end == segs[1].valid_hi


def test_split_lookahead_kernel_caps_reach():
    assert r_min(1, 6) == 1
    segs = split_lookahead(40, 10, 6, 1)
    assert segs[1].start == 9 and segs[1].end == 21


@pytest.mark.parametrize("mode", [CHUNKED_C, CHUNKED_C_PLUS_R])
def test_identity_kernel_is_fixed_point(mode):
    x = torch.from_numpy(np.random.default_rng(0).standard_normal((37, 3)))
    w = torch.zeros(3, 15, dtype=torch.float64)
    w[:, 7] = 1
    assert torch.equal(dcc_forward(x, 10, 3, w, mode), x)
    assert torch.equal(dcc_stream(x, 10, 3, w), x)


def test_single_chunk_equals_full_convolution():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((9, 4)), rng.standard_normal((4, 5))
    y = dcc_forward(torch.from_numpy(x), 9, 4, torch.from_numpy(w)).numpy()
    assert np.abs(y - full_conv(x, w)).max() < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 50), st.integers(1, 12), st.integers(0, 11), st.sampled_from([1, 3, 5, 15]),
       st.integers(0, 2**31))
def test_layout_and_stream_match_reference(total, c, r, kernel, seed):
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((total, 3)), rng.standard_normal((3, kernel))
    want = conv_reference(x, w, c, r)
    xt, wt = torch.from_numpy(x), torch.from_numpy(w)
    assert np.abs(dcc_forward(xt, c, r, wt).numpy() - want).max() <= 1e-12
    assert np.abs(dcc_stream(xt, c, r, wt).numpy() - want).max() <= 1e-12


def test_chunked_c_plus_r_is_plain_chunking_of_wider_chunks():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((45, 3)), rng.standard_normal((3, 15))
    y = dcc_forward(torch.from_numpy(x), 10, 3, torch.from_numpy(w), CHUNKED_C_PLUS_R).numpy()
    assert np.abs(y - conv_reference(x, w, 13, 0)).max() <= 1e-12


def test_unknown_mode_and_even_kernel():
    x = torch.zeros(5, 2, dtype=torch.float64)
    with pytest.raises(InvalidConfig):
        dcc_forward(x, 2, 1, torch.zeros(2, 3, dtype=torch.float64), "chunked_x")
    with pytest.raises(InvalidConfig):
        dcc_forward(x, 2, 1, torch.zeros(2, 4, dtype=torch.float64))


def test_no_dependence_beyond_segment_lookahead():
    rng = np.random.default_rng(3)
    c, r, kernel, total = 10, 3, 15, 50
    l_conv, ahead = 7, r_min(7, r)
    x, w = rng.standard_normal((total, 2)), torch.from_numpy(rng.standard_normal((2, kernel)))
    base = dcc_forward(torch.from_numpy(x), c, r, w).numpy()
    for t in range(total):
        bumped = x.copy()
        bumped[t] += 1.0
        y = dcc_forward(torch.from_numpy(bumped), c, r, w).numpy()
        for s_ in range(total):
            reach = (s_ // c + 1) * c - 1 + ahead
            legal = abs(s_ - t) <= l_conv and t <= reach
            if not legal:
                assert np.array_equal(y[s_], base[s_]), (t, s_)


# -- right-context masking -------------------------------------------------------

def test_masked_right_context_extremes():
    x = torch.from_numpy(np.random.default_rng(4).standard_normal((35, 2)))
    ivs_all = drc_intervals(35, 6, 10, 3, 1.0, np.random.default_rng(0))
    ivs_none = drc_intervals(35, 6, 10, 3, 0.0, np.random.default_rng(0))
    segs = split_lookahead(35, 10, 3, 7)
    for seg, win in zip(segs, masked_right_context(x, ivs_all, 10, 3, 7)):
        assert torch.equal(win, x[seg.start:seg.end])
    for seg, win in zip(segs, masked_right_context(x, ivs_none, 10, 3, 7)):
        assert torch.count_nonzero(win[seg.valid_hi - seg.start:]) == 0
        assert torch.equal(win[: seg.valid_hi - seg.start], x[seg.start:seg.valid_hi])


def test_masked_right_context_mixed_matches_interval_walk():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((57, 3)), rng.standard_normal((3, 9))
    ivs = drc_intervals(57, 6, 10, 3, 0.5, np.random.default_rng(9))
    flags = lookahead_flags(ivs)
    assert 0 < sum(flags) < len(flags)
    wins = masked_right_context(torch.from_numpy(x), ivs, 10, 3, 4)
    # independent walk: each window is x[start:end] with the lookahead zeroed when unselected
    for k, (iv, win) in enumerate(zip(ivs, wins)):
        lo, hi = max(0, k * 10 - 4), min(57, k * 10 + 10 + (3 if True else 0))
        want = x[lo:hi].copy()
        if not iv.extended:
            want[min(57, k * 10 + 10) - lo:] = 0
        assert np.array_equal(win.numpy(), want)
    y = dcc_forward(torch.from_numpy(x), 10, 3, torch.from_numpy(w), lookahead=flags).numpy()
    assert np.abs(y - conv_reference(x, w, 10, 3, flags)).max() <= 1e-12


# -- cache -----------------------------------------------------------------------------

def test_conv_cache_tail_and_position():
    x = torch.arange(20, dtype=torch.float64).reshape(10, 2)
    cache = ConvCache.empty(1, 3, 2)
    cache = ConvCache(cache.left_tail[0], cache.position)
    assert torch.count_nonzero(cache.left_tail) == 0 and cache.position == -3
    w = torch.zeros(2, 7, dtype=torch.float64)
    _, cache = conv_window_step(x[:6], cache, w, 4, 0)
    assert cache.position == 1
    assert torch.equal(cache.left_tail, x[1:4])


# -- sub-sampling -------------------------------------------------------------------------

def test_subsampling_frame_count():
    sub = Conv2dSubsampling(20, 8, seed=0)
    y = sub(torch.randn(1, 16, 20, dtype=torch.float64))
    assert y.shape == (1, 4, 8)
    assert sub(torch.randn(1, 19, 20, dtype=torch.float64)).shape == (1, 4, 8)
    with pytest.raises(InvalidConfig):
        sub(torch.randn(1, 3, 20, dtype=torch.float64))


def test_subsampling_constant_input_with_averaging_kernels():
    sub = Conv2dSubsampling(11, 4, channels=2, seed=0)
    with torch.no_grad():
        for conv in (sub.conv1, sub.conv2):
            conv.weight.fill_(1.0 / conv.weight[0].numel())
            conv.bias.zero_()
    x = torch.full((1, 40, 11), 2.0, dtype=torch.float64)
    y = sub(x)
    # the first output sees the left zero pad, every later one sees only data
    assert torch.allclose(y[0, 1:], y[0, 1:2].expand_as(y[0, 1:]), atol=1e-14, rtol=0)


def test_subsampling_streaming_matches_offline():
    sub = Conv2dSubsampling(12, 6, seed=3)
    x = torch.from_numpy(np.random.default_rng(6).standard_normal((1, 48, 12)))
    offline = sub(x)
    state = sub.initial_state(1, 12)
    outs = []
    for k in range(0, 48, 8):
        y, state = sub.step(x[:, k:k + 8], state)
        outs.append(y)
    assert (torch.cat(outs, dim=1) - offline).abs().max() <= 1e-12
    with pytest.raises(InvalidConfig):
        sub.step(x[:, :6], sub.initial_state(1, 12))


def test_subsampled_frame_timing():
    # output k starts at raw frame 4k, i.e. 40 ms per output at a 10 ms hop
    sub = Conv2dSubsampling(12, 6, seed=0)
    x = torch.zeros(1, 32, 12, dtype=torch.float64)
    base = sub(x)
    for k in range(8):
        bumped = x.clone()
        bumped[0, 4 * k + 3] = 5.0
        y = sub(bumped)
        changed = (y - base).abs().sum(-1)[0] > 0
        assert changed[k] and not changed[:k].any()
