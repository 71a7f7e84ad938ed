import os

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_encoder
from tsca import formats
from tsca.errors import FormatError, InvalidConfig

finite32 = st.floats(allow_nan=False, width=32)


@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(1, 3)), elements=finite32),
                       max_size=4))
def test_weights_roundtrip_bit_exact(tensors):
    back = formats.decode_weights(formats.encode_weights(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.ascontiguousarray(tensors[k]).tobytes()
        assert back[k].shape == tensors[k].shape


def test_weights_header_layout():
    raw = formats.encode_weights({"ab": np.ones((2, 3), np.float32)})
    assert raw[:4] == b"TSCW"
    assert int.from_bytes(raw[4:8], "little") == 1 and int.from_bytes(raw[8:12], "little") == 1
    assert int.from_bytes(raw[12:14], "little") == 2 and raw[14:16] == b"ab" and raw[16] == 2
    assert len(raw) == 16 + 1 + 8 + 24


def test_weights_corruption_detected():
    raw = formats.encode_weights({"w": np.ones(4, np.float32)})
    with pytest.raises(FormatError):
        formats.decode_weights(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        formats.decode_weights(raw[:-2])
    with pytest.raises(FormatError):
        formats.decode_weights(raw + b"\0")


def test_encoder_weights_via_file(tmp_path):
    a, b = make_encoder(seed=1, precision="single"), make_encoder(seed=9, precision="single")
    formats.save_weights(tmp_path / "w.tscw", a.named_tensors())
    b.load_named_tensors(formats.load_weights(tmp_path / "w.tscw"))
    for k, v in a.named_tensors().items():
        assert np.array_equal(b.named_tensors()[k], v)


@given(arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(1, 5)), elements=finite32),
       st.sampled_from([10.0, 40.0]))
def test_features_roundtrip(feats, frame_ms):
    back, ms = formats.decode_features(formats.encode_features(feats, frame_ms))
    assert back.tobytes() == feats.tobytes() and back.shape == feats.shape and ms == frame_ms


def test_features_payload_length_checked():
    raw = formats.encode_features(np.ones((3, 2), np.float32))
    assert len(raw) == 20 + 3 * 2 * 4
    with pytest.raises(FormatError):
        formats.decode_features(raw[:-4])
    with pytest.raises(FormatError):
        formats.decode_features(b"TSCW" + raw[4:])


def test_token_table(tmp_path):
    path = tmp_path / "tokens.txt"
    formats.save_tokens(path, ["<blank>", "a", " b"])
    assert formats.load_tokens(path) == ["<blank>", "a", " b"]
    path.write_text("a\n<blank>\n")
    with pytest.raises(FormatError):
        formats.load_tokens(path)
    assert formats.detokenize([1, 2, 1], ["<blank>", "x", "y"]) == "xyx"


def test_config_parsing():
    schema = {"c": int, "p": float, "subsample": bool, "name": str}
    got = formats.parse_config_text("# comment\nc = 12\np=0.5  # inline\nsubsample=yes\n\nname=x\n", schema)
    assert got == {"c": 12, "p": 0.5, "subsample": True, "name": "x"}
    with pytest.raises(InvalidConfig):
        formats.parse_config_text("unknown=1\n", schema)
    with pytest.raises(InvalidConfig):
        formats.parse_config_text("c=abc\n", schema)
    with pytest.raises(InvalidConfig):
        formats.parse_config_text("c\n", schema)


def test_atomic_write_leaves_no_temporaries(tmp_path):
    target = tmp_path / "out.txt"
    formats.atomic_write(target, "one")
    formats.atomic_write(target, b"two")
    assert target.read_text() == "two"
    assert os.listdir(tmp_path) == ["out.txt"]
