import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmimpute.channel import (ChannelModel, MaskedLatent, decode_wire, encode_wire, erase_bernoulli, frame_size,
                              read_wire_log, stack, truncate_prefix, write_wire_log)
from mmimpute.errors import DomainError, FormatError, ShapeError, TruncatedFrameError
from mmimpute.tensor import SeededRng


@st.composite
def masked_latents(draw, max_n=80):
    n = draw(st.integers(0, max_n))
    mask = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    values = draw(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=n, max_size=n))
    return MaskedLatent(np.array(values, dtype=np.float64), np.array(mask, dtype=bool))


@given(masked_latents())
def test_wire_round_trip(m):
    buf = encode_wire(m)
    assert len(buf) == frame_size(m.latent_dim, m.present_count)
    assert decode_wire(buf) == m.rounded()


def test_masked_latent_canonical_form():
    m = MaskedLatent([1.0, np.nan, 3.0], [True, False, True])
    assert m.values[1] == 0.0 and m.present_count == 2
    assert m == MaskedLatent([1.0, 99.0, 3.0], [True, False, True])
    assert "None" in repr(m)
    with pytest.raises(DomainError):
        MaskedLatent([np.inf], [True])
    with pytest.raises(ShapeError):
        MaskedLatent([1.0, 2.0], [True])


def test_size_examples():
    assert len(encode_wire(MaskedLatent(np.zeros(8), np.zeros(8, bool)))) == 6
    half = np.arange(32) % 2 == 0
    assert len(encode_wire(MaskedLatent(np.ones(32), half))) == 73
    assert len(encode_wire(MaskedLatent(np.ones(32), np.ones(32, bool)))) == 5 + 4 + 32 * 4


def test_layout_is_lsb_first_little_endian():
    m = MaskedLatent([1.5, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 4.0], [1, 0, 1, 0, 0, 0, 0, 0, 1])
    buf = encode_wire(m)
    assert buf[:2] == b"LZ" and buf[2] == 1
    assert struct.unpack_from("<H", buf, 3)[0] == 9
    assert buf[5] == 0b00000101 and buf[6] == 0b00000001
    assert struct.unpack_from("<3f", buf, 7) == (1.5, -2.0, 4.0)


def test_decode_errors():
    buf = encode_wire(MaskedLatent(np.arange(10.0), np.ones(10, bool)))
    with pytest.raises(FormatError, match="magic"):
        decode_wire(b"XY" + buf[2:])
    with pytest.raises(FormatError, match="version"):
        decode_wire(buf[:2] + b"\x02" + buf[3:])
    with pytest.raises(TruncatedFrameError):
        decode_wire(buf[:-4])  # one float short
    with pytest.raises(TruncatedFrameError):
        decode_wire(buf[:4])
    with pytest.raises(TruncatedFrameError):
        decode_wire(buf[:6])
    with pytest.raises(FormatError, match="trailing"):
        decode_wire(buf + b"\x00")
    padded = bytearray(buf)
    padded[6] |= 0x80  # bit 15 lies beyond N = 10
    with pytest.raises(FormatError, match="padding"):
        decode_wire(bytes(padded))


def test_erasure_examples():
    z = np.random.default_rng(0).normal(size=32)
    full = erase_bernoulli(z, 0.0, SeededRng(1))
    assert full.mask.all() and np.array_equal(full.values, z)
    assert not erase_bernoulli(z, 1.0, SeededRng(1)).mask.any()
    with pytest.raises(DomainError):
        erase_bernoulli(z, 1.5, SeededRng(1))
    rng = SeededRng(2)
    counts = [erase_bernoulli(z, 0.5, rng).present_count for _ in range(10**4)]
    assert abs(np.mean(counts) - 16) < 0.5


@given(st.floats(0, 1), st.integers(0, 2**32))
def test_erasure_preserves_survivors(rate, seed):
    z = np.random.default_rng(seed).normal(size=40)
    m = erase_bernoulli(z, rate, SeededRng(seed))
    assert np.array_equal(m.values[m.mask], z[m.mask])


def test_truncation_examples():
    z = np.array([1.0, 2, 3, 4, 5])
    t = truncate_prefix(z, 3)
    assert np.array_equal(t.values, [1, 2, 3, 0, 0]) and t.mask.tolist() == [1, 1, 1, 0, 0]
    assert truncate_prefix(z, 5) == MaskedLatent(z, np.ones(5, bool))
    assert truncate_prefix(z, 0).present_count == 0
    with pytest.raises(DomainError):
        truncate_prefix(z, 6)


def test_channel_model_parameterisation():
    assert ChannelModel("bernoulli", missing_rate=0.3).tag == "p0.30"
    ch = ChannelModel("truncate", keep_count=8)
    assert ch.tag == "k08"
    assert ch.masks(3, 32, None).sum(axis=1).tolist() == [8, 8, 8]
    for bad in [dict(kind="bernoulli"), dict(kind="bernoulli", missing_rate=0.1, keep_count=2),
                dict(kind="truncate", keep_count=-1), dict(kind="bernoulli", missing_rate=2.0),
                dict(kind="smoke")]:
        with pytest.raises(DomainError):
            ChannelModel(**bad)
    with pytest.raises(DomainError):
        ch.masks(1, 4, None)


def test_wire_log(tmp_path):
    gen = np.random.default_rng(3)
    ms = [MaskedLatent(gen.normal(size=12), gen.uniform(size=12) < 0.5) for _ in range(20)]
    path = tmp_path / "w.log"
    write_wire_log(path, [encode_wire(m) for m in ms])
    back = [decode_wire(f) for f in read_wire_log(path)]
    assert back == [m.rounded() for m in ms]
    values, mask = stack(back)
    assert values.shape == (20, 12) and mask.dtype == bool
    raw = path.read_bytes()
    (tmp_path / "cut").write_bytes(raw[:-3])
    with pytest.raises(TruncatedFrameError):
        read_wire_log(tmp_path / "cut")
    (tmp_path / "dangling").write_bytes(raw + b"\x01\x00")
    with pytest.raises(TruncatedFrameError):
        read_wire_log(tmp_path / "dangling")
