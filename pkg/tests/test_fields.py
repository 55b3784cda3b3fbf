import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bridgecast.fields import (
    BadMagicError,
    ChecksumError,
    EmptySetError,
    Field,
    GridSpec,
    SnapshotSet,
    TruncatedFileError,
    VersionMismatchError,
    channel_mean,
    concat_channels,
    concat_samples,
    read_snapshot_set,
    write_snapshot_set,
)


def make_set(data, channels=("a", "b"), **kw):
    return SnapshotSet(Field(data, channels), subset_name=kw.pop("subset_name", "low-res"), **kw)


def test_gridspec_dx_and_mesh():
    g = GridSpec(8)
    assert g.dx == pytest.approx(2 * math.pi / 8)
    x, y = g.mesh()
    assert x[0, 1] == pytest.approx(g.dx) and y[1, 0] == pytest.approx(g.dx)
    with pytest.raises(ValueError):
        GridSpec(0)


@pytest.mark.parametrize(
    "shape, channels",
    [((1, 4, 8, 1), ("a",)), ((1, 6, 6, 1), ("a",)), ((1, 2, 2, 1), ("a",)), ((1, 4, 4, 2), ("a", "a")), ((1, 4, 4, 2), ("a",))],
)
def test_field_rejects_bad_shapes(shape, channels):
    with pytest.raises(ValueError):
        Field(np.zeros(shape), channels)


def test_field_rejects_nonfinite_and_is_readonly():
    d = np.zeros((4, 4, 1))
    d[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Field(d, ("a",))
    f = Field(np.zeros((4, 4, 1)), ("a",))
    assert f.data.shape == (1, 4, 4, 1)
    with pytest.raises(ValueError):
        f.data[0, 0, 0, 0] = 1.0


def test_field_channel_helpers():
    rng = np.random.default_rng(0)
    f = Field(rng.standard_normal((3, 8, 8, 2)), ("u", "v"))
    assert np.array_equal(f.channel("v"), f.data[..., 1])
    assert f.select(["v"]).channels == ("v",)
    with pytest.raises(KeyError):
        f.channel("w")
    g = f.replace_channel("u", 0.0)
    assert np.all(g.channel("u") == 0) and np.array_equal(g.channel("v"), f.channel("v"))
    both = concat_channels(f.select(["u"]), f.select(["v"]))
    assert both.equals(f)
    assert concat_samples([f, f]).n_samples == 6
    with pytest.raises(EmptySetError):
        concat_samples([])


def test_channel_mean_constant_and_harmonic():
    assert np.allclose(channel_mean(Field(np.full((2, 8, 8, 1), 3.5), ("a",)), "a"), 3.5)
    for n in (4, 16, 64):
        x, _ = GridSpec(n).mesh()
        f = Field(np.sin(x)[..., None], ("a",))
        assert abs(channel_mean(f, "a")[0]) < 1e-12
    with pytest.raises(KeyError):
        channel_mean(f, "b")


def test_channel_mean_matches_two_pass_oracle():
    rng = np.random.default_rng(1)
    data = rng.standard_normal((5, 32, 32, 1)) * 1e3 + 7.0
    f = Field(data, ("a",))
    for i in range(5):
        vals = data[i, ..., 0].ravel()
        m0 = math.fsum(vals) / vals.size
        oracle = m0 + math.fsum(vals - m0) / vals.size
        assert channel_mean(f, "a")[i] == pytest.approx(oracle, rel=1e-12)


def test_channel_mean_linear():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((3, 8, 8, 1))
    b = rng.standard_normal((3, 8, 8, 1))
    lhs = channel_mean(Field(2.0 * a - 3.0 * b, ("x",)), "x")
    rhs = 2.0 * channel_mean(Field(a, ("x",)), "x") - 3.0 * channel_mean(Field(b, ("x",)), "x")
    assert np.allclose(lhs, rhs, atol=1e-13)


def test_empty_set_rejected():
    with pytest.raises(EmptySetError, match="empty set"):
        make_set(np.zeros((0, 4, 4, 2)))


def test_zero_field_roundtrip_and_size(tmp_path):
    s = make_set(np.zeros((1, 4, 4, 2)))
    p = tmp_path / "z.bcst"
    write_snapshot_set(s, p)
    buf = p.read_bytes()
    # header 16 bytes, two 1-letter names at 3 bytes each, then the metadata block
    payload_at = 22 + 4 + struct.unpack("<I", buf[22:26])[0]
    assert len(buf) - payload_at == 128 + 8
    assert buf[payload_at : payload_at + 128] == b"\0" * 128
    assert read_snapshot_set(p).equals(s)


def test_header_layout(tmp_path):
    s = make_set(np.ones((3, 8, 8, 2)), channels=("vorticity", "x"))
    p = tmp_path / "h.bcst"
    write_snapshot_set(s, p)
    buf = p.read_bytes()
    magic, version, nc, n, ns = struct.unpack("<4sHHII", buf[:16])
    assert (magic, version, nc, n, ns) == (b"BCST", 1, 2, 8, 3)
    assert struct.unpack("<H", buf[16:18])[0] == 9 and buf[18:27] == b"vorticity"


def test_large_set_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    data = rng.standard_normal((2000, 64, 64, 3)).astype(np.float32)
    s = make_set(data, channels=("vorticity", "supersaturation", "context"), sim_params_digest="abc", spinup_discarded=10)
    p = tmp_path / "big.bcst"
    write_snapshot_set(s, p)
    back = read_snapshot_set(p)
    assert back.equals(s)


def test_overwrite_needs_force(tmp_path):
    s = make_set(np.zeros((1, 4, 4, 2)))
    p = tmp_path / "o.bcst"
    write_snapshot_set(s, p)
    with pytest.raises(FileExistsError):
        write_snapshot_set(s, p)
    write_snapshot_set(s, p, force=True)


def test_float32_overflow_rejected(tmp_path):
    with pytest.raises(OverflowError):
        write_snapshot_set(make_set(np.full((1, 4, 4, 2), 1e39)), tmp_path / "x")


def test_read_errors_are_distinct(tmp_path):
    s = make_set(np.random.default_rng(4).standard_normal((2, 8, 8, 2)).astype(np.float32))
    p = tmp_path / "e.bcst"
    write_snapshot_set(s, p)
    good = p.read_bytes()

    (tmp_path / "magic").write_bytes(b"XXXX" + good[4:])
    with pytest.raises(BadMagicError, match="bad magic"):
        read_snapshot_set(tmp_path / "magic")

    (tmp_path / "ver").write_bytes(good[:4] + struct.pack("<H", 2) + good[6:])
    with pytest.raises(VersionMismatchError):
        read_snapshot_set(tmp_path / "ver")

    (tmp_path / "trunc").write_bytes(good[: len(good) - 200])
    with pytest.raises(TruncatedFileError, match="truncated"):
        read_snapshot_set(tmp_path / "trunc")

    bad = bytearray(good)
    bad[-20] ^= 0xFF
    (tmp_path / "sum").write_bytes(bytes(bad))
    with pytest.raises(ChecksumError):
        read_snapshot_set(tmp_path / "sum")


finite32 = st.floats(-(2.0**100), 2.0**100, allow_nan=False, width=32)


@settings(max_examples=40, deadline=None)
@given(
    data=st.integers(1, 3).flatmap(
        lambda b: st.sampled_from([4, 8]).flatmap(
            lambda n: st.integers(1, 3).flatmap(lambda c: arrays(np.float32, (b, n, n, c), elements=finite32))
        )
    )
)
def test_roundtrip_property(tmp_path_factory, data):
    channels = tuple(f"c{i}" for i in range(data.shape[-1]))
    s = SnapshotSet(Field(data, channels), subset_name="p", extra={"k": 1})
    p = tmp_path_factory.mktemp("rt") / "s.bcst"
    write_snapshot_set(s, p)
    back = read_snapshot_set(p)
    assert back.equals(s)
    assert np.array_equal(back.field.data.astype(np.float32), data)
