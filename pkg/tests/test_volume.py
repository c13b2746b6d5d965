import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sesaseg.errors import (
    MvolError,
    MvolHeaderError,
    MvolNonFiniteError,
    MvolPayloadLengthError,
    MvolUnknownKindError,
    SesaError,
)
from sesaseg.volume import (
    LabelVolume,
    Volume3,
    VolumeHeader,
    decode_mvol,
    encode_mvol,
    export_slice_pgm,
    linear_index,
    payload_checksum,
    read_mvol,
    save,
    unravel_index,
    write_mvol,
)


def _header(dims, kind="intensity", spacing=(1.0, 1.0, 1.0), alphabet=None):
    return json.dumps({"dims": list(dims), "spacing": list(spacing), "kind": kind,
                       **({"alphabet": alphabet} if alphabet else {})}).encode() + b"\n"


def test_zero_volume_round_trip(tmp_path):
    vol = Volume3(np.zeros((2, 2, 2)))
    path = tmp_path / "z.mvol"
    save(path, vol)
    header, back = read_mvol(path)
    assert header.dims == (2, 2, 2)
    assert back.flat().tobytes() == vol.flat().tobytes()


def test_payload_length_mismatch():
    blob = _header((3, 3, 3)) + np.zeros(26, "<f8").tobytes()
    with pytest.raises(MvolPayloadLengthError) as info:
        decode_mvol(blob)
    assert info.value.category == "payload-length"
    assert info.value.offset == len(_header((3, 3, 3))) + 26 * 8


def test_same_volume_written_twice_is_byte_identical(tmp_path):
    vol = Volume3(np.random.default_rng(3).random((3, 4, 5)), (0.5, 1.0, 2.0))
    save(tmp_path / "a.mvol", vol)
    save(tmp_path / "b.mvol", vol)
    assert (tmp_path / "a.mvol").read_bytes() == (tmp_path / "b.mvol").read_bytes()


def test_out_of_alphabet_label_rejected_before_writing(tmp_path):
    vol = Volume3(np.array([[[0.0, 3.0]]]))
    header = VolumeHeader((1, 1, 2), (1.0, 1.0, 1.0), "label", (0, 1, 2))
    with pytest.raises(SesaError):
        write_mvol(tmp_path / "bad.mvol", header, vol)
    assert not (tmp_path / "bad.mvol").exists()
    with pytest.raises(SesaError):
        LabelVolume(np.array([[[0.0, 3.0]]]), alphabet=(0, 1, 2))


def test_single_probability_voxel(tmp_path):
    vol = Volume3(np.full((1, 1, 1), 0.5))
    write_mvol(tmp_path / "p.mvol", VolumeHeader.for_volume(vol, "probability"), vol)
    blob = (tmp_path / "p.mvol").read_bytes()
    line, payload = blob.split(b"\n", 1)
    assert json.loads(line)["dims"] == [1, 1, 1]
    assert np.frombuffer(payload, "<f8").tolist() == [0.5]


def test_probability_out_of_range_rejected():
    vol = Volume3(np.full((1, 1, 1), 1.5))
    with pytest.raises(SesaError):
        encode_mvol(VolumeHeader.for_volume(vol, "probability"), vol)


def test_header_is_sorted_json_with_checksum():
    vol = Volume3(np.arange(6.0).reshape(1, 2, 3))
    line = encode_mvol(VolumeHeader.for_volume(vol), vol).split(b"\n", 1)[0]
    meta = json.loads(line)
    assert list(meta) == sorted(meta)
    assert meta["checksum"] == payload_checksum(vol)


def test_payload_is_x_fastest():
    data = np.zeros((2, 3, 1))
    data[1, 0, 0] = 1.0
    data[0, 1, 0] = 2.0
    payload = encode_mvol(VolumeHeader.for_volume(Volume3(data)), Volume3(data)).split(b"\n", 1)[1]
    assert np.frombuffer(payload, "<f8").tolist()[:3] == [0.0, 1.0, 2.0]


def test_decode_errors_are_distinct():
    good = _header((1, 1, 1)) + np.zeros(1, "<f8").tobytes()
    assert decode_mvol(good)[1].dims == (1, 1, 1)

    with pytest.raises(MvolHeaderError) as e1:
        decode_mvol(b'{"dims": [1,1,1]')
    with pytest.raises(MvolHeaderError) as e2:
        decode_mvol(b'{"dims": [1,1,1],, }\n' + bytes(8))
    with pytest.raises(MvolUnknownKindError) as e3:
        decode_mvol(_header((1, 1, 1), kind="mask") + bytes(8))
    nan = _header((1, 1, 2)) + np.array([0.0, np.nan], "<f8").tobytes()
    with pytest.raises(MvolNonFiniteError) as e4:
        decode_mvol(nan)
    assert e4.value.offset == len(_header((1, 1, 2))) + 8
    categories = {e.value.category for e in (e1, e3, e4)} | {"payload-length"}
    assert len(categories) == 4
    assert e2.value.offset > 0


def test_checksum_mismatch_detected():
    vol = Volume3(np.ones((1, 1, 2)))
    blob = bytearray(encode_mvol(VolumeHeader.for_volume(vol), vol))
    blob[-1] ^= 0x01
    with pytest.raises(MvolError):
        decode_mvol(bytes(blob))


def test_label_round_trip_keeps_alphabet(tmp_path):
    lab = LabelVolume(np.array([[[0.0, 1.0, 2.0]]]), alphabet=(0, 1, 2))
    save(tmp_path / "l.mvol", lab)
    header, back = read_mvol(tmp_path / "l.mvol")
    assert header.kind == "label" and header.alphabet == (0, 1, 2)
    assert isinstance(back, LabelVolume)


def test_volume_invariants():
    with pytest.raises(SesaError):
        Volume3(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(SesaError):
        Volume3(np.full((1, 1, 1), np.inf))
    vol = Volume3(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1.0


@settings(max_examples=60, deadline=None)
@given(st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)), st.data())
def test_read_write_identity(dims, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**16)))
    spacing = tuple(data.draw(st.floats(0.1, 4.0)) for _ in range(3))
    vol = Volume3(rng.normal(size=dims) * 1e3, spacing)
    header, back = decode_mvol(encode_mvol(VolumeHeader.for_volume(vol), vol))
    assert header.dims == dims and header.spacing == vol.spacing
    assert np.array_equal(back.data, vol.data)


@settings(max_examples=40, deadline=None)
@given(st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)))
def test_linear_index_matches_nested_loops(dims):
    nx, ny, nz = dims
    expected = {}
    n = 0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                expected[(i, j, k)] = n
                n += 1
    for (i, j, k), idx in expected.items():
        assert linear_index(i, j, k, dims) == idx
        assert unravel_index(idx, dims) == (i, j, k)
    flat = Volume3(np.arange(n, dtype=float).reshape(dims, order="F")).flat()
    assert flat.tolist() == list(range(n))


def _pgm_pixels(blob):
    parts = blob.split(b"\n", 3)
    assert parts[0] == b"P5" and parts[2] == b"255"
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], np.uint8).reshape(h, w)


def test_pgm_window_endpoints():
    lo, hi = -1.0, 3.0
    assert (_pgm_pixels(export_slice_pgm(Volume3(np.full((4, 3, 2), lo)), "z", 0, (lo, hi))) == 0).all()
    assert (_pgm_pixels(export_slice_pgm(Volume3(np.full((4, 3, 2), hi)), "z", 1, (lo, hi))) == 255).all()
    ramp = Volume3(np.array([lo, hi]).reshape(2, 1, 1))
    assert _pgm_pixels(export_slice_pgm(ramp, "z", 0, (lo, hi))).tolist() == [[0, 255]]


def test_pgm_orientation_and_clamp():
    data = np.zeros((3, 2, 1))
    data[2, 0, 0] = 10.0  # beyond the window
    px = _pgm_pixels(export_slice_pgm(Volume3(data), "z", 0, (0.0, 1.0)))
    assert px.shape == (2, 3)  # y rows, x columns
    assert px[0, 2] == 255


def test_pgm_errors():
    vol = Volume3(np.zeros((2, 2, 2)))
    with pytest.raises(SesaError):
        export_slice_pgm(vol, "z", 2, (0, 1))
    with pytest.raises(SesaError):
        export_slice_pgm(vol, "x", 0, (1, 1))
