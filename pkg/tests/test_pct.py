import numpy as np
import pytest

from pancraft import pct


def test_roundtrip_f32(tmp_path):
    arr = np.random.default_rng(0).random((3, 5, 7)).astype(np.float32)
    path = tmp_path / "t.pct1"
    pct.write_tensor(path, arr)
    back = pct.read_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_roundtrip_f64(tmp_path):
    arr = np.random.default_rng(1).random((2, 4))
    path = tmp_path / "t.pct1"
    pct.write_tensor(path, arr)
    back = pct.read_tensor(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, arr)


def test_header_layout():
    arr = np.zeros((2, 3), dtype=np.float32)
    buf = pct.tensor_to_bytes(arr)
    assert buf[:4] == b"PCT1"
    assert buf[4] == 0          # f32 tag
    assert buf[5] == 2          # rank
    assert buf[6:10] == (2).to_bytes(4, "little")
    assert buf[10:14] == (3).to_bytes(4, "little")
    assert len(buf) == 14 + 6 * 4


def test_f64_tag():
    buf = pct.tensor_to_bytes(np.zeros(1, dtype=np.float64))
    assert buf[4] == 1


def test_bad_magic_rejected():
    with pytest.raises(ValueError):
        pct.tensor_from_bytes(b"NOPE" + bytes(10))


def test_truncated_payload_rejected():
    buf = pct.tensor_to_bytes(np.zeros(4, dtype=np.float32))
    with pytest.raises(ValueError):
        pct.tensor_from_bytes(buf[:-2])


def test_integer_input_rejected():
    with pytest.raises(ValueError):
        pct.tensor_to_bytes(np.zeros(3, dtype=np.int32))


def test_bundle_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {"hrms": rng.random((4, 8, 8)).astype(np.float32),
               "pan": rng.random((1, 8, 8)).astype(np.float32)}
    meta = {"seed": 7, "shift": [0.5, -1.0]}
    path = tmp_path / "scene.pct1bundle"
    pct.write_bundle(path, meta, tensors)
    meta2, tensors2 = pct.read_bundle(path)
    assert meta2 == meta
    assert set(tensors2) == {"hrms", "pan"}
    for k in tensors:
        assert np.array_equal(tensors2[k], tensors[k])


def test_bundle_bytes_are_deterministic(tmp_path):
    arr = np.random.default_rng(3).random((2, 6, 6)).astype(np.float32)
    p1, p2 = tmp_path / "a.bundle", tmp_path / "b.bundle"
    pct.write_bundle(p1, {"x": 1}, {"t": arr, "u": arr * 2})
    pct.write_bundle(p2, {"x": 1}, {"u": arr * 2, "t": arr})
    assert p1.read_bytes() == p2.read_bytes()


def test_bundle_missing_meta_rejected(tmp_path):
    import zipfile
    path = tmp_path / "bad.bundle"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("t.pct1", pct.tensor_to_bytes(np.zeros(1, dtype=np.float32)))
    with pytest.raises(ValueError):
        pct.read_bundle(path)
