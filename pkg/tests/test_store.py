import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import TINY
from hive3d import flowsim as fs
from hive3d import hiveplot as hp
from hive3d import model as cnn
from hive3d import store
from hive3d.errors import FormatError, IntegrityError
from hive3d.tensor import Tensor

arrays = hnp.arrays(
    np.float32,
    hnp.array_shapes(min_dims=1, max_dims=5, min_side=0, max_side=5),
    elements=st.floats(width=32, allow_nan=True, allow_infinity=True),
)


@given(arrays)
def test_tensor_round_trip_bit_exact(a):
    b, end = store.tensor_from_bytes(store.tensor_to_bytes(a))
    assert end == len(store.tensor_to_bytes(a))
    assert b.shape == a.shape and b.tobytes() == a.tobytes()


def test_tensor_layout_is_little_endian():
    buf = store.tensor_to_bytes(np.array([[1.0, 2.0, 3.0]], np.float32))
    assert buf[:4] == b"HGT1" and buf[4] == 2
    assert struct.unpack("<2I", buf[5:13]) == (1, 3) and buf[13] == 0
    payload = buf[14:26]
    assert payload == np.array([1, 2, 3], "<f4").tobytes()
    assert struct.unpack("<I", buf[26:]) == (zlib.crc32(payload),)


def test_only_float32_storable():
    with pytest.raises(FormatError):
        store.tensor_to_bytes(np.zeros(3, np.float64))


def test_bad_magic_and_crc_report_offset():
    buf = bytearray(store.tensor_to_bytes(np.arange(4, dtype=np.float32)))
    bad = bytes(b"XGT1") + bytes(buf[4:])
    with pytest.raises(IntegrityError) as exc:
        store.tensor_from_bytes(bad)
    assert exc.value.offset == 0
    buf[12] ^= 0x01  # inside the payload, which starts at offset 10
    with pytest.raises(IntegrityError) as exc:
        store.tensor_from_bytes(bytes(buf))
    assert exc.value.offset == 10


@pytest.mark.parametrize("cut", [0, 3, 5, 8, 20])
def test_truncation_is_format_error(cut):
    buf = store.tensor_to_bytes(np.arange(4, dtype=np.float32))
    with pytest.raises(FormatError):
        store.tensor_from_bytes(buf[:cut])


def test_unknown_dtype_tag():
    buf = bytearray(store.tensor_to_bytes(np.arange(2, dtype=np.float32)))
    buf[6] = 7
    with pytest.raises(FormatError):
        store.tensor_from_bytes(bytes(buf))


def test_file_round_trip_and_trailing_bytes(tmp_path):
    a = np.random.default_rng(0).standard_normal((1, 8, 4, 4)).astype(np.float32)
    store.save_tensor(Tensor(a), tmp_path / "a.hgt")
    assert store.load_tensor(tmp_path / "a.hgt").data.tobytes() == a.tobytes()
    with open(tmp_path / "a.hgt", "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(FormatError):
        store.load_tensor(tmp_path / "a.hgt")


def test_checkpoint_round_trip(tmp_path):
    params = cnn.init(3, TINY)
    cfg = {"lr": 5e-5, "regime": "clean"}
    store.save_checkpoint(params, tmp_path / "m.hgc", cfg)
    back = store.load_checkpoint(tmp_path / "m.hgc")
    assert back.arch == params.arch and back.meta == cfg
    for (n1, t1), (n2, t2) in zip(params.tensors(), back.tensors()):
        assert n1 == n2 and t1.data.tobytes() == t2.data.tobytes()
    store.save_checkpoint(back, tmp_path / "m2.hgc", cfg)
    assert (tmp_path / "m.hgc").read_bytes() == (tmp_path / "m2.hgc").read_bytes()


def test_checkpoint_corruption_detected():
    buf = store.checkpoint_to_bytes(cnn.init(3, TINY), {})
    rng = np.random.default_rng(5)
    for pos in rng.choice(len(buf), 200, replace=False):
        bad = bytearray(buf)
        bad[pos] ^= 1 << int(rng.integers(8))
        with pytest.raises(FormatError):
            store.checkpoint_from_bytes(bytes(bad))
    with pytest.raises(FormatError):
        store.checkpoint_from_bytes(buf[:-9])
    with pytest.raises(FormatError):
        store.checkpoint_from_bytes(b"")


@pytest.fixture
def tiny_manifest(tmp_path):
    m = fs.generate_dataset(2, fs.TraceConfig(seed=21), 0.5)
    return fs.write_dataset(m, tmp_path / "data"), m


def test_preprocess_layout_and_idempotence(tmp_path, tiny_manifest):
    mpath, m = tiny_manifest
    res = store.preprocess_dataset(mpath, out_dir=tmp_path)
    assert len(res.written) == 4 and not res.skipped and not res.errors
    for e in m.entries:
        assert (tmp_path / "preprocessed" / e.split / e.label).is_dir()
    files = sorted((tmp_path / "preprocessed").rglob("*.hgt"))
    stamps = [f.stat().st_mtime_ns for f in files]
    again = store.preprocess_dataset(mpath, out_dir=tmp_path)
    assert not again.written and len(again.skipped) == 4
    assert [f.stat().st_mtime_ns for f in files] == stamps


def test_loaded_equals_fresh_render(tmp_path, tiny_manifest):
    mpath, m = tiny_manifest
    store.preprocess_dataset(mpath, out_dir=tmp_path)
    x, y, names = store.load_split(tmp_path, "train")
    assert x.shape == (2, 1, 8, 64, 64) and list(y) == [0, 1]
    for e in m.train:
        i = names.index(f"{e.label}/{e.name}")
        fresh = hp.to_tensor(hp.render_sequence(fs.generate_trace(e.config)))
        assert x[i].tobytes() == fresh.tobytes()


def test_preprocess_workers_match_serial(tmp_path, tiny_manifest):
    mpath, _ = tiny_manifest
    store.preprocess_dataset(mpath, out_dir=tmp_path / "a")
    store.preprocess_dataset(mpath, out_dir=tmp_path / "b", workers=2)
    a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_preprocess_missing_file_continues(tmp_path, tiny_manifest):
    mpath, m = tiny_manifest
    victim = mpath.parent / fs.read_manifest(mpath)[0][0].relative_to(mpath.parent)
    victim.unlink()
    res = store.preprocess_dataset(mpath, out_dir=tmp_path)
    assert len(res.errors) == 1 and len(res.written) == 3


def test_changed_trace_is_rerendered(tmp_path, tiny_manifest):
    mpath, _ = tiny_manifest
    store.preprocess_dataset(mpath, out_dir=tmp_path)
    path = fs.read_manifest(mpath)[1][0]
    path.write_text(path.read_text().splitlines()[0] + "\n")
    res = store.preprocess_dataset(mpath, out_dir=tmp_path)
    assert len(res.written) == 1 and len(res.skipped) == 3
