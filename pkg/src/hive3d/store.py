"""Bit-exact binary persistence for tensors, checkpoints and preprocessed datasets.

Tensor file (all integers little-endian)::

    b"HGT1" | rank:u8 | extents:u32 * rank | dtype:u8 (0 = f32) | payload | crc32(payload):u32

Checkpoint file::

    b"HGC1" | version:u16 | arch_json | config_json | n:u32 | n * (name, tensor file) | crc32(all before):u32

where ``arch_json``/``config_json`` are ``u32 length + UTF-8 canonical JSON`` and
``name`` is ``u16 length + UTF-8``.
"""
import hashlib
import json
import logging
import struct
import zlib
from concurrent.futures import Future, ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hive3d import hiveplot
from hive3d.errors import FormatError, IntegrityError
from hive3d.flowsim import CLASS_NAMES, atomic_write_bytes, read_manifest, read_trace
from hive3d.tensor import Kernel3D, Tensor

log = logging.getLogger(__name__)

TENSOR_MAGIC = b"HGT1"
CHECKPOINT_MAGIC = b"HGC1"
CHECKPOINT_VERSION = 1
DTYPE_F32 = 0
_DTYPES = {DTYPE_F32: np.dtype("<f4")}


def tensor_to_bytes(t):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype != np.float32:
        raise FormatError(f"only float32 tensors are storable, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank too large")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header = TENSOR_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", DTYPE_F32)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def tensor_from_bytes(buf, offset=0):
    """Decode one tensor file starting at ``offset``; returns (array, end offset)."""
    view = memoryview(buf)
    if len(view) - offset < 4 + 1:
        raise FormatError(f"truncated tensor header at offset {offset}")
    if bytes(view[offset : offset + 4]) != TENSOR_MAGIC:
        raise IntegrityError("bad tensor magic", offset)
    rank = view[offset + 4]
    pos = offset + 5
    if len(view) - pos < 4 * rank + 1:
        raise FormatError(f"truncated tensor extents at offset {pos}")
    shape = struct.unpack_from(f"<{rank}I", view, pos)
    pos += 4 * rank
    dtype_tag = view[pos]
    pos += 1
    if dtype_tag not in _DTYPES:
        raise FormatError(f"unsupported dtype tag {dtype_tag} at offset {pos - 1}")
    dtype = _DTYPES[dtype_tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(view) - pos < nbytes + 4:
        raise FormatError(f"truncated tensor payload at offset {pos}: need {nbytes + 4} bytes")
    payload = bytes(view[pos : pos + nbytes])
    (crc,) = struct.unpack_from("<I", view, pos + nbytes)
    if zlib.crc32(payload) != crc:
        raise IntegrityError("tensor payload CRC mismatch", pos)
    arr = np.frombuffer(payload, dtype=dtype).astype(np.float32).reshape(shape)
    return arr, pos + nbytes + 4


def save_tensor(t, path):
    atomic_write_bytes(path, tensor_to_bytes(t))


def load_tensor(path):
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return Tensor(arr)


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _pack_blob(b):
    return struct.pack("<I", len(b)) + b


def checkpoint_to_bytes(params, config=None):
    body = CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION)
    body += _pack_blob(_canonical_json(params.arch.to_dict()))
    body += _pack_blob(_canonical_json(config if config is not None else params.meta))
    named = params.tensors()
    body += struct.pack("<I", len(named))
    for name, t in named:
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb
        body += _pack_blob(tensor_to_bytes(t))
    return body + struct.pack("<I", zlib.crc32(body))


def _read_blob(view, pos, what):
    if len(view) - pos < 4:
        raise FormatError(f"truncated {what} length at offset {pos}")
    (n,) = struct.unpack_from("<I", view, pos)
    pos += 4
    if len(view) - pos < n:
        raise FormatError(f"truncated {what} at offset {pos}")
    return bytes(view[pos : pos + n]), pos + n


def checkpoint_from_bytes(buf):
    from hive3d.model import Architecture, ModelParams

    view = memoryview(buf)
    if len(view) < 4 + 2 + 4:
        raise FormatError("checkpoint too short")
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise IntegrityError("bad checkpoint magic", 0)
    (crc,) = struct.unpack_from("<I", view, len(view) - 4)
    if zlib.crc32(bytes(view[:-4])) != crc:
        raise IntegrityError("checkpoint CRC mismatch", len(view) - 4)
    (version,) = struct.unpack_from("<H", view, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    body = view[:-4]
    arch_raw, pos = _read_blob(body, 6, "architecture block")
    cfg_raw, pos = _read_blob(body, pos, "config block")
    arch = Architecture.from_dict(json.loads(arch_raw))
    config = json.loads(cfg_raw)
    if len(body) - pos < 4:
        raise FormatError("truncated tensor count")
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(n):
        if len(body) - pos < 2:
            raise FormatError(f"truncated tensor name at offset {pos}")
        (ln,) = struct.unpack_from("<H", body, pos)
        name = bytes(body[pos + 2 : pos + 2 + ln]).decode()
        blob, pos = _read_blob(body, pos + 2 + ln, f"tensor {name}")
        arr, _ = tensor_from_bytes(blob)
        tensors[name] = arr
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} unexpected bytes in checkpoint body")
    blocks = []
    for i in range(1, len(arch.channels) + 1):
        blocks.append(Kernel3D(Tensor(tensors[f"block{i}.weight"]), Tensor(tensors[f"block{i}.bias"])))
    return ModelParams(arch, blocks, Tensor(tensors["head.weight"]), Tensor(tensors["head.bias"]), config)


def save_checkpoint(params, path, config=None):
    atomic_write_bytes(path, checkpoint_to_bytes(params, config))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())


# -- preprocessed datasets ---------------------------------------------------

INDEX_NAME = "index.tsv"
RENDER_VERSION = "hive-render-1"


@dataclass
class PreprocessResult:
    written: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    errors: list = field(default_factory=list)


def _source_digest(trace_bytes, layout, label):
    h = hashlib.blake2b(digest_size=16)
    h.update(RENDER_VERSION.encode())
    h.update(repr((hiveplot.N_FRAMES, hiveplot.ALPHA, hiveplot.HALF_WIDTH)).encode())
    h.update(repr(layout).encode())
    h.update(label.encode())
    h.update(trace_bytes)
    return h.hexdigest()


def _read_index(root):
    path = root / INDEX_NAME
    if not path.exists():
        return {}
    index = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rel, digest = line.split("\t")
            index[rel] = digest
    return index


def _render_bytes(trace_path, layout, label):
    seq = hiveplot.render_sequence(read_trace(trace_path), layout, label=label, source=str(trace_path))
    return tensor_to_bytes(hiveplot.to_tensor(seq))


def preprocess_dataset(manifest_path, layout=None, out_dir=".", workers=1):
    """Render every trace in a manifest to ``out_dir/preprocessed/{split}/{label}/*.hgt``.

    Entries whose source digest matches the stored index are skipped. IO
    problems are logged per file and collected in the result; processing
    continues with the next entry. ``workers > 1`` renders in worker
    processes; files are still written in manifest order.
    """
    layout = layout or hiveplot.HiveLayout()
    root = Path(out_dir) / "preprocessed"
    index = _read_index(root)
    result = PreprocessResult()
    todo = []
    for trace_path, label, split in read_manifest(manifest_path):
        rel = f"{split}/{label}/{Path(trace_path).stem}.hgt"
        try:
            digest = _source_digest(Path(trace_path).read_bytes(), layout, label)
        except OSError as exc:
            log.error("preprocess %s: %s", trace_path, exc)
            result.errors.append((str(trace_path), str(exc)))
            continue
        if index.get(rel) == digest and (root / rel).exists():
            result.skipped.append(rel)
        else:
            todo.append((trace_path, label, rel, digest))

    def rendered():
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_render_bytes, t, layout, lab) for t, lab, _, _ in todo]
                for f in futures:
                    yield f
        else:
            for t, lab, _, _ in todo:
                f = Future()
                try:
                    f.set_result(_render_bytes(t, layout, lab))
                except OSError as exc:
                    f.set_exception(exc)
                yield f

    for (trace_path, _, rel, digest), fut in zip(todo, rendered()):
        try:
            atomic_write_bytes(root / rel, fut.result())
            index[rel] = digest
            result.written.append(rel)
        except OSError as exc:
            log.error("preprocess %s: %s", trace_path, exc)
            result.errors.append((str(trace_path), str(exc)))
    lines = "".join(f"{k}\t{index[k]}\n" for k in sorted(index))
    atomic_write_bytes(root / INDEX_NAME, lines.encode())
    return result


def load_split(out_dir, split):
    """Stacked tensors (N, 1, D, H, W), labels (N,) and names, in sorted order."""
    root = Path(out_dir) / "preprocessed" / split
    xs, ys, names = [], [], []
    for y, label in enumerate(CLASS_NAMES):
        for path in sorted((root / label).glob("*.hgt")):
            xs.append(load_tensor(path).data)
            ys.append(y)
            names.append(f"{label}/{path.stem}")
    if not xs:
        return np.zeros((0,), np.float32), np.zeros(0, np.int64), []
    return np.stack(xs), np.asarray(ys, dtype=np.int64), names
