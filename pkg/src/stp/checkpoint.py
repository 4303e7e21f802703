"""STPC binary tensor archive.

Layout (little-endian)::

    b"STPC" | u32 version | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u8 dtype code | u8 rank | u64 dims[rank] | payload
    u64 config digest

dtype codes: 0 = float32, 1 = float64, 2 = int64.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STPC"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def write_archive(path, tensors: dict[str, np.ndarray], digest: int) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    buf.write(struct.pack("<Q", digest & 0xFFFFFFFFFFFFFFFF))
    Path(path).write_bytes(buf.getvalue())


def read_archive(path) -> tuple[dict[str, np.ndarray], int]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated archive at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an STPC archive")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{path}: {name} has unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).copy()
    (digest,) = struct.unpack("<Q", take(8))
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return tensors, digest


def save_checkpoint(path, model, optimizer=None, step: int = 0, digest: int = 0,
                    meta: dict[str, np.ndarray] | None = None) -> None:
    """``meta`` entries (e.g. pixel statistics) are stored as ``meta/<key>``."""
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    for k, v in (meta or {}).items():
        tensors[f"meta/{k}"] = np.asarray(v)
    tensors["meta/step"] = np.array(step, dtype=np.int64)
    write_archive(path, tensors, digest)


def load_checkpoint(path, model, optimizer=None, digest: int | None = None,
                    force: bool = False) -> int:
    """Restore parameters (and optimizer moments); returns the saved step."""
    tensors, saved = read_archive(path)
    if digest is not None and saved != digest and not force:
        raise CheckpointError(
            f"{path}: config digest {saved:016x} does not match expected {digest:016x}")
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
    if optimizer is not None:
        optimizer.load_state_tensors(tensors)
    return int(tensors.get("meta/step", np.array(0)))


def peek_digest(path) -> int:
    return read_archive(path)[1]


def checkpoint_meta(path) -> dict[str, np.ndarray]:
    tensors, _ = read_archive(path)
    return {k[5:]: v for k, v in tensors.items() if k.startswith("meta/")}
