"""Binary parameter store ("CSC1") with a JSON sidecar for model metadata.

Layout: magic ``CSC1``, little-endian u32 tensor count, then per tensor a u16
name length, the UTF-8 name, a u8 rank, rank x u32 dims and the raw
little-endian float32 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor

MAGIC = b"CSC1"


class CheckpointError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def dumps(params: Mapping[str, object]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.asarray(_as_array(value), dtype="<f4", order="C")  # keeps 0-d tensors 0-d
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated payload at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        if name in out:
            raise CheckpointError(f"{source}: duplicate tensor name {name!r}")
        out[name] = arr
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes after {count} tensors")
    return out


def save_checkpoint(params: Mapping[str, object], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params))
    return path


def load_checkpoint(path, expected: Mapping[str, tuple[int, ...]] | None = None) -> dict[str, np.ndarray]:
    """Read a parameter store; optionally verify names and shapes."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    store = loads(buf, str(path))
    if expected is not None:
        check_store(store, expected, str(path))
    return store


def check_store(store: Mapping[str, np.ndarray], expected: Mapping[str, tuple[int, ...]], source: str = "") -> None:
    for name, shape in expected.items():
        if name not in store:
            raise CheckpointError(f"{source}: missing parameter {name!r}")
        if tuple(store[name].shape) != tuple(shape):
            raise CheckpointError(
                f"{source}: parameter {name!r} has shape {tuple(store[name].shape)}, expected {tuple(shape)}")
    extra = sorted(set(store) - set(expected))
    if extra:
        raise CheckpointError(f"{source}: unexpected parameter {extra[0]!r}")


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_meta(path, meta: Mapping) -> Path:
    mp = meta_path(path)
    mp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return mp


def load_meta(path) -> dict:
    mp = meta_path(path)
    if not mp.exists():
        raise CheckpointError(f"missing checkpoint metadata {mp}")
    return json.loads(mp.read_text(encoding="utf-8"))
