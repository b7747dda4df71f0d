"""Snapshot directories: a text manifest plus one binary file per tensor.

Tensor file layout, all integers little-endian::

    uint32  name length in bytes
    bytes   name (UTF-8)
    4 bytes dtype tag, b"f32\\0"
    uint32  rank
    uint64  dims[rank]
    float32 payload, row-major

The manifest is ``key = value`` text. Its ``digest`` line is the SHA-256 of
every tensor file's bytes, taken in sorted name order.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
import torch

from fastrainbow.errors import SnapshotError

DTYPE_TAG = b"f32\x00"
MANIFEST = "manifest.txt"
TENSOR_DIR = "tensors"


def encode_tensor(name: str, array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.float32:
        raise SnapshotError(f"tensor {name!r}: only float32 is supported, got {array.dtype}")
    raw_name = name.encode("utf-8")
    header = struct.pack("<I", len(raw_name)) + raw_name + DTYPE_TAG
    header += struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array).astype("<f4").tobytes()


def decode_tensor(blob: bytes) -> tuple[str, np.ndarray]:
    try:
        (name_len,) = struct.unpack_from("<I", blob, 0)
        off = 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        tag = blob[off:off + 4]
        off += 4
        if tag != DTYPE_TAG:
            raise SnapshotError(f"tensor {name!r}: unsupported dtype tag {tag!r}")
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        count = int(np.prod(shape, dtype=np.int64))
        payload = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise SnapshotError(f"corrupt tensor file: {exc}") from exc
    if off + 4 * count != len(blob):
        raise SnapshotError(f"tensor {name!r}: payload length mismatch")
    return name, payload.reshape(shape).astype(np.float32)


def _digest(files: dict[str, bytes]) -> str:
    h = hashlib.sha256()
    for name in sorted(files):
        h.update(files[name])
    return h.hexdigest()


def save_snapshot(path: str | Path, state_dict: dict, manifest: dict) -> Path:
    """Write ``state_dict`` tensors and ``manifest`` entries under ``path``."""
    path = Path(path)
    files = {}
    for name, tensor in state_dict.items():
        array = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else tensor
        if array.dtype != np.float32:
            array = array.astype(np.float32)
        files[name] = encode_tensor(name, array)
    try:
        (path / TENSOR_DIR).mkdir(parents=True, exist_ok=True)
        for name, blob in files.items():
            (path / TENSOR_DIR / f"{name}.bin").write_bytes(blob)
        lines = [f"{k} = {v}\n" for k, v in manifest.items()]
        lines.append(f"tensors = {','.join(sorted(files))}\n")
        lines.append(f"digest = {_digest(files)}\n")
        (path / MANIFEST).write_text("".join(lines))
    except OSError as exc:
        raise SnapshotError(f"failed to write snapshot {path}: {exc}") from exc
    return path


def read_manifest(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text()
    except OSError as exc:
        raise SnapshotError(f"cannot read manifest in {path}: {exc}") from exc
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_snapshot(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    """Read and validate a snapshot; raises :class:`SnapshotError` on digest mismatch."""
    path = Path(path)
    manifest = read_manifest(path)
    names = [n for n in manifest.get("tensors", "").split(",") if n]
    files = {}
    for name in names:
        try:
            files[name] = (path / TENSOR_DIR / f"{name}.bin").read_bytes()
        except OSError as exc:
            raise SnapshotError(f"missing tensor file for {name!r} in {path}: {exc}") from exc
    if _digest(files) != manifest.get("digest"):
        raise SnapshotError(f"snapshot {path} failed digest validation")
    state = {}
    for name, blob in files.items():
        decoded_name, array = decode_tensor(blob)
        if decoded_name != name:
            raise SnapshotError(f"tensor file {name!r} holds {decoded_name!r}")
        state[name] = torch.from_numpy(array.copy())
    return state, manifest
