"""Shared binary-format plumbing.

All on-disk artifacts use little-endian integers and a 4-byte ASCII magic.
Bit packing is MSB-first within bytes: bit j of a row lives in byte j // 8 at
bit position 7 - (j % 8), with bit value 1 for +1 and 0 for -1. Padding bits
past the declared width are always zero, which makes write -> read -> write
byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from cshash.errors import FormatError, ValidationError

MAGIC_CENTERS = b"CSHC"
MAGIC_CODES = b"CSBC"
MAGIC_TENSOR = b"CSFT"
MAGIC_INDEX = b"CSIX"

FORMAT_VERSION = 1


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write data to path via a temp file + rename so readers never see a
    truncated artifact."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Reader:
    """Cursor over a byte buffer that reports offsets in its errors."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.what}: truncated, wanted {n} more bytes", offset=self.pos
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def expect_magic(self, magic: bytes) -> None:
        start = self.pos
        got = self.take(4)
        if got != magic:
            raise FormatError(
                f"{self.what}: bad magic {got.hex()} (expected {magic.hex()})",
                offset=start,
            )

    def u32(self) -> int:
        start = self.pos
        (value,) = struct.unpack("<I", self.take(4))
        del start
        return value

    def u64(self) -> int:
        (value,) = struct.unpack("<Q", self.take(8))
        return value

    def u8(self) -> int:
        return self.take(1)[0]

    def expect_version(self, expected: int = FORMAT_VERSION) -> None:
        start = self.pos
        version = self.u32()
        if version != expected:
            raise FormatError(
                f"{self.what}: unsupported version {version}", offset=start
            )

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(
                f"{self.what}: {len(self.data) - self.pos} trailing bytes",
                offset=self.pos,
            )


def pack_sign_rows(rows: np.ndarray) -> np.ndarray:
    """Pack a (n, bits) matrix over {-1,+1} into (n, ceil(bits/8)) bytes."""
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise ValidationError(f"expected a 2-D sign matrix, got shape {rows.shape}")
    if not np.all(np.abs(rows) == 1):
        raise ValidationError("sign matrix entries must be exactly -1 or +1")
    return np.packbits(rows > 0, axis=1)


def unpack_sign_rows(packed: np.ndarray, bits: int, *, what: str = "codes") -> np.ndarray:
    """Unpack (n, ceil(bits/8)) bytes back to a (n, bits) int8 sign matrix.

    Rejects nonzero padding bits so that unpack -> pack is the identity.
    """
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.ndim != 2 or packed.shape[1] != (bits + 7) // 8:
        raise ValidationError(
            f"{what}: packed shape {packed.shape} inconsistent with {bits} bits"
        )
    unpacked = np.unpackbits(packed, axis=1)
    if bits % 8 and np.any(unpacked[:, bits:]):
        raise FormatError(f"{what}: nonzero padding bits past bit {bits}")
    return (unpacked[:, :bits].astype(np.int8) * 2) - 1


def write_tensor_bytes(array: np.ndarray) -> bytes:
    """Serialize a dense float tensor: magic, version, ndims, dims, f32 data."""
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 0:
        raise ValidationError("tensor files require at least one dimension")
    if any(d <= 0 for d in array.shape):
        raise ValidationError(f"tensor dims must be positive, got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValidationError("refusing to write non-finite tensor values")
    header = MAGIC_TENSOR + struct.pack("<II", FORMAT_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.astype("<f4").tobytes(order="C")


def read_tensor_bytes(data: bytes, *, what: str = "tensor") -> np.ndarray:
    reader = Reader(data, what)
    reader.expect_magic(MAGIC_TENSOR)
    reader.expect_version()
    ndims = reader.u32()
    if ndims == 0 or ndims > 8:
        raise FormatError(f"{what}: implausible ndims {ndims}", offset=reader.pos - 4)
    dims = [reader.u32() for _ in range(ndims)]
    if any(d == 0 for d in dims):
        raise FormatError(f"{what}: zero dimension in {dims}", offset=reader.pos)
    count = int(np.prod(dims, dtype=np.int64))
    start = reader.pos
    raw = reader.take(4 * count)
    reader.done()
    array = np.frombuffer(raw, dtype="<f4").reshape(dims)
    if not np.all(np.isfinite(array)):
        bad = int(np.flatnonzero(~np.isfinite(array.ravel()))[0])
        raise FormatError(
            f"{what}: non-finite value at flat index {bad}", offset=start + 4 * bad
        )
    return array.astype(np.float64)


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    atomic_write(path, write_tensor_bytes(array))


def read_tensor(path: str | os.PathLike, *, what: str | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    return read_tensor_bytes(data, what=what or os.fspath(path))


def write_tensor_container(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors as concatenated tensor records plus a JSON manifest
    sidecar (<path>.json) recording each tensor's role, shape and offset."""
    blob = b""
    manifest = []
    for name, array in tensors.items():
        record = write_tensor_bytes(array)
        manifest.append(
            {
                "name": name,
                "shape": list(np.asarray(array).shape),
                "offset": len(blob),
                "nbytes": len(record),
            }
        )
        blob += record
    atomic_write(path, blob)
    sidecar = json.dumps({"tensors": manifest}, indent=2, sort_keys=True) + "\n"
    atomic_write(os.fspath(path) + ".json", sidecar.encode())


def read_tensor_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    path = os.fspath(path)
    try:
        with open(path + ".json") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable container manifest: {exc}") from exc
    with open(path, "rb") as fh:
        blob = fh.read()
    out: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        name, offset, nbytes = entry["name"], entry["offset"], entry["nbytes"]
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: container truncated", offset=offset)
        array = read_tensor_bytes(blob[offset : offset + nbytes], what=f"{path}:{name}")
        if list(array.shape) != list(entry["shape"]):
            raise FormatError(
                f"{path}:{name}: shape {list(array.shape)} != manifest {entry['shape']}",
                offset=offset,
            )
        out[name] = array
    return out


def sha256_file(path: str | os.PathLike) -> str:
    import hashlib

    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
