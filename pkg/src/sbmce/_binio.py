"""Little-endian binary container helpers shared by datasets, priors and checkpoints."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError


def read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_struct(f: BinaryIO, fmt: str, what: str) -> tuple:
    return struct.unpack(fmt, read_exact(f, struct.calcsize(fmt), what))


def check_magic(f: BinaryIO, magic: bytes, version: int) -> None:
    got = read_exact(f, len(magic), "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (ver,) = read_struct(f, "<H", "version")
    if ver != version:
        raise FormatError(f"unsupported format version {ver} (this build reads version {version})")


def write_header(f: BinaryIO, magic: bytes, version: int) -> None:
    f.write(magic)
    f.write(struct.pack("<H", version))


def write_f8(f: BinaryIO, a: np.ndarray) -> None:
    f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_f8(f: BinaryIO, shape: tuple[int, ...], what: str) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    buf = read_exact(f, 8 * n, what)
    return np.frombuffer(buf, dtype="<f8").astype(float).reshape(shape)


def write_c16(f: BinaryIO, a: np.ndarray) -> None:
    f.write(np.ascontiguousarray(a, dtype="<c16").tobytes())


def read_c16(f: BinaryIO, shape: tuple[int, ...], what: str) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    buf = read_exact(f, 16 * n, what)
    return np.frombuffer(buf, dtype="<c16").astype(complex).reshape(shape)


def expect_eof(f: BinaryIO) -> None:
    if f.read(1):
        raise FormatError("trailing bytes after payload")
