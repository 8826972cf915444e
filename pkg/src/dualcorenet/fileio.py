"""Binary tensor files, named-tensor checkpoints and PGM images.

Tensor file (``DCT1``): magic, u32 rank, rank x u32 extents, then row-major
little-endian float32 values.  Checkpoint (``DCNCKPT1``): magic, u32 count,
then per entry a u32 name length, UTF-8 name bytes and a ``DCT1`` tensor.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"DCT1"
CKPT_MAGIC = b"DCNCKPT1"


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def write_tensor(f: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "extents"))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(f, 4 * count, "tensor values"), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array)


def load_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            return read_tensor(f)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors atomically (temp file then rename)."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, np.asarray(arr))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            magic = f.read(len(CKPT_MAGIC))
            if magic != CKPT_MAGIC:
                raise FormatError(f"bad checkpoint header {magic!r}")
            (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
            out = {}
            for _ in range(count):
                (n,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
                name = _read_exact(f, n, "name").decode("utf-8")
                out[name] = read_tensor(f)
            return out
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


# -- PGM ----------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # single whitespace byte before the raster


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary (P5) PGM; returns the integer raster and its maxval."""
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    if len(data) - offset < count * np.dtype(dtype).itemsize:
        raise FormatError(f"{path}: truncated raster")
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return raster.reshape(h, w).astype(np.int64), maxval


def write_pgm(path, raster: np.ndarray, maxval: int) -> None:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ValueError("PGM raster must be 2-D")
    h, w = raster.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(np.clip(raster, 0, maxval).astype(dtype).tobytes())


def read_image_pgm(path) -> np.ndarray:
    """PGM as float32 intensities scaled to [0, 1]."""
    raster, maxval = read_pgm(path)
    return (raster / maxval).astype(np.float32)


def write_image_pgm(path, image: np.ndarray) -> None:
    """Write [0, 1] intensities as a 16-bit PGM."""
    write_pgm(path, np.rint(np.clip(image, 0, 1) * 65535).astype(np.int64), 65535)


def write_mask_pgm(path, mask: np.ndarray) -> None:
    """Write a binary mask as an 8-bit {0, 255} PGM."""
    write_pgm(path, np.where(np.asarray(mask) > 0, 255, 0), 255)


def write_soft_pgm(path, probs: np.ndarray) -> None:
    """Write a probability map as an 8-bit PGM after 255-scaling."""
    write_pgm(path, np.rint(np.clip(probs, 0, 1) * 255).astype(np.int64), 255)


def read_mask_pgm(path) -> np.ndarray:
    raster, _ = read_pgm(path)
    return (raster > 0).astype(np.float32)
