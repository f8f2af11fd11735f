"""Raw little-endian array container used for all generated media.

Layout: magic "DCLB", u32 version, u32 dtype tag (0=f64, 1=f32, 2=u8),
u32 rank, u64 dims[rank], then the payload in row-major order. Windowed
reads along axis 0 seek straight into the payload, so training never loads
whole shots.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DCLB"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_TAG_FOR_DTYPE = {v: k for k, v in _DTYPE_TAGS.items()}


class BlobFormatError(ValueError):
    pass


def dtype_tag(dtype):
    try:
        return _TAG_FOR_DTYPE[np.dtype(dtype).newbyteorder("<")]
    except KeyError:
        raise BlobFormatError(f"unsupported blob dtype {dtype}") from None


def header_size(rank):
    return 4 + 4 + 4 + 4 + 8 * rank


def write_blob(path, arr):
    arr = np.ascontiguousarray(arr)
    tag = dtype_tag(arr.dtype)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, tag, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes())


def read_header(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != MAGIC:
            raise BlobFormatError(f"bad blob magic in {path}")
        version, tag, rank = struct.unpack("<III", head[4:16])
        if version != VERSION:
            raise BlobFormatError(f"unsupported blob version {version} in {path}")
        if tag not in _DTYPE_TAGS:
            raise BlobFormatError(f"unknown dtype tag {tag} in {path}")
        dims_raw = fh.read(8 * rank)
        if len(dims_raw) < 8 * rank:
            raise BlobFormatError(f"truncated blob header in {path}")
        shape = struct.unpack(f"<{rank}Q", dims_raw)
    return _DTYPE_TAGS[tag], tuple(int(s) for s in shape)


def read_blob(path):
    dtype, shape = read_header(path)
    count = int(np.prod(shape)) if shape else 1
    data = np.fromfile(path, dtype=dtype, count=count, offset=header_size(len(shape)))
    if data.size != count:
        raise BlobFormatError(f"truncated blob payload in {path}")
    return data.reshape(shape)


def read_rows(path, start, stop):
    """Read payload rows [start, stop) along axis 0 without loading the rest."""
    dtype, shape = read_header(path)
    if not 0 <= start <= stop <= shape[0]:
        raise ValueError(f"row window [{start}, {stop}) outside axis of length {shape[0]}")
    row = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    offset = header_size(len(shape)) + start * row * dtype.itemsize
    data = np.fromfile(path, dtype=dtype, count=(stop - start) * row, offset=offset)
    if data.size != (stop - start) * row:
        raise BlobFormatError(f"truncated blob payload in {path}")
    return data.reshape((stop - start,) + shape[1:])
