"""Bit-exact binary tensor container.

Layout (all integers little-endian)::

    magic    8 bytes  b"M2D2TNSR"
    version  u8       1
    dtype    u8       0 = f32, 1 = f64, 2 = u8
    ndim     u8
    reserved u8       0
    dims     ndim x u64
    payload  row-major, element-size * prod(dims) bytes

A named-tensor container (checkpoints) is a plain concatenation of records,
each a u16 name length, the UTF-8 name, then one tensor record as above.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"M2D2TNSR"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}
_HEAD = struct.Struct("<8sBBBB")


def encode_tensor(array):
    array = np.asarray(array)
    code = CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise FormatError("dtype", f"unsupported dtype {array.dtype}; use float32, float64 or uint8")
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()
    return _HEAD.pack(MAGIC, VERSION, code, array.ndim, 0) + dims + payload


def decode_tensor(buf, offset=0, expect_dtype=None):
    """Parse one record starting at ``offset``; returns (array, next_offset)."""
    if len(buf) - offset < _HEAD.size:
        raise FormatError("header", f"truncated: {len(buf) - offset} bytes, need {_HEAD.size}")
    magic, version, code, ndim, _ = _HEAD.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if code not in DTYPES:
        raise FormatError("dtype", f"unknown dtype code {code}")
    if expect_dtype is not None and DTYPES[code] != np.dtype(expect_dtype).newbyteorder("<"):
        raise FormatError("dtype", f"file holds {DTYPES[code]}, caller expected {np.dtype(expect_dtype)}")
    pos = offset + _HEAD.size
    if len(buf) - pos < 8 * ndim:
        raise FormatError("dims", "truncated dimension list")
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    count = int(np.prod(dims, dtype=np.uint64)) if ndim else 1
    nbytes = count * DTYPES[code].itemsize
    if len(buf) - pos < nbytes:
        raise FormatError("payload", f"truncated: {len(buf) - pos} bytes, need {nbytes}")
    array = np.frombuffer(buf, dtype=DTYPES[code], count=count, offset=pos).reshape(dims)
    return array.astype(DTYPES[code].newbyteorder("="), copy=True), pos + nbytes


def write_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def read_tensor(path, expect_dtype=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    array, end = decode_tensor(buf, 0, expect_dtype)
    if end != len(buf):
        raise FormatError("payload", f"{len(buf) - end} trailing bytes after payload")
    return array


def encode_named(tensors):
    chunks = []
    for name, array in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError("name", f"name too long: {name[:32]}...")
        chunks.append(struct.pack("<H", len(raw)) + raw + encode_tensor(array))
    return b"".join(chunks)


def decode_named(buf):
    out, pos = {}, 0
    while pos < len(buf):
        if len(buf) - pos < 2:
            raise FormatError("name", "truncated name length")
        (length,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) - pos < length:
            raise FormatError("name", "truncated name")
        name = bytes(buf[pos : pos + length]).decode("utf-8")
        pos += length
        if name in out:
            raise FormatError("name", f"duplicate tensor name {name!r}")
        out[name], pos = decode_tensor(buf, pos)
    return out


def write_named(path, tensors):
    with open(path, "wb") as fh:
        fh.write(encode_named(tensors))


def read_named(path):
    with open(path, "rb") as fh:
        return decode_named(fh.read())
