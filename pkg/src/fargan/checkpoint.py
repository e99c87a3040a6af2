#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import logging
import os
import struct
import tempfile
from collections import OrderedDict

import numpy as np

from fargan.errors import CheckpointFormatError

logger = logging.getLogger(__name__)

"""
Read and write the named-array container used for checkpoints and imported
feature network weights.

The layout is the 4 magic bytes "FARG", a format version as a little-endian
u32, then records until the end of the file. Each record is::

    name length (u32) | UTF-8 name | dtype tag (u8: 0 = f32, 1 = f64)
    | rank (u32) | dims (u32 each) | little-endian element bytes

For example::

    >>> records = OrderedDict(w=np.arange(3, dtype=np.float32))
    >>> decoded = decode(encode(records))
    >>> assert list(decoded) == ["w"] and np.array_equal(decoded["w"], records["w"])
"""

MAGIC = b"FARG"
FORMAT_VERSION = 1

DTYPE_TAGS = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
}

TAG_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
}


def encode(records):
    """
    Return the container bytes for the ``records`` mapping of name -> numpy
    array, written in mapping order.
    """
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, array in records.items():
        array = np.asarray(array)
        try:
            tag = DTYPE_TAGS[array.dtype]
        except KeyError as e:
            raise CheckpointFormatError(
                f"{name!r}: unsupported dtype {array.dtype}, only float32 and float64 are stored"
            ) from e
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<BI", tag, array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=TAG_DTYPES[tag]).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, size, what):
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointFormatError(
                f"truncated container while reading {what}: need {size} bytes, "
                f"{len(self.data) - self.offset} left",
                offset=self.offset,
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def exhausted(self):
        return self.offset >= len(self.data)


def decode(data):
    """
    Return an ordered mapping of name -> numpy array decoded from container
    bytes ``data``. Raise a CheckpointFormatError naming the byte offset of any
    problem.
    """
    reader = _Reader(data)
    magic = reader.take(len(MAGIC), "magic bytes")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}", offset=0)
    (version,) = reader.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"unsupported format version {version}, expected {FORMAT_VERSION}",
            offset=len(MAGIC),
        )

    records = OrderedDict()
    while not reader.exhausted:
        start = reader.offset
        (name_length,) = reader.unpack("<I", "name length")
        raw_name = reader.take(name_length, "record name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError("record name is not valid UTF-8", offset=start) from e
        tag, rank = reader.unpack("<BI", f"{name!r} header")
        if tag not in TAG_DTYPES:
            raise CheckpointFormatError(
                f"{name!r}: unknown dtype tag {tag}", offset=reader.offset - 5
            )
        dims = reader.unpack(f"<{rank}I", f"{name!r} dimensions")
        dtype = TAG_DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64))
        payload = reader.take(count * dtype.itemsize, f"{name!r} elements")
        if name in records:
            raise CheckpointFormatError(f"duplicate record {name!r}", offset=start)
        array = np.frombuffer(payload, dtype=dtype).reshape(dims)
        records[name] = array.astype(dtype.newbyteorder("="))
    return records


def save(path, records):
    """
    Write ``records`` to ``path`` atomically: the bytes go to a temporary file
    in the same directory that then replaces ``path``.
    """
    payload = encode(records)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    handle, temporary = tempfile.mkstemp(prefix=".farg-", dir=directory)
    try:
        with os.fdopen(handle, "wb") as output:
            output.write(payload)
        os.replace(temporary, path)
    except BaseException:
        if os.path.exists(temporary):
            os.remove(temporary)
        raise
    logger.debug("Wrote %d records (%d bytes) to %s", len(records), len(payload), path)


def load(path):
    with open(path, "rb") as f:
        return decode(f.read())


def encode_text(text):
    """
    Return ``text`` as a float32 array of its UTF-8 byte values, the way
    strings travel inside the container.

    >>> assert decode_text(encode_text("seed = 17")) == "seed = 17"
    """
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(array):
    return bytes(np.asarray(array, dtype=np.uint8).tolist()).decode("utf-8")
