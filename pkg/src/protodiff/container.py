"""Binary container shared by checkpoints, datasets, codebooks and sample batches.

Layout (all integers little-endian)::

    b"PDCK"  u32 version
    u32 header_length, header bytes (canonical JSON, UTF-8)
    u32 record_count
    per record: u32 path_length, path (UTF-8), u8 dtype tag, u8 rank,
                u64 dims[rank], row-major payload
    u32 CRC32 of every byte between the version field and the CRC itself

Canonical JSON (sorted keys, no whitespace) plus insertion-ordered records
makes save -> load -> save byte-identical.
"""

import json
import math
import os
import struct
import zlib

import numpy as np

MAGIC = b"PDCK"
VERSION = 1

_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
_TAG_OF = {np.dtype(v).str: k for k, v in _TAGS.items()}


class ContainerError(IOError):
    pass


class VersionMismatch(ContainerError):
    pass


class TruncatedFile(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def encode(header, tensors):
    """Serialize a JSON-able ``header`` and an ordered ``{path: ndarray}`` map."""
    body = bytearray()
    hb = canonical_json(header).encode("utf-8")
    body += struct.pack("<I", len(hb)) + hb
    body += struct.pack("<I", len(tensors))
    for path, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        tag = _TAG_OF.get(np.dtype(le).str)
        if tag is None:
            raise ContainerError(f"unsupported dtype {arr.dtype} for tensor {path!r}")
        pb = path.encode("utf-8")
        body += struct.pack("<I", len(pb)) + pb
        body += struct.pack("<BB", tag, arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()
    head = MAGIC + struct.pack("<I", VERSION)
    return bytes(head + body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf, source):
        self.buf = buf
        self.pos = 8
        self.source = source

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedFile(
                f"{self.source}: truncated while reading {what} at byte offset {self.pos} "
                f"(need {n} bytes, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf, source="<bytes>"):
    """Inverse of :func:`encode`; returns ``(header, tensors)``."""
    if len(buf) < 8:
        raise TruncatedFile(f"{source}: file too short ({len(buf)} bytes) for a container")
    if buf[:4] != MAGIC:
        raise ContainerError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version = struct.unpack("<I", buf[4:8])[0]
    if version != VERSION:
        raise VersionMismatch(f"{source}: format version {version}, this build reads {VERSION}")
    r = _Reader(buf, source)
    hb = r.take(r.u32("header length"), "header")
    count = r.u32("record count")
    raw = []
    for i in range(count):
        path = r.take(r.u32(f"record {i} path length"), f"record {i} path").decode("utf-8", "replace")
        tag, rank = struct.unpack("<BB", r.take(2, f"record {path!r} dtype/rank"))
        if tag not in _TAGS:
            raise ContainerError(f"{source}: unknown dtype tag {tag} in record {path!r}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"record {path!r} dims"))
        size = math.prod(dims) * _TAGS[tag].itemsize
        raw.append((path, tag, dims, r.take(size, f"record {path!r} payload")))
    end = r.pos
    stored = r.u32("checksum")
    if r.pos != len(buf):
        raise ContainerError(f"{source}: {len(buf) - r.pos} trailing bytes after checksum")
    actual = zlib.crc32(buf[8:end])
    if stored != actual:
        raise ChecksumError(f"{source}: CRC32 mismatch (stored {stored:#010x}, computed {actual:#010x})")
    header = json.loads(hb.decode("utf-8"))
    tensors = {p: np.frombuffer(b, dtype=_TAGS[t]).reshape(d).copy() for p, t, d, b in raw}
    return header, tensors


def save(path, header, tensors):
    """Atomic write (temp file + rename) so a failed write never leaves a partial file."""
    data = encode(header, tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read(), source=str(path))


def group(tensors, prefix):
    """Sub-map of ``tensors`` under ``prefix + '.'`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}
