# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

"""Binary checkpoints of named float64 arrays.

Layout: 8 byte magic, manifest length as little-endian uint64, the JSON
manifest padded with spaces up to a 64 byte boundary, then the arrays as
little-endian float64 at 64 byte aligned offsets (zero padded). The
manifest records name, shape and absolute offset of every array plus free
form metadata.
"""

import json
import logging
import os
import struct
from collections import OrderedDict

import numpy as np

from .core.temporary import temp_file
from .errors import CorruptionError, FormatError

LOG = logging.getLogger(__name__)

MAGIC = b"SSMPEFT1"
FORMAT_VERSION = 1
ALIGN = 64
HEADER_SIZE = len(MAGIC) + 8


def _align(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


class Checkpoint:
    def __init__(self, arrays=None, metadata=None):
        self.arrays = OrderedDict() if arrays is None else OrderedDict(arrays)
        self.metadata = {} if metadata is None else metadata

    def __len__(self):
        return len(self.arrays)

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays


def _manifest(arrays, metadata):
    entries = []
    for name, a in arrays.items():
        entries.append({"name": name, "shape": list(a.shape), "dtype": "<f8", "nbytes": int(a.size * 8)})
    # the offsets depend on the manifest size, which depends on the offsets
    # through their digits, so iterate until the layout is stable
    offsets = [0] * len(entries)
    while True:
        for e, off in zip(entries, offsets):
            e["offset"] = off
        text = json.dumps(
            {"format_version": FORMAT_VERSION, "arrays": entries, "metadata": metadata},
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        pos = _align(HEADER_SIZE + len(text))
        new_offsets = []
        for e in entries:
            new_offsets.append(pos)
            pos = _align(pos + e["nbytes"])
        if new_offsets == offsets:
            return text, entries
        offsets = new_offsets


def encode_checkpoint(arrays, metadata=None):
    metadata = {} if metadata is None else metadata
    arrays = OrderedDict((k, np.asarray(v, dtype=np.float64)) for k, v in arrays.items())
    for k, v in arrays.items():
        if not np.all(np.isfinite(v)):
            LOG.warning(f"encode_checkpoint(): array {k} holds non-finite values")
    text, entries = _manifest(arrays, metadata)
    start = _align(HEADER_SIZE + len(text))
    buf = bytearray(MAGIC)
    buf += struct.pack("<Q", len(text))
    buf += text
    buf += b" " * (start - len(buf))
    for e, a in zip(entries, arrays.values()):
        buf += b"\0" * (e["offset"] - len(buf))
        buf += a.astype("<f8").tobytes()
    buf += b"\0" * (_align(len(buf)) - len(buf))
    return bytes(buf)


def decode_checkpoint(data):
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    if len(data) < HEADER_SIZE:
        raise CorruptionError("checkpoint truncated in header")
    (n,) = struct.unpack("<Q", data[len(MAGIC) : HEADER_SIZE])
    if HEADER_SIZE + n > len(data):
        raise CorruptionError(f"manifest length {n} exceeds file size {len(data)}")
    try:
        manifest = json.loads(data[HEADER_SIZE : HEADER_SIZE + n].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise CorruptionError(f"manifest is not valid JSON: {e}")
    if not isinstance(manifest, dict) or not isinstance(manifest.get("arrays", None), list):
        raise CorruptionError("manifest has no array list")
    if manifest.get("format_version", None) != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format_version={manifest.get('format_version')}")

    payload_start = _align(HEADER_SIZE + n)
    arrays = OrderedDict()
    prev_end = payload_start
    for e in manifest["arrays"]:
        try:
            name = e["name"]
            shape = tuple(int(x) for x in e["shape"])
            off = int(e["offset"])
            nbytes = int(e["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise CorruptionError(f"malformed manifest entry {e!r}")
        if e.get("dtype", "<f8") != "<f8":
            raise CorruptionError(f"{name}: unsupported dtype {e.get('dtype')}")
        if any(x < 0 for x in shape) or nbytes != 8 * int(np.prod(shape)):
            raise CorruptionError(f"{name}: nbytes={nbytes} does not match shape {shape}")
        if off % ALIGN or off < prev_end:
            raise CorruptionError(f"{name}: offset {off} misaligned or overlapping")
        if off + nbytes > len(data):
            raise CorruptionError(f"{name}: payload truncated ({off + nbytes} > {len(data)} bytes)")
        if name in arrays:
            raise CorruptionError(f"duplicate array {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(np.float64)
        prev_end = off + nbytes
    return Checkpoint(arrays, manifest.get("metadata", {}))


def save_checkpoint(path, arrays, metadata=None):
    """Write ``arrays`` (name -> array, in order) atomically to ``path``"""
    if isinstance(arrays, Checkpoint):
        metadata = arrays.metadata if metadata is None else metadata
        arrays = arrays.arrays
    data = encode_checkpoint(arrays, metadata)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with temp_file(extension=".ckpt.tmp", directory=directory) as tmp:
        with open(tmp.path, "wb") as f:
            f.write(data)
        tmp.commit(path)
    LOG.info(f"checkpoint with {len(arrays)} arrays written to {path} ({len(data)} bytes)")


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    return decode_checkpoint(data)
