"""
Binary container for network parameters.

Layout (all little-endian)::

    magic        4s   b"SINR"
    version      u16
    role         u8   0 = full model, 1 = input sub-model, 2 = output sub-model
    division     u16  block index of the split (0 for a full model)
    input dims   u8 count, then u32 each    per-sample input shape
    mid dims     u8 count, then u32 each    intermediate shape (empty for full)
    layer count  u16
    payload len  u32
    payload      per layer: kind u8, block u8, attr f64, tensor count u8,
                 then per tensor: ndim u8, dims u32 each, raw f64 data
    crc32        u32  over the payload bytes

``attr`` holds the dropout rate for Dropout layers and 0 otherwise.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from os import PathLike

import numpy as np

from .errors import (BadMagicError, ChecksumError, FileFormatError, RoleMismatchError,
                     TruncatedFileError, VersionMismatchError)
from .nn import LAYER_TYPES, Conv2D, Dense, Dropout, Layer, Network

MAGIC = b"SINR"
VERSION = 1

ROLE_FULL = 0
ROLE_INPUT = 1
ROLE_OUTPUT = 2
ROLE_NAMES = {ROLE_FULL: "full", ROLE_INPUT: "input", ROLE_OUTPUT: "output"}

_F64 = np.dtype("<f8")


@dataclass
class Container:
    network: Network
    role: int = ROLE_FULL
    division: int = 0
    intermediate_shape: tuple[int, ...] = ()


def _dims(shape) -> bytes:
    return struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def _encode_layer(layer: Layer, block: int) -> bytes:
    attr = layer.rate if isinstance(layer, Dropout) else 0.0
    params = layer.params()
    out = [struct.pack("<BBdB", layer.tag, block, attr, len(params))]
    for p in params:
        out.append(_dims(p.shape))
        out.append(p.data.astype(_F64, copy=False).tobytes())
    return b"".join(out)


def encode(c: Container) -> bytes:
    net = c.network
    payload = b"".join(_encode_layer(layer, b) for layer, b in zip(net.layers, net.blocks))
    head = (MAGIC + struct.pack("<HBH", VERSION, c.role, c.division)
            + _dims(net.input_shape) + _dims(c.intermediate_shape)
            + struct.pack("<HI", len(net.layers), len(payload)))
    return head + payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.what}: truncated at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def dims(self) -> tuple[int, ...]:
        (n,) = self.unpack("B")
        return tuple(self.unpack(f"{n}I")) if n else ()


def _decode_layer(r: _Reader) -> tuple[Layer, int]:
    tag, block, attr, count = r.unpack("BBdB")
    if tag not in LAYER_TYPES:
        raise FileFormatError(f"{r.what}: unknown layer kind tag {tag}")
    arrays = []
    for _ in range(count):
        shape = r.dims()
        n = int(np.prod(shape)) if shape else 1
        arrays.append(np.frombuffer(r.take(8 * n), dtype=_F64).reshape(shape).astype(np.float64))
    cls = LAYER_TYPES[tag]
    if cls is Dense:
        layer = Dense(*arrays[0].shape)
    elif cls is Conv2D:
        out_ch, in_ch = arrays[0].shape[:2]
        layer = Conv2D(in_ch, out_ch)
    elif cls is Dropout:
        layer = Dropout(attr)
    else:
        layer = cls()
    params = layer.params()
    if len(params) != len(arrays):
        raise FileFormatError(f"{r.what}: {cls.kind} expects {len(params)} tensors, file has {len(arrays)}")
    for p, a in zip(params, arrays):
        if p.shape != a.shape:
            raise FileFormatError(f"{r.what}: {cls.kind} tensor shape {a.shape} inconsistent, expected {p.shape}")
        p.data[...] = a
    return layer, block


def decode(buf: bytes, what: str = "checkpoint") -> Container:
    r = _Reader(buf, what)
    if len(buf) < 4:
        raise TruncatedFileError(f"{what}: truncated at byte {len(buf)}, needed 4")
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{what}: bad magic, expected {MAGIC!r}")
    (version,) = r.unpack("H")
    if version != VERSION:
        raise VersionMismatchError(f"{what}: format version {version}, this reader supports {VERSION}")
    role, division = r.unpack("BH")
    if role not in ROLE_NAMES:
        raise FileFormatError(f"{what}: unknown role tag {role}")
    input_shape = r.dims()
    mid_shape = r.dims()
    n_layers, payload_len = r.unpack("HI")
    payload = r.take(payload_len)
    (crc,) = r.unpack("I")
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{what}: payload CRC32 mismatch")
    pr = _Reader(payload, what)
    layers, blocks = [], []
    for _ in range(n_layers):
        layer, block = _decode_layer(pr)
        layers.append(layer)
        blocks.append(block)
    if pr.pos != len(payload):
        raise FileFormatError(f"{what}: {len(payload) - pr.pos} trailing payload bytes")
    net = Network(layers, blocks, input_shape)
    return Container(net, role, division, mid_shape)


def save(path: str | PathLike, c: Container) -> None:
    with open(path, "wb") as f:
        f.write(encode(c))


def load(path: str | PathLike) -> Container:
    with open(path, "rb") as f:
        return decode(f.read(), what=str(path))


def save_network(path: str | PathLike, net: Network) -> None:
    save(path, Container(net))


def load_network(path: str | PathLike) -> Network:
    c = load(path)
    if c.role != ROLE_FULL:
        raise RoleMismatchError(f"{path}: holds a {ROLE_NAMES[c.role]} sub-model, not a full network")
    return c.network
