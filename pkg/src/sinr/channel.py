"""
Lossy transport for intermediate representations.

The device permutes the flattened representation with a session-wide
permutation, cuts the permuted vector into fixed-size packets and sends
each exactly once.  Every packet is lost independently with probability
``p``.  The server writes whatever arrived back to the original positions,
leaves the rest at zero and multiplies by ``1 / (1 - p)``, which makes the
whole channel behave like inverted dropout at rate ``p``.

Data datagram layout (little-endian)::

    magic          4s   b"SNR1"
    session_id     u16
    tensor_id      u16   wraps modulo 2**16
    start_slot     u32   first permuted slot carried
    element_count  u16
    flags          u16   bit 0 set on the final packet of a tensor
    payload        element_count x f32
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, IntegrityError, ProtocolError
from .model import SubModelPair, division_dropout, split_at
from .nn import Dropout, Network, check_rate

HEADER = struct.Struct("<4sHHIHH")
HEADER_SIZE = HEADER.size  # 16
DATA_MAGIC = b"SNR1"
FLAG_LAST = 0x0001
ELEMENT_BYTES = 4
_WIRE = np.dtype("<f4")


@dataclass
class ChannelConfig:
    p: float = 0.0
    packet_size: int = 500
    throughput: float = 9.0e6
    seed: int = 0
    mode: str = "sim"
    scale: str = "nominal"

    def __post_init__(self):
        self.p = check_rate(self.p, "packet loss rate")
        if self.mode not in ("sim", "udp"):
            raise ConfigError(f"mode must be 'sim' or 'udp', got {self.mode!r}")
        if self.scale not in ("nominal", "empirical"):
            raise ConfigError(f"scale must be 'nominal' or 'empirical', got {self.scale!r}")
        if self.throughput <= 0:
            raise ConfigError(f"throughput must be positive, got {self.throughput}")
        if self.elements_per_packet < 1:
            raise ConfigError(f"packet_size {self.packet_size} B leaves no room after the {HEADER_SIZE} B header")

    @property
    def elements_per_packet(self) -> int:
        return (self.packet_size - HEADER_SIZE) // ELEMENT_BYTES

    @property
    def slot_time(self) -> float:
        """Seconds to put one packet on the link: packet bits over throughput."""
        return self.packet_size * 8 / self.throughput

    def n_packets(self, n_elem: int) -> int:
        return math.ceil(n_elem / self.elements_per_packet)


@dataclass(frozen=True)
class Permutation:
    """Slot ``j`` of the packet stream carries element ``order[j]``."""

    seed: int
    order: np.ndarray

    @classmethod
    def from_seed(cls, seed: int, n_elem: int) -> "Permutation":
        return cls(int(seed), np.random.default_rng(seed).permutation(n_elem))

    @classmethod
    def identity(cls, n_elem: int) -> "Permutation":
        return cls(-1, np.arange(n_elem))

    def __len__(self) -> int:
        return len(self.order)


@dataclass(frozen=True)
class PacketHeader:
    session_id: int
    tensor_id: int
    start_slot: int
    element_count: int
    flags: int = 0

    def __post_init__(self):
        for name, bits in (("session_id", 16), ("tensor_id", 16), ("start_slot", 32),
                           ("element_count", 16), ("flags", 16)):
            value = getattr(self, name)
            if not 0 <= value < 1 << bits:
                raise ProtocolError(f"{name}={value} does not fit in u{bits}")

    def pack(self) -> bytes:
        return HEADER.pack(DATA_MAGIC, self.session_id, self.tensor_id,
                           self.start_slot, self.element_count, self.flags)

    @classmethod
    def unpack(cls, buf: bytes) -> "PacketHeader":
        if len(buf) < HEADER_SIZE:
            raise ProtocolError(f"datagram of {len(buf)} bytes is shorter than the {HEADER_SIZE} B header")
        magic, *fields = HEADER.unpack_from(buf)
        if magic != DATA_MAGIC:
            raise ProtocolError(f"bad data magic {magic!r}")
        return cls(*fields)


@dataclass(frozen=True)
class Packet:
    header: PacketHeader
    payload: np.ndarray  # float32

    def to_bytes(self) -> bytes:
        return self.header.pack() + self.payload.astype(_WIRE, copy=False).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Packet":
        h = PacketHeader.unpack(buf)
        body = len(buf) - HEADER_SIZE
        if body != ELEMENT_BYTES * h.element_count:
            raise ProtocolError(f"payload is {body} B, header announces {h.element_count} elements")
        return cls(h, np.frombuffer(buf, dtype=_WIRE, offset=HEADER_SIZE).copy())


@dataclass
class ReceivedTensor:
    values: np.ndarray
    mask: np.ndarray
    scale: float
    packets: int = 0

    @property
    def received_fraction(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


def mask_channel(x: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Zero each element independently with probability ``p`` (no rescaling)."""
    p = check_rate(p, "packet loss rate")
    x = np.asarray(x)
    if p == 0.0:
        return x.copy()
    return np.where(rng.random(x.shape) >= p, x, 0.0).astype(x.dtype, copy=False)


def packetize(y: np.ndarray, perm: Permutation, cfg: ChannelConfig,
              session_id: int = 0, tensor_id: int = 0) -> list[Packet]:
    y = np.asarray(y).reshape(-1)
    if y.size < 1:
        raise ConfigError("cannot packetize an empty representation")
    if len(perm) != y.size:
        raise ConfigError(f"permutation covers {len(perm)} elements, representation has {y.size}")
    s = cfg.elements_per_packet
    permuted = y[perm.order].astype(_WIRE)
    packets = []
    for start in range(0, y.size, s):
        chunk = permuted[start:start + s]
        flags = FLAG_LAST if start + s >= y.size else 0
        packets.append(Packet(PacketHeader(session_id, tensor_id & 0xFFFF, start, len(chunk), flags), chunk))
    return packets


def drop_packets(packets: Sequence[Packet], p: float, rng: np.random.Generator) -> list[Packet]:
    """Keep each packet independently with probability ``1 - p``; order is preserved."""
    p = check_rate(p, "packet loss rate")
    keep = rng.random(len(packets)) >= p
    return [pkt for pkt, k in zip(packets, keep) if k]


def reconstruct(packets: Iterable[Packet], perm: Permutation, n_elem: int, p_scale: float,
                session_id: int | None = None, tensor_id: int | None = None,
                scale_mode: str = "nominal") -> ReceivedTensor:
    """Place received elements at their original positions and rescale.

    With ``scale_mode="nominal"`` the factor is ``1 / (1 - p_scale)``; with
    ``"empirical"`` it is ``n_elem / received_elements``.  Duplicate packets
    are ignored; a packet that disagrees with an earlier copy of the same
    slots raises :class:`IntegrityError`.
    """
    p_scale = check_rate(p_scale, "p_scale")
    if len(perm) != n_elem:
        raise ConfigError(f"permutation covers {len(perm)} elements, expected {n_elem}")
    slots = np.zeros(n_elem, dtype=np.float32)
    filled = np.zeros(n_elem, dtype=bool)
    seen: dict[int, Packet] = {}
    for pkt in packets:
        h = pkt.header
        if session_id is not None and h.session_id != session_id:
            raise ProtocolError(f"packet from session {h.session_id}, expected {session_id}")
        if tensor_id is not None and h.tensor_id != tensor_id & 0xFFFF:
            raise ProtocolError(f"packet for tensor {h.tensor_id}, expected {tensor_id}")
        stop = h.start_slot + h.element_count
        if stop > n_elem or h.element_count != len(pkt.payload):
            raise ProtocolError(f"packet slots [{h.start_slot}, {stop}) exceed the {n_elem}-element tensor")
        prev = seen.get(h.start_slot)
        if prev is not None:
            if prev.header.element_count != h.element_count or not np.array_equal(
                    prev.payload.view(np.uint32), pkt.payload.view(np.uint32)):
                raise IntegrityError(f"conflicting payloads for slot {h.start_slot}")
            continue
        region = slice(h.start_slot, stop)
        if filled[region].any():
            if not np.array_equal(slots[region][filled[region]].view(np.uint32),
                                  pkt.payload[filled[region]].astype(np.float32).view(np.uint32)):
                raise IntegrityError(f"packet at slot {h.start_slot} overlaps received data with different values")
        seen[h.start_slot] = pkt
        slots[region] = pkt.payload
        filled[region] = True

    received = int(filled.sum())
    if scale_mode == "nominal":
        scale = 1.0 / (1.0 - p_scale)
    elif scale_mode == "empirical":
        scale = n_elem / received if received else 1.0
    else:
        raise ConfigError(f"unknown scale mode {scale_mode!r}")
    values = np.zeros(n_elem, dtype=np.float64)
    mask = np.zeros(n_elem, dtype=bool)
    values[perm.order] = slots.astype(np.float64) * scale
    mask[perm.order] = filled
    return ReceivedTensor(values, mask, scale, len(seen))


def transmit(y: np.ndarray, perm: Permutation, cfg: ChannelConfig, rng: np.random.Generator,
             tensor_id: int = 0) -> ReceivedTensor:
    """Simulated end-to-end pass: packetize, drop, reconstruct."""
    n = int(np.asarray(y).size)
    packets = drop_packets(packetize(y, perm, cfg, tensor_id=tensor_id), cfg.p, rng)
    return reconstruct(packets, perm, n, cfg.p, scale_mode=cfg.scale)


def transmit_batch(y: np.ndarray, perm: Permutation, cfg: ChannelConfig,
                   rngs: Sequence[np.random.Generator], return_fraction: bool = False):
    """Vectorised :func:`transmit` over rows of ``y`` (one rng per row).

    Each rng is consumed exactly as :func:`drop_packets` would consume it,
    so row ``i`` matches ``transmit(y[i], perm, cfg, rngs[i])``.  With
    ``return_fraction`` the per-row share of received elements comes back too.
    """
    y = np.asarray(y).reshape(len(rngs), -1)
    n_elem = y.shape[1]
    n_pk = cfg.n_packets(n_elem)
    keep = np.stack([rng.random(n_pk) >= cfg.p for rng in rngs])
    slot_packet = np.arange(n_elem) // cfg.elements_per_packet
    slot_keep = keep[:, slot_packet]
    wire = y[:, perm.order].astype(_WIRE).astype(np.float64)
    if cfg.scale == "nominal":
        scale = np.full((len(rngs), 1), 1.0 / (1.0 - cfg.p))
    else:
        got = slot_keep.sum(axis=1, keepdims=True)
        scale = np.where(got > 0, n_elem / np.maximum(got, 1), 1.0)
    out = np.zeros_like(wire)
    out[:, perm.order] = np.where(slot_keep, wire, 0.0) * scale
    if return_fraction:
        return out, slot_keep.mean(axis=1)
    return out


def retransmit_baseline(packets: Sequence[Packet], p: float,
                        rng: np.random.Generator) -> tuple[list[Packet], np.ndarray]:
    """Stop-and-wait: resend each packet until it gets through.

    Returns every packet plus the attempt count per packet, which is
    geometric with mean ``1 / (1 - p)``.  Total latency is
    ``attempts.sum() * slot_time``.
    """
    p = check_rate(p, "packet loss rate")
    attempts = rng.geometric(1.0 - p, size=len(packets)) if p > 0 else np.ones(len(packets), dtype=np.int64)
    return list(packets), attempts.astype(np.int64)


def channel_as_dropout(model: Network | SubModelPair, p: float, block: int | None = None) -> Network:
    """Eval pipeline where packet loss is emulated by the division dropout.

    The dropout at the division point is forced on at rate ``p`` (with the
    usual ``1 / (1 - p)`` scaling) and every other dropout stays the
    identity.  Call the result with ``Mode.EVAL`` and an rng.
    """
    p = check_rate(p, "packet loss rate")
    if isinstance(model, SubModelPair):
        if block is not None and block != model.division:
            raise ConfigError(f"pair is split at block {model.division}, not {block}")
        pair = model
    else:
        if block is None:
            raise ConfigError("a division block is required when passing a full network")
        division_dropout(model, block)
        pair = split_at(model, block)
    head, tail = pair.input_sub.network, pair.output_sub.network
    lossy = Dropout(p, forced=True)
    return Network(head.layers + [lossy] + tail.layers,
                   head.blocks + [pair.division] + tail.blocks,
                   head.input_shape)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sample channel stream derived from (run seed, sample index)."""
    return np.random.default_rng([int(seed), int(index)])


__all__ = [
    "ChannelConfig", "Permutation", "PacketHeader", "Packet", "ReceivedTensor",
    "mask_channel", "packetize", "drop_packets", "reconstruct", "transmit", "transmit_batch",
    "retransmit_baseline", "channel_as_dropout", "sample_rng", "HEADER_SIZE", "FLAG_LAST",
]
