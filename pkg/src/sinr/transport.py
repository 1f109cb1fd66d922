"""
UDP transport for the lossy channel.

A session starts with one setup datagram from the device and one ack from
the server; after that, data datagrams flow one way and nothing is ever
resent.  The receiver gives each tensor ``n_packets * slot_time + guard``
seconds and reconstructs from whatever arrived by then.

Setup datagram (little-endian)::

    magic       4s  b"SNR0"
    session_id  u16
    reserved    u16  zero
    perm_seed   u64
    n_elem      u32
    p_scale     f64

Ack datagram::

    magic       4s  b"SNRA"
    session_id  u16
    reserved    u16  zero

Tensor ids on the wire are 16-bit and compared with serial-number
arithmetic, so a session can run past 65 535 tensors.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .channel import (HEADER_SIZE, ChannelConfig, Packet, PacketHeader, Permutation, ReceivedTensor,
                      packetize, reconstruct)
from .errors import ProtocolError, SessionSetupTimeout

log = logging.getLogger(__name__)

SETUP = struct.Struct("<4sHHQId")
SETUP_MAGIC = b"SNR0"
ACK = struct.Struct("<4sHH")
ACK_MAGIC = b"SNRA"
MAX_DATAGRAM = 65507
DEFAULT_GUARD = 0.05


@dataclass(frozen=True)
class SessionSetup:
    session_id: int
    perm_seed: int
    n_elem: int
    p_scale: float

    def pack(self) -> bytes:
        return SETUP.pack(SETUP_MAGIC, self.session_id, 0, self.perm_seed, self.n_elem, self.p_scale)

    @classmethod
    def unpack(cls, buf: bytes) -> "SessionSetup":
        if len(buf) != SETUP.size:
            raise ProtocolError(f"setup datagram must be {SETUP.size} B, got {len(buf)}")
        magic, session_id, _, seed, n_elem, p_scale = SETUP.unpack(buf)
        if magic != SETUP_MAGIC:
            raise ProtocolError(f"bad setup magic {magic!r}")
        return cls(session_id, seed, n_elem, p_scale)


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


class UdpSender:
    """Device side. Sends each tensor as ``ceil(n_elem / s)`` datagrams, once.

    ``pace=True`` spaces datagrams by the configured slot time so a local
    receiver sees the link rate rather than a burst.  Loss can be injected
    before the socket by passing an rng to :meth:`send`.
    """

    def __init__(self, endpoint: tuple[str, int], cfg: ChannelConfig, session: SessionSetup,
                 pace: bool = True, setup_timeout: float = 2.0, setup_retries: int = 5):
        self.endpoint = endpoint
        self.cfg = cfg
        self.session = session
        self.pace = pace
        self.perm = Permutation.from_seed(session.perm_seed, session.n_elem)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._setup_timeout = setup_timeout
        self._setup_retries = setup_retries
        self._next_send = 0.0

    def connect(self) -> None:
        """Send the setup datagram until it is acknowledged."""
        self.sock.settimeout(self._setup_timeout / self._setup_retries)
        deadline = time.monotonic() + self._setup_timeout
        while time.monotonic() < deadline:
            self.sock.sendto(self.session.pack(), self.endpoint)
            try:
                data, _ = self.sock.recvfrom(64)
            except socket.timeout:
                continue
            if len(data) == ACK.size:
                magic, sid, _ = ACK.unpack(data)
                if magic == ACK_MAGIC and sid == self.session.session_id:
                    self._next_send = time.monotonic()
                    return
        raise SessionSetupTimeout(f"no ack from {self.endpoint[0]}:{self.endpoint[1]} "
                                  f"within {self._setup_timeout} s")

    def send(self, y: np.ndarray, tensor_id: int, loss_rng: np.random.Generator | None = None) -> int:
        """Transmit one representation; returns the datagram count (lost ones included)."""
        packets = packetize(y, self.perm, self.cfg, self.session.session_id, tensor_id)
        keep = loss_rng.random(len(packets)) >= self.cfg.p if loss_rng is not None else None
        for k, pkt in enumerate(packets):
            if self.pace:
                now = time.monotonic()
                if self._next_send > now:
                    time.sleep(self._next_send - now)
                self._next_send = max(self._next_send, now) + self.cfg.slot_time
            if keep is None or keep[k]:
                self.sock.sendto(pkt.to_bytes(), self.endpoint)
        return len(packets)

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class UdpReceiver:
    """Server side. Owns the socket and the per-tensor assembly state."""

    bind: tuple[str, int] = ("127.0.0.1", 0)
    cfg: ChannelConfig = field(default_factory=ChannelConfig)
    guard: float = DEFAULT_GUARD

    def __post_init__(self):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 << 20)
        except OSError:
            pass
        self.sock.bind(self.bind)
        self.session: SessionSetup | None = None
        self.perm: Permutation | None = None
        self.next_tensor = 0
        self._pending: dict[int, list[Packet]] = {}

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def accept(self, timeout: float = 5.0) -> SessionSetup:
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise SessionSetupTimeout(f"no session setup within {timeout} s")
            self.sock.settimeout(remaining)
            try:
                data, peer = self.sock.recvfrom(MAX_DATAGRAM)
            except socket.timeout:
                continue
            try:
                setup = SessionSetup.unpack(data)
            except ProtocolError:
                log.debug("ignoring non-setup datagram from %s before session start", peer)
                continue
            self.sock.sendto(ACK.pack(ACK_MAGIC, setup.session_id, 0), peer)
            if self.session is None or self.session.session_id != setup.session_id:
                self.session = setup
                self.perm = Permutation.from_seed(setup.perm_seed, setup.n_elem)
                self.next_tensor = 0
                self._pending.clear()
            return setup

    def deadline(self) -> float:
        assert self.session is not None
        return self.cfg.n_packets(self.session.n_elem) * self.cfg.slot_time + self.guard

    def recv(self, timeout: float | None = None) -> tuple[int, ReceivedTensor]:
        """Assemble the next tensor; never blocks longer than the deadline.

        Returns early once every packet has arrived or a datagram for a later
        tensor shows up (the sender has moved on).  Packets for later tensors
        are kept for the following call.
        """
        if self.session is None:
            raise ProtocolError("recv before a session was accepted")
        s = self.session
        tid = self.next_tensor
        self.next_tensor += 1
        n_pk = self.cfg.n_packets(s.n_elem)
        got = self._pending.pop(tid, [])
        slots = {pkt.header.start_slot for pkt in got}
        moved_on = any(k > tid for k in self._pending)
        end = time.monotonic() + (self.deadline() if timeout is None else timeout)
        while len(slots) < n_pk and not moved_on:
            remaining = end - time.monotonic()
            if remaining <= 0:
                break
            self.sock.settimeout(remaining)
            try:
                data, peer = self.sock.recvfrom(MAX_DATAGRAM)
            except socket.timeout:
                break
            if data[:4] == SETUP_MAGIC:
                # setup retransmitted because our ack was lost
                self.sock.sendto(ACK.pack(ACK_MAGIC, s.session_id, 0), peer)
                continue
            try:
                pkt = Packet.from_bytes(data)
            except ProtocolError as exc:
                log.warning("dropping malformed datagram: %s", exc)
                continue
            h = pkt.header
            ahead = _serial_ahead(h.tensor_id, tid)
            if h.session_id != s.session_id or ahead < 0:
                continue
            if ahead > 0:
                self._pending.setdefault(tid + ahead, []).append(pkt)
                moved_on = True
                continue
            got.append(pkt)
            slots.add(h.start_slot)
        rec = reconstruct(got, self.perm, s.n_elem, s.p_scale, s.session_id, tid, self.cfg.scale)
        return tid, rec

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _serial_ahead(wire_id: int, expected: int) -> int:
    """How far a 16-bit wire tensor id is ahead of ``expected`` (negative = stale)."""
    d = (wire_id - expected) & 0xFFFF
    return d if d < 0x8000 else d - 0x10000


@dataclass
class LoopbackResult:
    values: np.ndarray  # (N, n_elem) reconstructed representations
    received_fraction: np.ndarray  # per tensor
    recv_seconds: np.ndarray  # wall time spent inside each recv call


def run_loopback(y: np.ndarray, cfg: ChannelConfig, rngs=None, session_id: int = 1,
                 guard: float = DEFAULT_GUARD, pace: bool = True) -> LoopbackResult:
    """Send every row of ``y`` through a real UDP socket pair on 127.0.0.1.

    The receiver runs in a background thread.  ``rngs[i]`` drives the loss
    injected on row ``i``, so with the same generators the outcome matches
    the simulated channel unless the OS itself drops a datagram.
    """
    y = np.asarray(y).reshape(len(y), -1)
    n, n_elem = y.shape
    setup = SessionSetup(session_id, cfg.seed, n_elem, cfg.p)
    out = np.zeros((n, n_elem))
    frac = np.zeros(n)
    waits = np.zeros(n)
    errors: list[BaseException] = []
    with UdpReceiver(("127.0.0.1", 0), cfg, guard) as rx:
        def serve():
            try:
                rx.accept(timeout=10.0)
                for i in range(n):
                    t0 = time.monotonic()
                    _, rec = rx.recv()
                    waits[i] = time.monotonic() - t0
                    out[i], frac[i] = rec.values, rec.received_fraction
            except BaseException as exc:  # surfaced in the caller's thread
                errors.append(exc)

        worker = threading.Thread(target=serve, daemon=True)
        worker.start()
        with UdpSender(rx.address, cfg, setup, pace=pace) as tx:
            tx.connect()
            for i in range(n):
                tx.send(y[i], i, None if rngs is None else rngs[i])
        worker.join()
    if errors:
        raise errors[0]
    return LoopbackResult(out, frac, waits)


def udp_send(sender: UdpSender, y: np.ndarray, tensor_id: int,
             loss_rng: np.random.Generator | None = None) -> int:
    return sender.send(y, tensor_id, loss_rng)


def udp_recv(receiver: UdpReceiver, timeout: float | None = None) -> ReceivedTensor:
    return receiver.recv(timeout)[1]


__all__ = ["SessionSetup", "UdpSender", "UdpReceiver", "udp_send", "udp_recv", "parse_endpoint", "run_loopback",
           "HEADER_SIZE", "PacketHeader"]
