"""Wire messages, frame codec and message delivery.

Frame layout, all integers big-endian::

    magic "PPDO" | version u8 (=1) | msg_type u8 | sender u16 | receiver u16
    | iteration u32 | payload_length u32 | payload

Payloads: a big integer is a u32 byte count followed by its minimal
big-endian magnitude (no sign, no leading zero bytes, zero is empty); a vector is a u16 element count followed by its big integers.
``KeyAnnounce`` carries the modulus ``n`` (``g = n + 1`` is implied).
"""
from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass

log = logging.getLogger(__name__)

MAGIC = b"PPDO"
VERSION = 1
HEADER = struct.Struct(">4sBBHHII")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 2**32 - 1
DEFAULT_PORT_BASE = 7100

KEY_ANNOUNCE = 1
ENCRYPTED_STATE = 2
WEIGHTED_DIFF_REPLY = 3


class TransportError(RuntimeError):
    pass


class FrameError(TransportError, ValueError):
    pass


class RoundTimeoutError(TransportError):
    pass


@dataclass(frozen=True)
class KeyAnnounce:
    sender: int
    receiver: int
    iteration: int
    n: int

    msg_type = KEY_ANNOUNCE


@dataclass(frozen=True)
class EncryptedState:
    """Per-dimension ciphertexts of ``-x_sender`` under the sender's key."""

    sender: int
    receiver: int
    iteration: int
    ciphertexts: tuple

    msg_type = ENCRYPTED_STATE


@dataclass(frozen=True)
class WeightedDiffReply:
    """Per-dimension ciphertexts of ``b_{sender->receiver} (x_sender - x_receiver)``,
    under the receiver's key."""

    sender: int
    receiver: int
    iteration: int
    ciphertexts: tuple

    msg_type = WEIGHTED_DIFF_REPLY


MESSAGE_TYPES = {cls.msg_type: cls for cls in (KeyAnnounce, EncryptedState, WeightedDiffReply)}


@dataclass(frozen=True)
class Frame:
    msg_type: int
    sender: int
    receiver: int
    iteration: int
    payload: bytes


# --------------------------------------------------------------------------
# encoding


def encode_bigint(v: int) -> bytes:
    if v < 0:
        raise FrameError("big integers on the wire are unsigned")
    body = v.to_bytes((v.bit_length() + 7) // 8, "big")
    if len(body) > MAX_PAYLOAD:
        raise FrameError("integer too large to frame")
    return struct.pack(">I", len(body)) + body


def encode_vector(values) -> bytes:
    values = list(values)
    if len(values) > 0xFFFF:
        raise FrameError(f"vector of {len(values)} elements exceeds the u16 count")
    return struct.pack(">H", len(values)) + b"".join(encode_bigint(v) for v in values)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, k: int) -> bytes:
        if self.pos + k > len(self.data):
            raise FrameError("payload truncated")
        chunk = self.data[self.pos:self.pos + k]
        self.pos += k
        return chunk

    def bigint(self) -> int:
        (length,) = struct.unpack(">I", self.take(4))
        body = self.take(length)
        if body[:1] == b"\x00":
            # only the minimal encoding is valid, so parsing is canonical
            raise FrameError("big integer has a leading zero byte")
        return int.from_bytes(body, "big")

    def vector(self) -> tuple:
        (count,) = struct.unpack(">H", self.take(2))
        return tuple(self.bigint() for _ in range(count))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FrameError(f"{len(self.data) - self.pos} trailing payload bytes")


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise FrameError("payload exceeds 2^32 - 1 bytes")
    for name, value, bits in (("sender", frame.sender, 16), ("receiver", frame.receiver, 16),
                              ("iteration", frame.iteration, 32)):
        if not 0 <= value < 1 << bits:
            raise FrameError(f"{name} {value} does not fit u{bits}")
    return HEADER.pack(MAGIC, VERSION, frame.msg_type, frame.sender, frame.receiver,
                       frame.iteration, len(frame.payload)) + frame.payload


def parse_header(data: bytes) -> tuple[int, int, int, int, int]:
    if len(data) < HEADER_SIZE:
        raise FrameError("frame shorter than header")
    magic, version, msg_type, sender, receiver, iteration, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported version {version}")
    if msg_type not in MESSAGE_TYPES:
        raise FrameError(f"unknown message type {msg_type}")
    return msg_type, sender, receiver, iteration, length


def decode_frame(data: bytes) -> Frame:
    msg_type, sender, receiver, iteration, length = parse_header(data)
    if len(data) != HEADER_SIZE + length:
        raise FrameError(f"payload length {length} disagrees with frame size {len(data)}")
    return Frame(msg_type, sender, receiver, iteration, bytes(data[HEADER_SIZE:]))


def serialize(msg) -> bytes:
    if isinstance(msg, KeyAnnounce):
        payload = encode_bigint(msg.n)
    elif isinstance(msg, (EncryptedState, WeightedDiffReply)):
        payload = encode_vector(msg.ciphertexts)
    else:
        raise FrameError(f"not a protocol message: {type(msg).__name__}")
    return encode_frame(Frame(msg.msg_type, msg.sender, msg.receiver, msg.iteration, payload))


def deserialize(data: bytes):
    frame = decode_frame(data)
    r = _Reader(frame.payload)
    if frame.msg_type == KEY_ANNOUNCE:
        body = r.bigint()
    else:
        body = r.vector()
    r.done()
    return MESSAGE_TYPES[frame.msg_type](frame.sender, frame.receiver, frame.iteration, body)


# --------------------------------------------------------------------------
# delivery


@dataclass(frozen=True)
class Endpoint:
    agent: int
    host: str = "127.0.0.1"
    port: int | None = None


class _Mailboxes:
    """Per-recipient FIFO inboxes behind one condition variable."""

    def __init__(self):
        self._cond = threading.Condition()
        self._boxes: dict[int, deque] = {}

    def add(self, agent: int) -> None:
        with self._cond:
            self._boxes.setdefault(agent, deque())

    def known(self, agent: int) -> bool:
        return agent in self._boxes

    def put(self, agent: int, data: bytes) -> None:
        with self._cond:
            if agent not in self._boxes:
                raise TransportError(f"unregistered endpoint {agent}")
            self._boxes[agent].append(data)
            self._cond.notify_all()

    def drain(self, agent: int) -> list[bytes]:
        with self._cond:
            box = self._boxes[agent]
            out = list(box)
            box.clear()
            return out

    def take(self, agent: int, msg_type: int, count: int, timeout: float | None) -> list[bytes]:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                box = self._boxes[agent]
                hits = [f for f in box if f[5] == msg_type]
                if len(hits) >= count:
                    chosen = hits[:count]
                    ids = {id(f) for f in chosen}
                    self._boxes[agent] = deque(f for f in box if id(f) not in ids)
                    return chosen
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise RoundTimeoutError(
                        f"agent {agent}: expected {count} frames of type {msg_type}, got {len(hits)}")
                self._cond.wait(remaining)


class SimTransport:
    """Deterministic in-process delivery: no loss, FIFO per recipient.

    Every delivered frame is also appended to ``capture`` as
    ``(sender, receiver, bytes)``; that is what an eavesdropper on every
    link would see.
    """

    def __init__(self):
        self._mail = _Mailboxes()
        self.capture: list[tuple[int, int, bytes]] = []

    def register(self, endpoint: Endpoint) -> None:
        self._mail.add(endpoint.agent)

    def deliver(self, src: int, dst: int, frame: bytes) -> bool:
        if not self._mail.known(src):
            raise TransportError(f"unregistered endpoint {src}")
        self._mail.put(dst, bytes(frame))
        self.capture.append((src, dst, bytes(frame)))
        return True

    def poll(self, agent: int) -> list[bytes]:
        return self._mail.drain(agent)

    def receive(self, agent: int, msg_type: int, count: int, timeout: float | None = 0.0) -> list[bytes]:
        return self._mail.take(agent, msg_type, count, timeout)

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, k: int) -> bytes:
    buf = bytearray()
    while len(buf) < k:
        chunk = sock.recv(k - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    header = _recv_exact(sock, HEADER_SIZE)
    *_, length = parse_header(header)
    return header + _recv_exact(sock, length)


class TcpTransport:
    """Framed TCP delivery, one persistent connection per directed pair.

    Endpoints default to ``host:port_base + agent``; a port of 0 binds an
    ephemeral port (resolved after :meth:`register`). Sends are retried
    ``retries`` times with exponential backoff before giving up.
    """

    def __init__(self, port_base: int = DEFAULT_PORT_BASE, host: str = "127.0.0.1",
                 retries: int = 3, backoff: float = 0.05, timeout: float = 30.0):
        self.port_base = port_base
        self.host = host
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.endpoints: dict[int, Endpoint] = {}
        self.capture: list[tuple[int, int, bytes]] = []
        self._mail = _Mailboxes()
        self._servers: list[socket.socket] = []
        self._conns: dict[tuple[int, int], socket.socket] = {}
        self._readers: list[socket.socket] = []
        self._lock = threading.Lock()
        self._closed = threading.Event()

    def register(self, endpoint: Endpoint) -> None:
        port = endpoint.port if endpoint.port is not None else self.port_base + endpoint.agent
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((endpoint.host, port))
        srv.listen()
        self._servers.append(srv)
        self.endpoints[endpoint.agent] = Endpoint(endpoint.agent, endpoint.host, srv.getsockname()[1])
        self._mail.add(endpoint.agent)
        threading.Thread(target=self._accept_loop, args=(srv, endpoint.agent), daemon=True).start()

    def _accept_loop(self, srv: socket.socket, agent: int) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            with self._lock:
                self._readers.append(conn)
            threading.Thread(target=self._read_loop, args=(conn, agent), daemon=True).start()

    def _read_loop(self, conn: socket.socket, agent: int) -> None:
        while not self._closed.is_set():
            try:
                data = read_frame(conn)
            except (OSError, ConnectionError):
                return
            except FrameError as exc:
                log.error("agent %d dropped a malformed frame: %s", agent, exc)
                return
            self._mail.put(agent, data)

    def _connection(self, src: int, dst: int) -> socket.socket:
        key = (src, dst)
        with self._lock:
            conn = self._conns.get(key)
        if conn is None:
            ep = self.endpoints.get(dst)
            if ep is None:
                raise TransportError(f"unregistered endpoint {dst}")
            conn = socket.create_connection((ep.host, ep.port), timeout=self.timeout)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._conns[key] = conn
        return conn

    def deliver(self, src: int, dst: int, frame: bytes) -> bool:
        if dst not in self.endpoints:
            raise TransportError(f"unregistered endpoint {dst}")
        last = None
        for attempt in range(self.retries + 1):
            try:
                self._connection(src, dst).sendall(frame)
                self.capture.append((src, dst, bytes(frame)))
                return True
            except OSError as exc:
                last = exc
                with self._lock:
                    stale = self._conns.pop((src, dst), None)
                if stale is not None:
                    stale.close()
                if attempt < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise TransportError(f"delivery {src}->{dst} failed after {self.retries} retries: {last}")

    def poll(self, agent: int) -> list[bytes]:
        return self._mail.drain(agent)

    def receive(self, agent: int, msg_type: int, count: int, timeout: float | None = None) -> list[bytes]:
        return self._mail.take(agent, msg_type, count, self.timeout if timeout is None else timeout)

    def close(self) -> None:
        self._closed.set()
        with self._lock:
            socks = list(self._conns.values()) + self._readers + self._servers
            self._conns.clear()
        for s in socks:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
