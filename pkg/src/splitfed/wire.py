"""Framed binary messages between clients, compute server and federation server.

Frame::

    b"FSP1" | message type u8 | payload length u32 | payload

Everything is little-endian.  Float tensors travel as ``rank u8 | dims u32 *
rank | float32 data``; integer tensors (attention masks, MLM labels) use the
same header with int32 data.  Names are ``u16 length | UTF-8``.
"""
from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np

from .errors import (BadMagic, ConfigError, MalformedPayload, SessionError, Truncated,
                     UnknownMessageType)

MAGIC = b"FSP1"
HEADER = struct.Struct("<4sBI")
HEADER_SIZE = HEADER.size
_F32 = np.dtype("<f4")
_I32 = np.dtype("<i4")


class MsgType(enum.IntEnum):
    ACTIVATION_BATCH = 1
    ACTIVATION_GRAD = 2
    WEIGHTS_UP = 3
    WEIGHTS_DOWN = 4
    CONTROL = 5


class ControlKind(enum.IntEnum):
    ROUND_START = 0
    ROUND_END = 1
    SHUTDOWN = 2


def _same(a, b) -> bool:
    if isinstance(a, np.ndarray):
        return (isinstance(b, np.ndarray) and a.shape == b.shape
                and a.dtype.kind == b.dtype.kind and a.tobytes() == b.tobytes())
    if isinstance(a, dict):
        return (isinstance(b, dict) and list(a) == list(b)
                and all(_same(a[k], b[k]) for k in a))
    return a == b


class _Message:
    """Structural equality that compares arrays by bit pattern."""

    def __eq__(self, other) -> bool:
        if type(self) is not type(other):
            return NotImplemented
        return all(_same(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))

    __hash__ = None


@dataclass(eq=False)
class ActivationBatch(_Message):
    round: int
    client_id: int
    z: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float32)
        self.attention_mask = np.asarray(self.attention_mask, dtype=np.int32)
        self.labels = np.asarray(self.labels, dtype=np.int32)


@dataclass(eq=False)
class ActivationGrad(_Message):
    round: int
    client_id: int
    dz: np.ndarray

    def __post_init__(self):
        self.dz = np.asarray(self.dz, dtype=np.float32)


@dataclass(eq=False)
class WeightsUp(_Message):
    round: int
    client_id: int
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    sample_count: int = 0

    def __post_init__(self):
        self.weights = {k: np.asarray(v, dtype=np.float32) for k, v in self.weights.items()}


@dataclass(eq=False)
class WeightsDown(_Message):
    round: int
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.weights = {k: np.asarray(v, dtype=np.float32) for k, v in self.weights.items()}


@dataclass(eq=False)
class Control(_Message):
    kind: ControlKind
    round: int


WireMessage = ActivationBatch | ActivationGrad | WeightsUp | WeightsDown | Control

_TYPE_OF = {
    ActivationBatch: MsgType.ACTIVATION_BATCH,
    ActivationGrad: MsgType.ACTIVATION_GRAD,
    WeightsUp: MsgType.WEIGHTS_UP,
    WeightsDown: MsgType.WEIGHTS_DOWN,
    Control: MsgType.CONTROL,
}


# ------------------------------------------------------------------ encode


def _tensor(arr: np.ndarray, dtype: np.dtype) -> bytes:
    arr = np.asarray(arr)
    return (struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
            + np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _named(weights: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(weights))]
    for name, arr in weights.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(_tensor(arr, _F32))
    return b"".join(parts)


def _payload(msg: WireMessage) -> bytes:
    if isinstance(msg, ActivationBatch):
        return (struct.pack("<II", msg.round, msg.client_id) + _tensor(msg.z, _F32)
                + _tensor(msg.attention_mask, _I32) + _tensor(msg.labels, _I32))
    if isinstance(msg, ActivationGrad):
        return struct.pack("<II", msg.round, msg.client_id) + _tensor(msg.dz, _F32)
    if isinstance(msg, WeightsUp):
        return (struct.pack("<IIQ", msg.round, msg.client_id, msg.sample_count)
                + _named(msg.weights))
    if isinstance(msg, WeightsDown):
        return struct.pack("<I", msg.round) + _named(msg.weights)
    if isinstance(msg, Control):
        return struct.pack("<BI", int(msg.kind), msg.round)
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def encode_frame(msg: WireMessage) -> bytes:
    payload = _payload(msg)
    return HEADER.pack(MAGIC, _TYPE_OF[type(msg)], len(payload)) + payload


# ------------------------------------------------------------------ decode


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise MalformedPayload(
                f"payload ends early: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def tensor(self, dtype: np.dtype) -> np.ndarray:
        (rank,) = self.unpack("<B")
        dims = self.unpack(f"<{rank}I")
        n = 1
        for d in dims:
            n *= d
        remaining = len(self.buf) - self.pos
        if n * dtype.itemsize > remaining:
            raise MalformedPayload(f"tensor of shape {dims} does not fit in {remaining} bytes")
        raw = self.take(n * dtype.itemsize)
        native = np.float32 if dtype.kind == "f" else np.int32
        try:
            return np.frombuffer(raw, dtype=dtype).reshape(dims).astype(native)
        except ValueError as exc:
            raise MalformedPayload(f"tensor of shape {dims}: {exc}") from None

    def name(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedPayload("tensor name is not valid UTF-8") from None

    def named(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = self.name()
            if name in out:
                raise MalformedPayload(f"duplicate tensor name {name!r}")
            out[name] = self.tensor(_F32)
        return out

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise MalformedPayload(f"{len(self.buf) - self.pos} unread bytes after message body")


def decode_header(header: bytes) -> tuple[MsgType, int]:
    if len(header) < HEADER_SIZE:
        if not MAGIC.startswith(bytes(header[:4])):
            raise BadMagic(f"bad magic {bytes(header[:4])!r}")
        raise Truncated(f"frame header needs {HEADER_SIZE} bytes, got {len(header)}")
    magic, mtype, length = HEADER.unpack(header[:HEADER_SIZE])
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    try:
        return MsgType(mtype), length
    except ValueError:
        raise UnknownMessageType(f"unknown message type {mtype}") from None


def decode_payload(mtype: MsgType, payload: bytes) -> WireMessage:
    r = _Reader(payload)
    if mtype is MsgType.ACTIVATION_BATCH:
        rnd, cid = r.unpack("<II")
        z, mask, labels = r.tensor(_F32), r.tensor(_I32), r.tensor(_I32)
        if mask.shape != z.shape[:2] or labels.shape != mask.shape:
            raise MalformedPayload(
                f"activation batch shapes disagree: z {z.shape}, mask {mask.shape}, labels {labels.shape}")
        msg: WireMessage = ActivationBatch(rnd, cid, z, mask, labels)
    elif mtype is MsgType.ACTIVATION_GRAD:
        rnd, cid = r.unpack("<II")
        msg = ActivationGrad(rnd, cid, r.tensor(_F32))
    elif mtype is MsgType.WEIGHTS_UP:
        rnd, cid, n = r.unpack("<IIQ")
        msg = WeightsUp(rnd, cid, r.named(), n)
    elif mtype is MsgType.WEIGHTS_DOWN:
        (rnd,) = r.unpack("<I")
        msg = WeightsDown(rnd, r.named())
    else:
        kind, rnd = r.unpack("<BI")
        try:
            msg = Control(ControlKind(kind), rnd)
        except ValueError:
            raise MalformedPayload(f"unknown control kind {kind}") from None
    r.done()
    return msg


def decode_frame(buf: bytes) -> WireMessage:
    """Decode exactly one frame; anything malformed raises a ProtocolError."""
    mtype, length = decode_header(buf)
    body = memoryview(buf)[HEADER_SIZE:]
    if len(body) < length:
        raise Truncated(f"payload declares {length} bytes but only {len(body)} present")
    if len(body) > length:
        raise MalformedPayload(f"{len(body) - length} bytes after the declared payload")
    return decode_payload(mtype, body)


# --------------------------------------------------------------- transports


class Channel:
    """One end of an ordered, reliable message pipe.

    ``recv`` raises :class:`SessionError` once the peer has gone away.
    """

    def send(self, msg: WireMessage) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> WireMessage:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()


class InProcChannel(Channel):
    """Queue-backed endpoint.  Frames still go through the byte codec."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False
        self.bytes_sent = 0

    def send(self, msg: WireMessage) -> None:
        if self._closed:
            raise SessionError("send on a closed channel")
        frame = encode_frame(msg)
        self.bytes_sent += len(frame)
        self._outbox.put(frame)

    def send_raw(self, frame: bytes) -> None:
        self._outbox.put(bytes(frame))

    def recv(self, timeout: float | None = None) -> WireMessage:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise SessionError("timed out waiting for peer") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise SessionError("peer closed the channel")
        return decode_frame(item)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


class SocketChannel(Channel):
    """Stream-socket endpoint.

    A reader thread drains the socket into a queue so a sender never blocks
    on a peer that is busy sending too; delivery order is unchanged.
    """

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._inbox: queue.Queue = queue.Queue()
        self._closed = False
        self._lock = threading.Lock()
        self.bytes_sent = 0
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            chunk = self._sock.recv(min(n, 1 << 20))
            if not chunk:
                raise EOFError
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def _read_loop(self) -> None:
        try:
            while True:
                header = self._read_exact(HEADER_SIZE)
                mtype, length = decode_header(header)
                self._inbox.put((mtype, self._read_exact(length)))
        except (EOFError, OSError):
            self._inbox.put(SessionError("peer closed the connection"))
        except Exception as exc:  # protocol errors surface on recv
            self._inbox.put(exc)

    def send(self, msg: WireMessage) -> None:
        frame = encode_frame(msg)
        try:
            with self._lock:
                self._sock.sendall(frame)
        except OSError as exc:
            raise SessionError(f"send failed: {exc}") from None
        self.bytes_sent += len(frame)

    def recv(self, timeout: float | None = None) -> WireMessage:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise SessionError("timed out waiting for peer") from None
        if isinstance(item, Exception):
            self._inbox.put(item)
            raise item
        return decode_payload(*item)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def parse_listen(listen: str) -> tuple[str, int]:
    """``host:port`` with port 0 meaning any free port."""
    host, _, port = listen.rpartition(":")
    try:
        num = int(port or 0)
    except ValueError:
        raise ConfigError(f"bad listen address {listen!r}; expected host:port") from None
    if not 0 <= num < 65536:
        raise ConfigError(f"port {num} out of range in {listen!r}")
    return host or "127.0.0.1", num


def channel_pair(transport: str = "inproc", listen: str = "127.0.0.1:0") -> tuple[Channel, Channel]:
    """Connected (a, b) endpoints; what a sends b receives, in order."""
    if transport == "inproc":
        q1: queue.Queue = queue.Queue()
        q2: queue.Queue = queue.Queue()
        return InProcChannel(q1, q2), InProcChannel(q2, q1)
    if transport == "socket":
        with socket.create_server(parse_listen(listen)) as server:
            a = socket.create_connection(server.getsockname()[:2])
            b, _ = server.accept()
        for s in (a, b):
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketChannel(a), SocketChannel(b)
    raise ConfigError(f"unknown transport {transport!r}; expected 'inproc' or 'socket'")
