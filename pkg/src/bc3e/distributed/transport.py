"""Message channels: an in-process queue pair and a TCP stream with framing.

Both expose ``send(msg)``, ``recv(timeout)`` and ``close()``. A channel may
record every payload it sends or receives into a :class:`Transcript`.
"""

import json
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional

from ..errors import TransportTimeout
from .messages import PROTOCOL_VERSION, FrameDecoder, Message, decode_payload, encode_payload, frame

_CLOSED = object()


@dataclass
class TranscriptEntry:
    offset: int
    sender: str
    receiver: str
    payload: bytes

    def to_json(self):
        return {"offset": self.offset, "sender": self.sender, "receiver": self.receiver,
                "payload": self.payload.decode("utf-8", errors="replace")}


@dataclass
class Transcript:
    """Ordered record of every payload that crossed a recorded channel."""

    entries: List[TranscriptEntry] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record(self, sender: str, receiver: str, payload: bytes):
        with self._lock:
            self.entries.append(TranscriptEntry(len(self.entries), sender, receiver, bytes(payload)))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "Transcript":
        t = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    t.entries.append(TranscriptEntry(int(obj["offset"]), obj["sender"], obj["receiver"],
                                                     obj["payload"].encode("utf-8")))
        return t

    def __len__(self):
        return len(self.entries)


class InProcessChannel:
    """One end of a queue pair.

    With ``serialize`` every message goes through the wire encoding, which
    also checks the protocol version exactly as the socket transport does.
    """

    def __init__(self, inbox, outbox, name, peer, serialize=True, transcript=None,
                 version=PROTOCOL_VERSION):
        self._inbox = inbox
        self._outbox = outbox
        self.name = name
        self.peer = peer
        self.serialize = serialize or transcript is not None
        self.transcript = transcript
        self.version = version

    def send(self, msg: Message):
        if self.serialize:
            payload = encode_payload(Message(msg.type, msg.round, msg.body, self.version))
            if self.transcript is not None:
                self.transcript.record(self.name, self.peer, payload)
            self._outbox.put(payload)
        else:
            self._outbox.put(msg)

    def recv(self, timeout: Optional[float] = None) -> Message:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"{self.name}: nothing from {self.peer} within {timeout}s") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise TransportTimeout(f"{self.name}: {self.peer} closed the channel")
        if isinstance(item, Message):
            return item
        return decode_payload(item, self.version)

    def close(self):
        # wake the peer and any reader blocked on our own inbox
        self._outbox.put(_CLOSED)
        self._inbox.put(_CLOSED)


def channel_pair(a="aggregator", b="site", serialize=True, transcript=None, versions=(PROTOCOL_VERSION, PROTOCOL_VERSION)):
    q1, q2 = queue.Queue(), queue.Queue()
    return (InProcessChannel(q1, q2, a, b, serialize, transcript, versions[0]),
            InProcessChannel(q2, q1, b, a, serialize, transcript, versions[1]))


class SocketChannel:
    def __init__(self, sock: socket.socket, name="local", peer="remote", transcript=None,
                 version=PROTOCOL_VERSION):
        self.sock = sock
        self.name = name
        self.peer = peer
        self.transcript = transcript
        self.version = version
        self._decoder = FrameDecoder()
        self._ready: List[bytes] = []
        self._send_lock = threading.Lock()

    def send(self, msg: Message):
        payload = encode_payload(Message(msg.type, msg.round, msg.body, self.version))
        if self.transcript is not None:
            self.transcript.record(self.name, self.peer, payload)
        with self._send_lock:
            try:
                self.sock.sendall(frame(payload))
            except OSError as exc:
                raise TransportTimeout(f"{self.name}: send to {self.peer} failed: {exc}") from None

    def recv(self, timeout: Optional[float] = None) -> Message:
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self._ready:
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                raise TransportTimeout(f"{self.name}: nothing from {self.peer} within {timeout}s")
            self.sock.settimeout(remaining)
            try:
                data = self.sock.recv(65536)
            except socket.timeout:
                raise TransportTimeout(f"{self.name}: nothing from {self.peer} within {timeout}s") from None
            except OSError as exc:
                raise TransportTimeout(f"{self.name}: connection to {self.peer} failed: {exc}") from None
            if not data:
                raise TransportTimeout(f"{self.name}: {self.peer} closed the connection")
            self._ready.extend(self._decoder.feed(data))
        payload = self._ready.pop(0)
        msg = decode_payload(payload, self.version)
        if self.transcript is not None:
            self.transcript.record(self.peer, self.name, payload)
        return msg

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_endpoint(text: str):
    host, _, port = text.strip().rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {text!r}")
    return host, int(port)


class Listener:
    """Accepts site connections for an aggregator."""

    def __init__(self, host: str, port: int):
        self.sock = socket.create_server((host, port), reuse_port=False)
        self.address = self.sock.getsockname()[:2]

    def accept(self, timeout: float, transcript=None, version=PROTOCOL_VERSION) -> SocketChannel:
        self.sock.settimeout(timeout)
        try:
            conn, addr = self.sock.accept()
        except socket.timeout:
            raise TransportTimeout(f"no site connected within {timeout}s") from None
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketChannel(conn, "aggregator", f"{addr[0]}:{addr[1]}", transcript, version)

    def close(self):
        self.sock.close()


def connect(host: str, port: int, timeout: float = 30.0, name="site", transcript=None,
            version=PROTOCOL_VERSION) -> SocketChannel:
    """Connect, retrying until ``timeout`` so sites may start before the aggregator."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(0.1, deadline - time.monotonic()))
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return SocketChannel(sock, name, "aggregator", transcript, version)
        except OSError:
            if time.monotonic() >= deadline:
                raise TransportTimeout(f"could not reach {host}:{port} within {timeout}s") from None
            time.sleep(0.05)
