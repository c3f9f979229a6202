"""Wire messages and length-prefixed framing.

A frame is a 4-byte big-endian payload length followed by a UTF-8 JSON
object ``{"type", "version", "round", "body"}``. Every float is written with
17 significant digits in a fixed 24-character layout, so a payload's length
depends only on the shapes it carries, never on the values.
"""

import json
import re
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List

import numpy as np

from ..errors import NumericalError, ProtocolViolation
from ..estimation import SufficientStats
from ..exact import EXPANSION_WIDTH, collapse, expansion, merge
from ..model import ModelParams

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024

PARAMS_BROADCAST = "PARAMS_BROADCAST"
PARTIAL_STATS = "PARTIAL_STATS"
TERMINATE = "TERMINATE"
RESYNC_REQUEST = "RESYNC_REQUEST"
ACK = "ACK"
MESSAGE_TYPES = (PARAMS_BROADCAST, PARTIAL_STATS, TERMINATE, RESYNC_REQUEST, ACK)

# Declared body fields per message type; the privacy audit checks against these.
BODY_FIELDS = {
    PARAMS_BROADCAST: ("alpha", "beta", "eps_beta", "freeze_alpha", "inner_tol", "max_inner_iters"),
    PARTIAL_STATS: ("site_id", "beta_numerators", "gamma_stats", "count", "elbo"),
    TERMINATE: ("reason", "alpha", "beta"),
    RESYNC_REQUEST: ("site_id", "last_round"),
    ACK: ("site_id", "status"),
}

_SHORT_EXP = re.compile(r"e([+-])(\d\d)(?=[,\]]|$)")


def _format_floats(values) -> List[str]:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(arr)):
        raise NumericalError("refusing to serialize a non-finite number")
    text = ",".join(map("{: .16e}".format, arr.tolist()))
    return _SHORT_EXP.sub(r"e\g<1>0\g<2>", text).split(",") if text else []


def format_number(x: float) -> str:
    """Fixed-width (24 char) decimal with 17 significant digits; valid JSON."""
    return _format_floats([x])[0]


def _render(value) -> str:
    """JSON text with numpy arrays and floats rendered in the fixed layout."""
    if isinstance(value, dict):
        return "{" + ",".join(json.dumps(str(k)) + ":" + _render(v) for k, v in value.items()) + "}"
    if isinstance(value, np.ndarray):
        if value.ndim == 0:
            return format_number(float(value))
        if value.ndim == 1:
            return "[" + ",".join(_format_floats(value)) + "]"
        return "[" + ",".join(_render(v) for v in value) + "]"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_render(v) for v in value) + "]"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format_number(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return json.dumps(value)


@dataclass(frozen=True)
class Message:
    type: str
    round: int
    body: Dict[str, Any] = field(default_factory=dict)
    version: int = PROTOCOL_VERSION


def encode_payload(msg: Message) -> bytes:
    head = {"type": msg.type, "version": msg.version, "round": int(msg.round)}
    text = _render(head)[:-1] + ',"body":' + _render(msg.body) + "}"
    return text.encode("utf-8")


def decode_payload(payload: bytes, expected_version: int = PROTOCOL_VERSION) -> Message:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolViolation(f"undecodable payload: {exc}") from None
    if not isinstance(obj, dict) or set(obj) != {"type", "version", "round", "body"}:
        raise ProtocolViolation("payload must be an object with exactly type, version, round, body")
    if obj["version"] != expected_version:
        raise ProtocolViolation(f"protocol version {obj['version']!r}, expected {expected_version}")
    if obj["type"] not in MESSAGE_TYPES:
        raise ProtocolViolation(f"unknown message type {obj['type']!r}")
    if not isinstance(obj["round"], int) or not isinstance(obj["body"], dict):
        raise ProtocolViolation("round must be an integer and body an object")
    return Message(obj["type"], obj["round"], obj["body"], obj["version"])


def frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise ProtocolViolation(f"frame of {len(payload)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(payload)) + payload


def encode_frame(msg: Message) -> bytes:
    return frame(encode_payload(msg))


class FrameDecoder:
    """Incremental splitter for a byte stream of length-prefixed frames."""

    def __init__(self, max_frame: int = MAX_FRAME):
        self._buf = bytearray()
        self.max_frame = max_frame

    def feed(self, data: bytes) -> List[bytes]:
        self._buf.extend(data)
        frames = []
        while len(self._buf) >= HEADER.size:
            (size,) = HEADER.unpack_from(self._buf)
            if size > self.max_frame:
                raise ProtocolViolation(f"incoming frame of {size} bytes exceeds {self.max_frame}")
            if len(self._buf) < HEADER.size + size:
                break
            frames.append(bytes(self._buf[HEADER.size:HEADER.size + size]))
            del self._buf[:HEADER.size + size]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


def _require(msg: Message, kind: str):
    if msg.type != kind:
        raise ProtocolViolation(f"expected {kind}, got {msg.type}")
    missing = [f for f in BODY_FIELDS[kind] if f not in msg.body]
    if missing:
        raise ProtocolViolation(f"{kind} body lacks {missing}")


def _floats(obj, shape=None) -> np.ndarray:
    try:
        arr = np.asarray(obj, dtype=np.float64)
    except (TypeError, ValueError):
        raise ProtocolViolation("malformed numeric array") from None
    if shape is not None and arr.shape != tuple(shape):
        raise ProtocolViolation(f"array has shape {arr.shape}, expected {tuple(shape)}")
    return arr


@dataclass
class ParamsBroadcast:
    round: int
    params: ModelParams
    eps_beta: float
    freeze_alpha: bool = False
    inner_tol: float = 1e-8
    max_inner_iters: int = 50

    def to_message(self) -> Message:
        return Message(PARAMS_BROADCAST, self.round, {
            "alpha": self.params.alpha,
            "beta": [b for b in self.params.beta],
            "eps_beta": float(self.eps_beta),
            "freeze_alpha": bool(self.freeze_alpha),
            "inner_tol": float(self.inner_tol),
            "max_inner_iters": int(self.max_inner_iters),
        })

    @classmethod
    def from_message(cls, msg: Message) -> "ParamsBroadcast":
        _require(msg, PARAMS_BROADCAST)
        b = msg.body
        alpha = _floats(b["alpha"])
        beta = [_floats(x) for x in b["beta"]]
        if alpha.ndim != 1 or any(x.ndim != 2 or x.shape[0] != alpha.shape[0] for x in beta):
            raise ProtocolViolation("inconsistent parameter shapes in broadcast")
        return cls(msg.round, ModelParams(alpha, beta), float(b["eps_beta"]), bool(b["freeze_alpha"]),
                   float(b["inner_tol"]), int(b["max_inner_iters"]))


@dataclass
class PartialStats:
    """One site's aggregate message.

    Each summed quantity is held as a fixed-width exact expansion (last axis),
    so partials combine exactly regardless of how instances were split.
    """

    site_id: int
    round: int
    beta_numerators: List[np.ndarray]  # per clustering: k x k^(m) x W
    gamma_stats: np.ndarray  # k x W
    count: int
    elbo: np.ndarray  # W

    def to_message(self) -> Message:
        return Message(PARTIAL_STATS, self.round, {
            "site_id": int(self.site_id),
            "beta_numerators": list(self.beta_numerators),
            "gamma_stats": self.gamma_stats,
            "count": float(self.count),
            "elbo": self.elbo,
        })

    @classmethod
    def from_message(cls, msg: Message) -> "PartialStats":
        _require(msg, PARTIAL_STATS)
        b = msg.body
        extra = set(b) - set(BODY_FIELDS[PARTIAL_STATS])
        if extra:
            raise ProtocolViolation(f"undeclared fields in PARTIAL_STATS: {sorted(extra)}")
        nums = [_floats(x) for x in b["beta_numerators"]]
        gs = _floats(b["gamma_stats"])
        elbo = _floats(b["elbo"])
        count = float(b["count"])
        if count != int(count) or count < 0:
            raise ProtocolViolation("count must be a nonnegative integer")
        if gs.ndim != 2 or elbo.ndim != 1 or any(x.ndim != 3 for x in nums):
            raise ProtocolViolation("malformed PARTIAL_STATS arrays")
        return cls(int(b["site_id"]), msg.round, nums, gs, int(count), elbo)

    def totals(self) -> SufficientStats:
        return combine([self])

    def merged_with(self, other: "PartialStats", site_id: int = 0) -> "PartialStats":
        """Exact fieldwise sum of two partials (used for ring accumulation)."""
        if other.round != self.round:
            raise ProtocolViolation("cannot merge partials from different rounds")
        width = self.elbo.shape[-1]

        def mx(a, b):
            out = np.empty(a.shape)
            for idx in np.ndindex(a.shape[:-1]):
                out[idx] = merge([a[idx], b[idx]], width=width)
            return out

        return PartialStats(
            site_id, self.round,
            [mx(a, b) for a, b in zip(self.beta_numerators, other.beta_numerators)],
            mx(self.gamma_stats, other.gamma_stats),
            self.count + other.count,
            merge([self.elbo, other.elbo], width=width),
        )


def expansions_of(blocks, width=EXPANSION_WIDTH) -> np.ndarray:
    """Map an array of term-lists (object array or nested lists) to an array of expansions."""
    return np.array([expansion(b, width) for b in blocks])


def combine(partials) -> SufficientStats:
    """Exact totals across partials; any split of the instances gives the same bits."""
    partials = list(partials)
    first = partials[0]
    nums = []
    for m, a in enumerate(first.beta_numerators):
        s = np.empty(a.shape[:-1])
        for idx in np.ndindex(s.shape):
            s[idx] = collapse([p.beta_numerators[m][idx] for p in partials])
        nums.append(s)
    gs = np.array([collapse([p.gamma_stats[i] for p in partials]) for i in range(first.gamma_stats.shape[0])])
    elbo = collapse([p.elbo for p in partials])
    count = sum(p.count for p in partials)
    return SufficientStats(nums, gs, count, elbo)


@dataclass
class Terminate:
    round: int
    reason: str
    params: ModelParams

    def to_message(self) -> Message:
        return Message(TERMINATE, self.round, {
            "reason": self.reason, "alpha": self.params.alpha, "beta": list(self.params.beta)})

    @classmethod
    def from_message(cls, msg: Message) -> "Terminate":
        _require(msg, TERMINATE)
        b = msg.body
        return cls(msg.round, str(b["reason"]), ModelParams(_floats(b["alpha"]), [_floats(x) for x in b["beta"]]))


def ack(site_id: int, status: str, round_: int = 0) -> Message:
    return Message(ACK, round_, {"site_id": int(site_id), "status": status})


def resync_request(site_id: int, last_round: int, round_: int) -> Message:
    return Message(RESYNC_REQUEST, round_, {"site_id": int(site_id), "last_round": int(last_round)})
