"""Mechanical privacy audit over a recorded session transcript.

Three rules, each reported with the offsets of offending messages:

``schema``
    every body carries exactly its declared fields, with aggregate shapes
    only (nothing indexed by instance, no free-form strings);
``aggregator_bound``
    everything sent to the aggregator is a declared aggregate type;
``size_independent``
    all PARTIAL_STATS payloads have the same byte length once the site id and
    round counter are discounted, so message size cannot leak a site's size.
"""

import json
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .messages import ACK, BODY_FIELDS, MESSAGE_TYPES, PARTIAL_STATS, RESYNC_REQUEST, TERMINATE

AGGREGATOR = "aggregator"
AGGREGATOR_BOUND = (PARTIAL_STATS, ACK, RESYNC_REQUEST)
ACK_STATUSES = ("hello", "done")
TERMINATE_REASONS = ("converged", "max_iterations", "timeout", "protocol_violation", "duplicate_site")
RULES = ("schema", "aggregator_bound", "size_independent")


@dataclass
class RuleResult:
    name: str
    offsets: List[int] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.offsets

    def fail(self, offset, note):
        self.offsets.append(offset)
        self.notes.append(f"@{offset}: {note}")


@dataclass
class AuditReport:
    rules: Dict[str, RuleResult]
    n_messages: int
    partial_lengths: List[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rules.values())

    def lines(self) -> List[str]:
        out = []
        for name in RULES:
            r = self.rules[name]
            where = "" if r.passed else " offsets=" + ",".join(map(str, r.offsets))
            out.append(f"{name}: {'PASS' if r.passed else 'FAIL'}{where}")
        return out

    def as_dict(self):
        return {
            "passed": self.passed,
            "messages": self.n_messages,
            "rules": {n: {"passed": r.passed, "offsets": r.offsets, "notes": r.notes} for n, r in self.rules.items()},
        }


def _numeric(value) -> bool:
    if isinstance(value, bool):
        return False
    if isinstance(value, (int, float)):
        return True
    return isinstance(value, list) and all(_numeric(v) for v in value)


def _array(value):
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        return None
    return arr if arr.dtype == np.float64 else None


def _schema_problems(kind, body) -> List[str]:
    expected = set(BODY_FIELDS[kind])
    problems = []
    if set(body) != expected:
        extra, missing = set(body) - expected, expected - set(body)
        if extra:
            problems.append(f"undeclared fields {sorted(extra)}")
        if missing:
            problems.append(f"missing fields {sorted(missing)}")
        return problems
    if kind == PARTIAL_STATS:
        gs, elbo = _array(body["gamma_stats"]), _array(body["elbo"])
        nums = body["beta_numerators"]
        if gs is None or elbo is None or gs.ndim != 2 or elbo.ndim != 1 or not isinstance(nums, list):
            return ["malformed aggregate arrays"]
        k, width = gs.shape
        for m, x in enumerate(nums):
            a = _array(x)
            if a is None or a.ndim != 3 or a.shape[0] != k or a.shape[2] != width:
                problems.append(f"beta_numerators[{m}] is not k x k_m x {width}")
        if elbo.shape != (width,):
            problems.append("elbo has the wrong width")
        if not _numeric(body["count"]) or not _numeric(body["site_id"]):
            problems.append("count and site_id must be scalars")
        elif isinstance(body["count"], list) or isinstance(body["site_id"], list):
            problems.append("count and site_id must be scalars")
    elif kind == ACK:
        if body["status"] not in ACK_STATUSES:
            problems.append(f"unexpected ACK status {body['status']!r}")
    elif kind == TERMINATE:
        if body["reason"] not in TERMINATE_REASONS:
            problems.append(f"unexpected TERMINATE reason {body['reason']!r}")
    elif kind == RESYNC_REQUEST:
        if not all(isinstance(body[f], int) for f in BODY_FIELDS[kind]):
            problems.append("RESYNC_REQUEST fields must be integers")
    return problems


def audit_privacy(transcript) -> AuditReport:
    """Check a :class:`Transcript` (or any sequence of entries) against the three rules."""
    entries = list(getattr(transcript, "entries", transcript))
    rules = {name: RuleResult(name) for name in RULES}
    lengths = {}
    for e in entries:
        try:
            obj = json.loads(e.payload.decode("utf-8"))
            kind, body = obj["type"], obj["body"]
            round_ = obj["round"]
        except (UnicodeDecodeError, ValueError, KeyError, TypeError):
            rules["schema"].fail(e.offset, "undecodable payload")
            if e.receiver == AGGREGATOR:
                rules["aggregator_bound"].fail(e.offset, "undecodable payload")
            continue
        if kind not in MESSAGE_TYPES or not isinstance(body, dict):
            rules["schema"].fail(e.offset, f"undeclared message type {kind!r}")
        else:
            for p in _schema_problems(kind, body):
                rules["schema"].fail(e.offset, f"{kind}: {p}")
        if e.receiver == AGGREGATOR and kind not in AGGREGATOR_BOUND:
            rules["aggregator_bound"].fail(e.offset, f"{kind} sent to the aggregator")
        if kind == PARTIAL_STATS and isinstance(body, dict):
            discount = len(str(round_)) + len(str(body.get("site_id", "")))
            lengths[e.offset] = len(e.payload) - discount
    if lengths:
        values = list(lengths.values())
        typical = max(sorted(set(values)), key=values.count)
        for off, n in lengths.items():
            if n != typical:
                rules["size_independent"].fail(off, f"payload length {n} differs from {typical}")
    return AuditReport(rules, len(entries), sorted(set(lengths.values())))


def partial_payload_lengths(transcript) -> List[int]:
    """Normalized PARTIAL_STATS byte lengths, for comparing sessions of different sizes."""
    return audit_privacy(transcript).partial_lengths
