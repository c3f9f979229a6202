"""Row-distributed VEM: site E-steps, aggregate-only M-steps, synchronous rounds."""

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np

from ..errors import DuplicateSite, MissingSite, ProtocolViolation, StaleRound, TransportTimeout, ValidationError
from ..estimation import (FitConfig, FitReport, SufficientStats, elbo_converged, gamma_stat_terms, init_params,
                          m_step)
from ..exact import EXPANSION_WIDTH, expansion
from ..inference import EStepConfig, e_step, instance_elbo
from ..model import LabelTable, ModelParams, ProblemShape, VariationalState, predicted_class, validate_table
from .messages import (ACK, PARAMS_BROADCAST, PARTIAL_STATS, RESYNC_REQUEST, TERMINATE, Message, ParamsBroadcast,
                       PartialStats, Terminate, ack, combine, resync_request)

log = logging.getLogger(__name__)

RING_SITE_ID = 0


@dataclass
class SiteAssignment:
    """Which site (1..D) holds each instance."""

    n_sites: int
    site_of_instance: np.ndarray
    contiguous: bool = False

    def __post_init__(self):
        self.site_of_instance = np.asarray(self.site_of_instance, dtype=np.int64)
        counts = np.bincount(self.site_of_instance, minlength=self.n_sites + 1)
        if self.site_of_instance.min() < 1 or self.site_of_instance.max() > self.n_sites:
            raise ValidationError("site indices must lie in 1..D")
        if np.any(counts[1:] == 0):
            raise ValidationError("every site must hold at least one instance")

    @classmethod
    def split_contiguous(cls, n, d):
        sites = np.concatenate([np.full(len(c), i + 1) for i, c in enumerate(np.array_split(np.arange(n), d))])
        return cls(d, sites, True)

    @classmethod
    def split_fractions(cls, n, fractions):
        bounds = np.round(np.cumsum(fractions) / np.sum(fractions) * n).astype(int)
        sites = np.searchsorted(bounds, np.arange(n), side="right") + 1
        return cls(len(fractions), sites, True)

    @classmethod
    def split_random(cls, n, d, seed):
        rng = np.random.default_rng(seed)
        sites = np.concatenate([np.arange(1, d + 1), rng.integers(1, d + 1, size=n - d)])
        return cls(d, rng.permutation(sites), False)

    def indices(self, site_id) -> np.ndarray:
        return np.nonzero(self.site_of_instance == site_id)[0]

    def shards(self, table: LabelTable) -> Dict[int, LabelTable]:
        return {d: table.rows(self.indices(d)) for d in range(1, self.n_sites + 1)}


def partial_from_state(site_id, round_, params: ModelParams, state: VariationalState, shard: LabelTable,
                       width=EXPANSION_WIDTH) -> PartialStats:
    k = params.n_classes
    nums = []
    for m, b in enumerate(params.beta):
        km = b.shape[1]
        out = np.zeros((k, km, width))
        labels = shard.cluster_labels[:, m]
        for j in range(km):
            block = state.phi[labels == j, m, :]
            for i in range(k):
                out[i, j] = expansion(block[:, i], width)
        nums.append(out)
    terms = gamma_stat_terms(state.gamma)
    gs = np.array([expansion(terms[:, i], width) for i in range(k)])
    elbo = expansion(instance_elbo(params, state.gamma, state.phi, shard.class_labels, shard.cluster_labels), width)
    return PartialStats(int(site_id), int(round_), nums, gs, shard.n_instances, elbo)


def site_e_step(shard: LabelTable, broadcast: ParamsBroadcast, site_id: int = 1,
                expected_round: Optional[int] = None, workers: int = 1):
    """Local E-step on a site's rows; returns (PartialStats, local variational state)."""
    if expected_round is not None and broadcast.round != expected_round:
        raise StaleRound(f"broadcast for round {broadcast.round}, site expects {expected_round}")
    cfg = EStepConfig(inner_tol=broadcast.inner_tol, max_inner_iters=broadcast.max_inner_iters)
    state, _ = e_step(broadcast.params, shard, cfg, workers=workers)
    return partial_from_state(site_id, broadcast.round, broadcast.params, state, shard), state


def aggregate(partials: Iterable[PartialStats], round_: int, expected_sites: Iterable[int]) -> SufficientStats:
    partials = list(partials)
    expected = sorted(set(expected_sites))
    seen = {}
    for p in partials:
        if p.round != round_:
            raise StaleRound(f"site {p.site_id} sent round {p.round} during round {round_}")
        if p.site_id in seen:
            raise DuplicateSite(f"two partials from site {p.site_id} in round {round_}")
        if p.site_id not in expected:
            raise ProtocolViolation(f"partial from unexpected site {p.site_id}")
        seen[p.site_id] = p
    missing = [s for s in expected if s not in seen]
    if missing:
        raise MissingSite(f"round {round_} lacks partials from sites {missing}")
    return combine(seen[s] for s in expected)


def aggregate_and_m_step(partials, broadcast: ParamsBroadcast, cfg: FitConfig, expected_sites):
    """Combine one round's partials and run the M-step; returns (next broadcast, totals)."""
    stats = aggregate(partials, broadcast.round, expected_sites)
    params, _ = m_step(stats, broadcast.params, cfg)
    nxt = ParamsBroadcast(broadcast.round + 1, params, cfg.eps_beta, cfg.freeze_alpha, cfg.inner_tol,
                          cfg.max_inner_iters)
    return nxt, stats


@dataclass
class SiteResult:
    site_id: int
    instance_ids: List[str]
    posteriors: np.ndarray
    rounds: int

    @property
    def predicted_class(self):
        return predicted_class(self.posteriors)


class SiteNode:
    """A data site: holds its own rows and variational state, sends only aggregates."""

    def __init__(self, site_id: int, table: LabelTable, workers: int = 1, shape: Optional[ProblemShape] = None,
                 fail_at_round: Optional[int] = None):
        self.site_id = int(site_id)
        self.table = table
        self.workers = workers
        self.shape = shape
        self.fail_at_round = fail_at_round
        self.last_round = 0
        self.state: Optional[VariationalState] = None
        self._checked = False

    def _validate(self, params: ModelParams):
        if self._checked:
            return
        shape = self.shape or ProblemShape(self.table.n_instances, params.n_classes, self.table.n_classifiers,
                                           len(params.beta), tuple(b.shape[1] for b in params.beta))
        validate_table(self.table, shape.with_instances(self.table.n_instances))
        self._checked = True

    def compute(self, bc: ParamsBroadcast) -> PartialStats:
        if bc.round <= self.last_round:
            raise StaleRound(f"site {self.site_id}: round {bc.round} after {self.last_round}")
        self._validate(bc.params)
        partial, self.state = site_e_step(self.table, bc, self.site_id, workers=self.workers)
        self.last_round = bc.round
        return partial

    def finish(self, term: Terminate) -> SiteResult:
        if self.state is None or self.last_round != term.round:
            bc = ParamsBroadcast(term.round, term.params, 1.0)
            _, self.state = site_e_step(self.table, bc, self.site_id, workers=self.workers)
        return SiteResult(self.site_id, list(self.table.instance_ids), self.state.posteriors(), self.last_round)

    def run(self, channel, ring: bool = False, ring_prev=None, ring_next=None, idle_timeout: float = 300.0):
        """Serve one session; returns a SiteResult, or None after a simulated crash."""
        channel.send(ack(self.site_id, "hello"))
        while True:
            msg = channel.recv(idle_timeout)
            if msg.type == PARAMS_BROADCAST:
                bc = ParamsBroadcast.from_message(msg)
                if bc.round <= self.last_round:
                    log.warning("site %s: stale round %s, requesting resync", self.site_id, bc.round)
                    channel.send(resync_request(self.site_id, self.last_round, bc.round))
                    continue
                if self.fail_at_round is not None and bc.round >= self.fail_at_round:
                    channel.close()  # simulated crash: the connection drops mid-round
                    return None
                partial = self.compute(bc)
                if ring:
                    partial.site_id = RING_SITE_ID
                    if ring_prev is not None:
                        incoming = PartialStats.from_message(ring_prev.recv(idle_timeout))
                        if incoming.round != bc.round:
                            raise StaleRound(f"ring partial for round {incoming.round} during {bc.round}")
                        partial = incoming.merged_with(partial, RING_SITE_ID)
                (ring_next or channel).send(partial.to_message())
            elif msg.type == TERMINATE:
                term = Terminate.from_message(msg)
                if term.reason not in ("converged", "max_iterations"):
                    raise ProtocolViolation(f"session terminated by aggregator: {term.reason}")
                result = self.finish(term)
                channel.send(ack(self.site_id, "done", term.round))
                return result
            elif msg.type in (ACK, RESYNC_REQUEST):
                continue
            else:
                raise ProtocolViolation(f"site cannot handle {msg.type}")


def save_checkpoint(path, round_, params: ModelParams, trace, alpha_trace, acked, newton_bad=0):
    data = {
        "round": int(round_),
        "alpha": params.alpha.tolist(),
        "beta": [b.tolist() for b in params.beta],
        "elbo_trace": [float(v) for v in trace],
        "alpha_trace": [a.tolist() for a in alpha_trace],
        "acked": sorted(int(s) for s in acked),
        "newton_unconverged": int(newton_bad),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    params = ModelParams(np.array(data["alpha"]), [np.array(b) for b in data["beta"]])
    return data["round"], params, data["elbo_trace"], [np.array(a) for a in data["alpha_trace"]], data


class Aggregator:
    """Coordinates rounds; sees only PartialStats.

    ``local_site`` turns this into a peer that also holds data: its E-step runs
    in the aggregator thread before the collection window of each round.
    """

    def __init__(self, shape: ProblemShape, cfg: FitConfig = FitConfig(), channels=(),
                 local_site: Optional[SiteNode] = None, ring: bool = False, round_timeout: float = 60.0,
                 checkpoint_path=None, resume_from=None):
        self.shape = shape
        self.cfg = cfg
        self.channels = list(channels)
        self.local_site = local_site
        self.ring = ring
        self.round_timeout = round_timeout
        self.checkpoint_path = checkpoint_path
        self.resume_from = resume_from
        self.site_channels: Dict[int, object] = {}
        self.stale_messages = 0
        self.local_result: Optional[SiteResult] = None
        self._inbox: "queue.Queue" = queue.Queue()

    def _reader(self, idx, channel):
        while True:
            try:
                msg = channel.recv(None)
            except Exception as exc:  # delivered to the aggregator thread
                self._inbox.put((idx, exc))
                return
            self._inbox.put((idx, msg))

    def _next(self, deadline, what):
        remaining = deadline - time.monotonic()
        try:
            return self._inbox.get(timeout=max(remaining, 0.0) if remaining > 0 else 0.0)
        except queue.Empty:
            raise TransportTimeout(f"timed out waiting for {what}") from None

    def _abort(self, reason):
        for ch in self.channels:
            try:
                ch.send(Terminate(0, reason, init_params(self.shape, 0)).to_message())
            except Exception:
                pass

    def _handshake(self):
        for idx, ch in enumerate(self.channels):
            threading.Thread(target=self._reader, args=(idx, ch), daemon=True).start()
        deadline = time.monotonic() + self.round_timeout
        by_index = {}
        while len(by_index) < len(self.channels):
            idx, item = self._next(deadline, "site hello messages")
            if isinstance(item, Exception):
                if isinstance(item, ProtocolViolation):
                    self._abort("protocol_violation")
                raise item
            if item.type != ACK or item.body.get("status") != "hello":
                raise ProtocolViolation(f"expected hello, got {item.type}")
            sid = int(item.body["site_id"])
            if sid in self.site_channels or (self.local_site and sid == self.local_site.site_id):
                self._abort("duplicate_site")
                raise DuplicateSite(f"site id {sid} connected twice")
            by_index[idx] = sid
            self.site_channels[sid] = self.channels[idx]
        self._index_to_site = by_index

    def expected_sites(self):
        if self.ring:
            return [RING_SITE_ID]
        sites = set(self.site_channels)
        if self.local_site is not None:
            sites.add(self.local_site.site_id)
        return sorted(sites)

    def _collect(self, bc: ParamsBroadcast, expected, have):
        got = dict(have)
        deadline = time.monotonic() + self.round_timeout
        while any(s not in got for s in expected):
            try:
                idx, item = self._next(deadline, f"round {bc.round} partials")
            except TransportTimeout:
                raise TransportTimeout(
                    f"round {bc.round}: no partials from sites {[s for s in expected if s not in got]}") from None
            if isinstance(item, Exception):
                if isinstance(item, ProtocolViolation):
                    raise item
                raise TransportTimeout(f"round {bc.round}: site {self._index_to_site.get(idx)} dropped: {item}")
            if item.type == PARTIAL_STATS:
                p = PartialStats.from_message(item)
                if p.round != bc.round:
                    self.stale_messages += 1
                    continue
                if p.site_id in got:
                    raise DuplicateSite(f"site {p.site_id} sent two partials in round {bc.round}")
                if p.site_id not in expected:
                    raise ProtocolViolation(f"partial from unexpected site {p.site_id}")
                got[p.site_id] = p
            elif item.type == RESYNC_REQUEST:
                self.channels[idx].send(bc.to_message())
            elif item.type == ACK:
                continue
            else:
                raise ProtocolViolation(f"aggregator cannot handle {item.type}")
        return [got[s] for s in expected]

    def run(self) -> FitReport:
        cfg = self.cfg
        self._handshake()
        if self.resume_from is not None:
            round_, params, trace, alpha_trace, data = load_checkpoint(self.resume_from)
            trace, newton_bad = list(trace), data.get("newton_unconverged", 0)
        else:
            round_, params, trace, alpha_trace, newton_bad = 1, init_params(self.shape, cfg.rng_seed), [], [], 0
        initial = init_params(self.shape, cfg.rng_seed)
        expected = self.expected_sites()
        converged = False
        while True:
            bc = ParamsBroadcast(round_, params, cfg.eps_beta, cfg.freeze_alpha, cfg.inner_tol, cfg.max_inner_iters)
            msg = bc.to_message()
            for ch in self.channels:
                ch.send(msg)
            have = {}
            if self.local_site is not None:
                have[self.local_site.site_id] = self.local_site.compute(bc)
            try:
                partials = self._collect(bc, expected, have)
            except TransportTimeout as exc:
                if self.checkpoint_path is not None:
                    save_checkpoint(self.checkpoint_path, round_, params, trace, alpha_trace, have, newton_bad)
                    exc.checkpoint = self.checkpoint_path
                self._abort("timeout")
                raise
            stats = aggregate(partials, round_, expected)
            trace.append(stats.elbo)
            alpha_trace.append(params.alpha.copy())
            if elbo_converged(trace, cfg.outer_tol):
                converged = True
                break
            if len(trace) >= cfg.max_outer_iters:
                break
            params, ok = m_step(stats, params, cfg)
            newton_bad += not ok
            round_ += 1
            if self.checkpoint_path is not None:
                save_checkpoint(self.checkpoint_path, round_, params, trace, alpha_trace, [], newton_bad)

        term = Terminate(round_, "converged" if converged else "max_iterations", params)
        for ch in self.channels:
            ch.send(term.to_message())
        if self.local_site is not None:
            self.local_result = self.local_site.finish(term)
        self._await_done(len(self.channels))
        k = self.shape.n_classes
        return FitReport(
            elbo_trace=trace, outer_iterations=len(trace), converged=converged,
            posteriors=np.zeros((0, k)), predicted_class=np.zeros(0, dtype=np.int64), params=params,
            alpha_trace=alpha_trace, initial_params=initial, newton_unconverged=newton_bad)

    def _await_done(self, n):
        deadline = time.monotonic() + min(self.round_timeout, 30.0)
        done = 0
        while done < n:
            try:
                _, item = self._next(deadline, "completion acks")
            except TransportTimeout:
                log.warning("only %d of %d sites acknowledged termination", done, n)
                return
            if isinstance(item, Exception):
                continue
            if item.type == ACK and item.body.get("status") == "done":
                done += 1


def run_session(role: str, transport, table_shard: Optional[LabelTable] = None, cfg: FitConfig = FitConfig(),
                shape: Optional[ProblemShape] = None, site_id: int = 1, **kwargs):
    """Run one participant of a session.

    ``transport`` is a list of channels for ``aggregator``/``peer`` (one per
    remote site) and a single channel for ``site``. Aggregators and peers
    return a FitReport (a peer also exposes ``.local_result``); sites return
    their SiteResult.
    """
    if role == "site":
        node = SiteNode(site_id, table_shard, workers=kwargs.pop("workers", 1), shape=shape,
                        fail_at_round=kwargs.pop("fail_at_round", None))
        return node.run(transport, **kwargs)
    if role not in ("aggregator", "peer"):
        raise ValueError(f"unknown role {role!r}")
    local = None
    if role == "peer":
        local = SiteNode(site_id, table_shard, workers=kwargs.pop("workers", 1), shape=shape)
    agg = Aggregator(shape, cfg, transport, local_site=local, **kwargs)
    report = agg.run()
    report.local_result = agg.local_result
    return report


@dataclass
class InProcessResult:
    report: FitReport
    posteriors: np.ndarray
    site_results: Dict[int, SiteResult]


def run_in_process(table: LabelTable, shape: ProblemShape, cfg: FitConfig = FitConfig(),
                   assignment: Optional[SiteAssignment] = None, n_sites: int = 2, ring: bool = False,
                   peer: bool = False, serialize: bool = True, transcript=None, round_timeout: float = 60.0,
                   checkpoint_path=None, resume_from=None, fail_at: Optional[Dict[int, int]] = None,
                   workers: int = 1, versions: Optional[Dict[int, int]] = None) -> InProcessResult:
    """Run a whole session on threads over in-process channels.

    Posterior shards written by the sites are reassembled in instance order
    for convenience; the aggregator's own report never contains them.
    """
    from .transport import channel_pair

    validate_table(table, shape)
    if assignment is None:
        assignment = SiteAssignment.split_contiguous(table.n_instances, n_sites)
    if ring and peer:
        raise ValueError("ring aggregation and peer mode are mutually exclusive")
    fail_at = fail_at or {}
    versions = versions or {}
    shards = assignment.shards(table)
    remote = [d for d in shards if not (peer and d == 1)]
    agg_ends, site_ends = [], {}
    for d in remote:
        a, s = channel_pair("aggregator", f"site{d}", serialize, transcript,
                            (1, versions.get(d, 1)))
        agg_ends.append(a)
        site_ends[d] = s
    ring_links = {}
    if ring:
        for d, nxt in zip(remote, remote[1:]):
            out_end, in_end = channel_pair(f"site{d}", f"site{nxt}", serialize, transcript)
            ring_links.setdefault(d, {})["next"] = out_end
            ring_links.setdefault(nxt, {})["prev"] = in_end

    results: Dict[int, SiteResult] = {}
    errors: Dict[int, BaseException] = {}

    def site_main(d):
        node = SiteNode(d, shards[d], workers=workers, shape=shape, fail_at_round=fail_at.get(d))
        links = ring_links.get(d, {})
        try:
            res = node.run(site_ends[d], ring=ring, ring_prev=links.get("prev"), ring_next=links.get("next"),
                           idle_timeout=max(round_timeout * 4, 10.0))
            if res is not None:
                results[d] = res
        except BaseException as exc:  # reported after join
            errors[d] = exc

    threads = [threading.Thread(target=site_main, args=(d,), daemon=True) for d in remote]
    for t in threads:
        t.start()
    local = SiteNode(1, shards[1], workers=workers, shape=shape) if peer else None
    agg = Aggregator(shape, cfg, agg_ends, local_site=local, ring=ring, round_timeout=round_timeout,
                     checkpoint_path=checkpoint_path, resume_from=resume_from)
    try:
        report = agg.run()
    finally:
        for ch in agg_ends:
            ch.close()
        for t in threads:
            t.join(timeout=max(round_timeout, 5.0))
    if agg.local_result is not None:
        results[1] = agg.local_result
    if errors:
        raise next(iter(errors.values()))
    post = np.zeros((table.n_instances, shape.n_classes))
    for d, res in results.items():
        post[assignment.indices(d)] = res.posteriors
    report.posteriors = post
    report.predicted_class = predicted_class(post)
    return InProcessResult(report, post, results)
