"""Socket-backed session entry points (one process per participant)."""

import logging
import os
import time
from typing import Optional

from ..errors import TransportTimeout
from ..estimation import FitConfig
from ..model import LabelTable, ProblemShape
from .messages import PROTOCOL_VERSION
from .protocol import Aggregator, SiteNode
from .transport import Listener, connect, parse_endpoint

log = logging.getLogger(__name__)


def _write_port(path, port):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(f"{port}\n")
    os.replace(tmp, path)


def wait_for_port_file(path, timeout=30.0) -> int:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read().strip()
            if text:
                return int(text)
        except OSError:
            pass
        time.sleep(0.02)
    raise TransportTimeout(f"no port published in {path} within {timeout}s")


def serve(shape: ProblemShape, cfg: FitConfig, listen: str, n_sites: int, transcript=None,
          round_timeout: float = 60.0, checkpoint_path=None, resume_from=None, ring: bool = False,
          local_site: Optional[SiteNode] = None, port_file=None, accept_timeout: float = 60.0):
    """Accept ``n_sites`` connections on ``listen`` and run the aggregator.

    Returns the aggregator (its ``local_result`` is set in peer mode) and the report.
    """
    host, port = parse_endpoint(listen)
    listener = Listener(host, port)
    if port_file:
        _write_port(port_file, listener.address[1])
    log.info("aggregator listening on %s:%s for %d site(s)", *listener.address, n_sites)
    channels = []
    try:
        for _ in range(n_sites):
            channels.append(listener.accept(accept_timeout, transcript))
        agg = Aggregator(shape, cfg, channels, local_site=local_site, ring=ring, round_timeout=round_timeout,
                         checkpoint_path=checkpoint_path, resume_from=resume_from)
        report = agg.run()
        return agg, report
    finally:
        for ch in channels:
            ch.close()
        listener.close()


def run_site(endpoint: str, site_id: int, table: LabelTable, shape: Optional[ProblemShape] = None,
             workers: int = 1, version: int = PROTOCOL_VERSION, connect_timeout: float = 30.0,
             idle_timeout: float = 300.0, fail_at_round: Optional[int] = None, transcript=None):
    host, port = parse_endpoint(endpoint)
    channel = connect(host, port, connect_timeout, name=f"site{site_id}", transcript=transcript, version=version)
    node = SiteNode(site_id, table, workers=workers, shape=shape, fail_at_round=fail_at_round)
    try:
        return node.run(channel, idle_timeout=idle_timeout)
    finally:
        channel.close()
