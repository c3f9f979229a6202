"""Command-line entry point: ``bc3e fit | serve | site | peer | sample | evaluate | audit | api``.

Exit codes: 0 ok, 2 validation, 3 numerical, 4 protocol/transport.
"""

import functools
import json
import logging
import os
import sys

import click
import numpy as np

from . import io
from .distributed.audit import audit_privacy
from .distributed.messages import PROTOCOL_VERSION
from .distributed.protocol import SiteNode
from .distributed.runners import run_site, serve as serve_session, wait_for_port_file
from .distributed.transport import Transcript
from .errors import BC3EError, NumericalError, ProtocolError, ValidationError
from .estimation import fit as fit_model
from .synth import accuracy_report, sample_dataset

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_PROTOCOL = 0, 2, 3, 4


def _exit_code(exc) -> int:
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, ProtocolError):
        return EXIT_PROTOCOL
    return 1


def guarded(fn):
    """Map library errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except BC3EError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(_exit_code(exc))
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)

    return wrapper


def _config(path, seed=None, workers=None, freeze_alpha=False, **extra) -> io.RunConfig:
    cfg = io.load_config(path)
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers
    if freeze_alpha:
        cfg.freeze_alpha = True
    for key, value in extra.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def make_client(server: str):
    """HTTP client for the service; tests substitute an in-process client."""
    import httpx

    return httpx.Client(base_url=server, timeout=600.0)


common = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False), help="key = value config file"),
    click.option("--seed", type=int, help="initialization seed (overrides config)"),
    click.option("--workers", type=int, help="threads for the E-step; never changes results"),
]


def with_common(fn):
    for opt in reversed(common):
        fn = opt(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose):
    """Refine class posteriors by fusing classifier and cluster ensembles."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")


@main.command()
@with_common
@click.option("--labels", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False), help="output directory")
@click.option("--freeze-alpha", is_flag=True, help="keep alpha at its initial value")
@click.option("--server", help="run on a service instance at this base URL instead of locally")
@guarded
def fit(config_path, seed, workers, labels, out, freeze_alpha, server):
    """Centralized fit: writes posteriors.csv and report.json."""
    cfg = _config(config_path, seed, workers, freeze_alpha)
    table = io.read_labels(labels)
    out = _out_dir(out)
    if server:
        payload = {
            "ids": table.instance_ids,
            "class_labels": (table.class_labels + 1).tolist(),
            "cluster_labels": (table.cluster_labels + 1).tolist(),
            "n_classes": cfg.n_classes,
            "clusters_per_clustering": cfg.clusters_per_clustering,
            "options": {f: getattr(cfg, f) for f in ("outer_tol", "max_outer_iters", "eps_beta", "alpha_floor",
                                                     "newton_max_iters", "newton_tol", "seed", "freeze_alpha",
                                                     "inner_tol", "max_inner_iters", "workers")},
        }
        with make_client(server) as client:
            resp = client.post("/fit", json=payload)
        if resp.status_code != 200:
            detail = resp.json().get("detail", resp.text)
            click.echo(f"error: {detail}", err=True)
            sys.exit(EXIT_VALIDATION if resp.status_code == 422 else EXIT_NUMERICAL)
        body = resp.json()
        io.write_posteriors(os.path.join(out, "posteriors.csv"), body["ids"], np.array(body["posteriors"]))
        io.write_json(os.path.join(out, "report.json"), body["report"])
        return
    shape = cfg.shape_for(table)
    report = fit_model(table, shape, cfg.fit_config(), workers=cfg.workers)
    io.write_posteriors(os.path.join(out, "posteriors.csv"), table.instance_ids, report.posteriors)
    io.write_json(os.path.join(out, "report.json"), io.report_to_dict(report))
    click.echo(f"{'converged' if report.converged else 'stopped'} after {report.outer_iterations} iterations; "
               f"ELBO {report.elbo_trace[-1]!r}")


def _transcript_opt(fn):
    return click.option("--transcript", type=click.Path(dir_okay=False),
                        help="record every payload to this JSONL file")(fn)


@main.command()
@with_common
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--listen", default="127.0.0.1:7070", show_default=True)
@click.option("--sites", "n_sites", type=int, help="number of sites to wait for")
@click.option("--freeze-alpha", is_flag=True)
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="write a resumable checkpoint here")
@click.option("--resume", type=click.Path(dir_okay=False, exists=True), help="resume from a checkpoint")
@click.option("--ring", is_flag=True, help="sites accumulate partials among themselves (in-process only)")
@click.option("--round-timeout", type=float)
@click.option("--port-file", type=click.Path(dir_okay=False), help="publish the bound port here")
@_transcript_opt
@guarded
def serve(config_path, seed, workers, out, listen, n_sites, freeze_alpha, checkpoint, resume, ring, round_timeout,
          port_file, transcript):
    """Aggregator: coordinates sites, sees only aggregate statistics."""
    cfg = _config(config_path, seed, workers, freeze_alpha, round_timeout=round_timeout)
    if ring:
        raise ValidationError("ring aggregation is available with the in-process transport only")
    n_sites = n_sites or cfg.n_sites or len(cfg.endpoints)
    if not n_sites:
        raise ValidationError("the number of sites must be given (--sites or n_sites)")
    tr = Transcript() if transcript else None
    out = _out_dir(out)
    try:
        _, report = serve_session(cfg.declared_shape(), cfg.fit_config(), listen, n_sites, tr, cfg.round_timeout,
                                  checkpoint or cfg.checkpoint, resume, port_file=port_file)
    finally:
        if tr is not None:
            tr.save(transcript)
    io.write_json(os.path.join(out, "report.json"), io.report_to_dict(report))
    click.echo(f"session finished after {report.outer_iterations} rounds")


@main.command()
@with_common
@click.option("--labels", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--connect", "endpoint", help="aggregator host:port")
@click.option("--port-file", type=click.Path(dir_okay=False), help="read the aggregator port from this file")
@click.option("--site-id", type=int)
@click.option("--protocol-version", type=int, default=PROTOCOL_VERSION, show_default=True)
@click.option("--fail-at-round", type=int, hidden=True)
@guarded
def site(config_path, seed, workers, labels, out, endpoint, port_file, site_id, protocol_version, fail_at_round):
    """Data site: runs local E-steps and writes its own posterior shard."""
    cfg = _config(config_path, seed, workers)
    site_id = site_id or cfg.site_id
    endpoint = _resolve_endpoint(endpoint, port_file, cfg)
    table = io.read_labels(labels)
    result = run_site(endpoint, site_id, table, workers=cfg.workers, version=protocol_version,
                      idle_timeout=max(cfg.round_timeout * 4, 60.0), fail_at_round=fail_at_round)
    if result is None:
        raise ProtocolError("site stopped before the session finished")
    out = _out_dir(out)
    io.write_posteriors(os.path.join(out, f"posteriors_site{site_id}.csv"), result.instance_ids, result.posteriors)


def _resolve_endpoint(endpoint, port_file, cfg):
    if port_file:
        host = (endpoint or "127.0.0.1:0").rpartition(":")[0] or "127.0.0.1"
        return f"{host}:{wait_for_port_file(port_file)}"
    if endpoint:
        return endpoint
    if cfg.endpoints:
        return cfg.endpoints[0]
    raise ValidationError("no aggregator endpoint given (--connect or endpoints)")


@main.command()
@with_common
@click.option("--labels", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--rank", type=int, required=True, help="1 coordinates; 2..D connect to peer 1")
@click.option("--peers", "n_peers", type=int, required=True)
@click.option("--endpoint", default="127.0.0.1:7070", show_default=True, help="peer 1 address")
@click.option("--port-file", type=click.Path(dir_okay=False))
@click.option("--freeze-alpha", is_flag=True)
@_transcript_opt
@guarded
def peer(config_path, seed, workers, labels, out, rank, n_peers, endpoint, port_file, freeze_alpha, transcript):
    """Serverless mode: peer 1 also acts as the aggregator between its own E-steps."""
    cfg = _config(config_path, seed, workers, freeze_alpha)
    table = io.read_labels(labels)
    out = _out_dir(out)
    if rank == 1:
        tr = Transcript() if transcript else None
        local = SiteNode(1, table, workers=cfg.workers)
        try:
            agg, report = serve_session(cfg.declared_shape(), cfg.fit_config(), endpoint, n_peers - 1, tr,
                                        cfg.round_timeout, cfg.checkpoint, local_site=local, port_file=port_file)
        finally:
            if tr is not None:
                tr.save(transcript)
        io.write_json(os.path.join(out, "report.json"), io.report_to_dict(report))
        res = agg.local_result
    else:
        res = run_site(_resolve_endpoint(endpoint, port_file, cfg), rank, table, workers=cfg.workers,
                       idle_timeout=max(cfg.round_timeout * 4, 60.0))
        if res is None:
            raise ProtocolError("peer stopped before the session finished")
    io.write_posteriors(os.path.join(out, f"posteriors_site{rank}.csv"), res.instance_ids, res.posteriors)


@main.command()
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), help="key = value generative spec")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, help="sampling seed (overrides --spec)")
@guarded
def sample(spec_path, out, seed):
    """Draw a synthetic dataset: writes labels.csv and truth.csv."""
    text = ""
    if spec_path:
        try:
            with open(spec_path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise io.InputFormatError(f"{spec_path}: cannot read ({exc.strerror})") from None
    spec = io.parse_sample_spec(text, spec_path or "spec")
    if seed is not None:
        spec.rng_seed = seed
    s = sample_dataset(spec)
    out = _out_dir(out)
    io.write_labels(os.path.join(out, "labels.csv"), s.table)
    io.write_truth(os.path.join(out, "truth.csv"), s.table.instance_ids, s.true_class, s.theta)


@main.command()
@click.option("--posteriors", required=True, type=click.Path(dir_okay=False))
@click.option("--truth", required=True, type=click.Path(dir_okay=False))
@click.option("--labels", type=click.Path(dir_okay=False), help="also score each classifier and majority vote")
@click.option("--out", type=click.Path(dir_okay=False), help="write the metrics as JSON")
@guarded
def evaluate(posteriors, truth, labels, out):
    """Accuracy of predicted classes against the truth file."""
    ids, post, pred = io.read_posteriors(posteriors)
    tids, true_class, _ = io.read_truth(truth)
    if len(ids) == len(tids) and ids != tids:
        order = {t: i for i, t in enumerate(ids)}
        if set(order) != set(tids):
            raise ValidationError("posterior and truth files list different instance ids")
        pred = pred[[order[t] for t in tids]]
    class_labels = None
    if labels:
        table = io.read_labels(labels)
        class_labels = table.class_labels
    rep = accuracy_report(pred, true_class, class_labels, post.shape[1])
    text = json.dumps(rep.as_dict(), indent=2)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    click.echo(text)


@main.command()
@click.option("--transcript", required=True, type=click.Path(dir_okay=False, exists=True))
@click.option("--out", type=click.Path(dir_okay=False))
@guarded
def audit(transcript, out):
    """Privacy audit of a recorded session transcript."""
    entries = Transcript.load(transcript)
    if not len(entries.entries):
        raise ValidationError(f"{transcript}: transcript records no messages")
    report = audit_privacy(entries)
    for line in report.lines():
        click.echo(line)
    if out:
        io.write_json(out, report.as_dict())
    if not report.passed:
        sys.exit(EXIT_PROTOCOL)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def api(host, port):
    """Serve the HTTP API."""
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
