import json
import subprocess
import sys

import numpy as np
import pytest
from click.testing import CliRunner

from bc3e import io
from bc3e.cli import main
from bc3e.distributed.protocol import SiteAssignment

SHAPE_CONF = "n_classes = 3\nn_classifiers = 3\nclusters_per_clustering = 3, 3\nround_timeout = 60\n"


def run(*args):
    res = CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)
    return res


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    res = run("sample", "--out", d)
    assert res.exit_code == 0, res.output
    return d


@pytest.fixture(scope="module")
def fitted(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    res = run("fit", "--labels", data / "labels.csv", "--out", out)
    assert res.exit_code == 0, res.output
    return out


def test_sample_is_deterministic(data, tmp_path):
    assert run("sample", "--out", tmp_path).exit_code == 0
    assert (tmp_path / "labels.csv").read_bytes() == (data / "labels.csv").read_bytes()
    assert (tmp_path / "truth.csv").read_bytes() == (data / "truth.csv").read_bytes()
    assert run("sample", "--out", tmp_path / "b", "--seed", "3").exit_code == 0
    assert (tmp_path / "b" / "labels.csv").read_bytes() != (data / "labels.csv").read_bytes()


def test_sample_with_spec_file(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("n_instances = 25\nclusters = 2, 4\n")
    assert run("sample", "--spec", spec, "--out", tmp_path / "o").exit_code == 0
    t = io.read_labels(tmp_path / "o" / "labels.csv")
    assert t.n_instances == 25 and t.n_clusterings == 2
    spec.write_text("bogus = 1\n")
    res = run("sample", "--spec", spec, "--out", tmp_path / "p")
    assert res.exit_code == 2 and "spec.txt:1" in res.output


def test_fit_outputs(fitted):
    ids, post, pred = io.read_posteriors(fitted / "posteriors.csv")
    assert len(ids) == 500
    assert np.max(np.abs(post.sum(axis=1) - 1.0)) <= 1e-12
    report = json.loads((fitted / "report.json").read_text())
    assert report["converged"] and len(report["elbo_trace"]) == report["outer_iterations"]


def test_fit_is_byte_identical_across_reruns_and_workers(data, fitted, tmp_path):
    assert run("fit", "--labels", data / "labels.csv", "--out", tmp_path / "a", "--workers", "3").exit_code == 0
    for name in ("posteriors.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (fitted / name).read_bytes()


def test_fit_freeze_alpha(data, tmp_path):
    assert run("fit", "--labels", data / "labels.csv", "--out", tmp_path, "--freeze-alpha").exit_code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert all(a == report["initial_alpha"] for a in report["alpha_trace"])
    assert report["alpha"] == report["initial_alpha"]


def test_fit_with_config_and_env(data, tmp_path, monkeypatch):
    conf = tmp_path / "run.conf"
    conf.write_text("max_outer_iters = 3\n")
    monkeypatch.setenv("BC3E_SEED", "5")
    assert run("fit", "--config", conf, "--labels", data / "labels.csv", "--out", tmp_path / "o").exit_code == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["outer_iterations"] == 3


def test_fit_out_of_range_label_exits_2(tmp_path):
    labels = tmp_path / "labels.csv"
    labels.write_text("id,c1,c2,g1\na,1,2,1\nb,2,2,2\nc,1,1,2\n")
    conf = tmp_path / "run.conf"
    conf.write_text("n_classes = 2\nclusters_per_clustering = 1\n")
    res = run("fit", "--config", conf, "--labels", labels, "--out", tmp_path / "o")
    assert res.exit_code == 2
    assert "row=1, column=1, value=2" in res.output


def test_fit_parse_error_exits_2(tmp_path):
    labels = tmp_path / "labels.csv"
    labels.write_text("id,c1,g1\na,1,one\n")
    res = run("fit", "--labels", labels, "--out", tmp_path / "o")
    assert res.exit_code == 2 and "labels.csv:2" in res.output


def test_evaluate(data, fitted, tmp_path):
    res = run("evaluate", "--posteriors", fitted / "posteriors.csv", "--truth", data / "truth.csv",
              "--labels", data / "labels.csv", "--out", tmp_path / "m.json")
    assert res.exit_code == 0
    m = json.loads((tmp_path / "m.json").read_text())
    assert 0.0 <= m["accuracy"] <= 1.0 and len(m["per_classifier"]) == 3
    ids, _, truth_theta = io.read_truth(data / "truth.csv")
    perfect = tmp_path / "perfect.csv"
    io.write_posteriors(perfect, ids, truth_theta)
    res = run("evaluate", "--posteriors", perfect, "--truth", data / "truth.csv")
    assert json.loads(res.output)["accuracy"] == 1.0


def test_evaluate_length_mismatch_exits_2(data, tmp_path):
    short = tmp_path / "short.csv"
    io.write_posteriors(short, ["x1"], np.array([[1.0, 0.0, 0.0]]))
    assert run("evaluate", "--posteriors", short, "--truth", data / "truth.csv").exit_code == 2


def _py(*args):
    return [sys.executable, "-m", "bc3e.cli", *[str(a) for a in args]]


def _wait(procs, timeout=240):
    outs = []
    for p in procs:
        out, err = p.communicate(timeout=timeout)
        outs.append((p.returncode, out.decode(), err.decode()))
    return outs


@pytest.fixture(scope="module")
def shards(data, tmp_path_factory):
    d = tmp_path_factory.mktemp("shards")
    table = io.read_labels(data / "labels.csv")
    conf = d / "run.conf"
    conf.write_text(SHAPE_CONF)
    paths = {}
    for split, fractions in (("6040", [0.6, 0.4]), ("three", [1, 1, 1])):
        assign = SiteAssignment.split_fractions(table.n_instances, fractions)
        for s, shard in assign.shards(table).items():
            p = d / f"{split}_{s}.csv"
            io.write_labels(p, shard)
            paths[(split, s)] = p
    return conf, paths


def test_socket_serve_and_two_sites_match_fit(shards, fitted, tmp_path):
    conf, paths = shards
    port = tmp_path / "port"
    tr = tmp_path / "transcript.jsonl"
    agg = subprocess.Popen(_py("serve", "--config", conf, "--out", tmp_path / "agg", "--listen", "127.0.0.1:0",
                               "--sites", 2, "--port-file", port, "--transcript", tr),
                           stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    sites = [subprocess.Popen(_py("site", "--config", conf, "--labels", paths[("6040", s)], "--out", tmp_path / "s",
                                  "--port-file", port, "--site-id", s),
                              stdout=subprocess.PIPE, stderr=subprocess.PIPE) for s in (1, 2)]
    results = _wait([agg] + sites)
    assert all(code == 0 for code, _, _ in results), results
    dist = json.loads((tmp_path / "agg" / "report.json").read_text())
    cent = json.loads((fitted / "report.json").read_text())
    assert np.allclose(dist["alpha"], cent["alpha"], rtol=1e-10, atol=0)
    for a, b in zip(dist["beta"], cent["beta"]):
        assert np.allclose(a, b, rtol=1e-10, atol=0)
    # bit-equal in practice: the aggregation is exact
    assert dist["alpha"] == cent["alpha"] and dist["beta"] == cent["beta"]
    _, post, _ = io.read_posteriors(fitted / "posteriors.csv")
    shard1 = io.read_posteriors(tmp_path / "s" / "posteriors_site1.csv")[1]
    shard2 = io.read_posteriors(tmp_path / "s" / "posteriors_site2.csv")[1]
    assert np.array_equal(np.vstack([shard1, shard2]), post)
    res = run("audit", "--transcript", tr, "--out", tmp_path / "audit.json")
    assert res.exit_code == 0 and "schema: PASS" in res.output


def test_socket_peer_mode_matches_fit(shards, fitted, tmp_path):
    conf, paths = shards
    port = tmp_path / "port"
    procs = [subprocess.Popen(_py("peer", "--config", conf, "--labels", paths[("three", 1)], "--out", tmp_path / "p",
                                  "--rank", 1, "--peers", 3, "--endpoint", "127.0.0.1:0", "--port-file", port),
                              stdout=subprocess.PIPE, stderr=subprocess.PIPE)]
    for r in (2, 3):
        procs.append(subprocess.Popen(_py("peer", "--config", conf, "--labels", paths[("three", r)],
                                          "--out", tmp_path / "p", "--rank", r, "--peers", 3, "--port-file", port),
                                      stdout=subprocess.PIPE, stderr=subprocess.PIPE))
    results = _wait(procs)
    assert all(code == 0 for code, _, _ in results), results
    dist = json.loads((tmp_path / "p" / "report.json").read_text())
    cent = json.loads((fitted / "report.json").read_text())
    assert dist["alpha"] == cent["alpha"] and dist["beta"] == cent["beta"]
    assert dist["elbo_trace"] == cent["elbo_trace"]


def test_site_with_wrong_protocol_version_fails(shards, tmp_path):
    conf, paths = shards
    port = tmp_path / "port"
    agg = subprocess.Popen(_py("serve", "--config", conf, "--out", tmp_path / "agg", "--listen", "127.0.0.1:0",
                               "--sites", 1, "--port-file", port, "--round-timeout", 20),
                           stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    site = subprocess.Popen(_py("site", "--config", conf, "--labels", paths[("6040", 1)], "--out", tmp_path / "s",
                                "--port-file", port, "--protocol-version", 2),
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    (agg_code, _, agg_err), (site_code, _, site_err) = _wait([agg, site])
    assert agg_code == 4 and "version" in agg_err
    assert site_code == 4


def test_serve_rejects_ring_and_missing_sites(shards, tmp_path):
    conf, _ = shards
    assert run("serve", "--config", conf, "--out", tmp_path, "--ring", "--sites", 2).exit_code == 2
    assert run("serve", "--config", conf, "--out", tmp_path).exit_code == 2


def test_audit_failure_exits_4(tmp_path):
    tr = tmp_path / "bad.jsonl"
    payload = json.dumps({"type": "ACK", "version": 1, "round": 0, "body": {"site_id": 1, "status": "hello",
                                                                            "ids": ["x1"]}})
    tr.write_text(json.dumps({"offset": 0, "sender": "site1", "receiver": "aggregator", "payload": payload}) + "\n")
    res = run("audit", "--transcript", tr)
    assert res.exit_code == 4 and "schema: FAIL offsets=0" in res.output


def test_audit_of_empty_transcript_is_refused(tmp_path):
    tr = tmp_path / "empty.jsonl"
    tr.write_text("")
    res = run("audit", "--transcript", tr)
    assert res.exit_code == 2 and "records no messages" in res.output
