"""HTTP wrapper around the library; the CLI's ``--server`` mode is a client of this."""

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__
from ..distributed.audit import audit_privacy
from ..distributed.transport import TranscriptEntry
from ..errors import NumericalError, ProtocolError, ValidationError
from ..estimation import FitConfig, fit
from ..io import report_to_dict
from ..model import LabelTable, ProblemShape
from ..synth import GenerativeSpec, accuracy_report, sample_dataset, standard_spec
from .schemas import (AuditRequest, AuditResponse, EvaluateRequest, EvaluateResponse, FitRequest, FitResponse,
                      SampleRequest, SampleResponse)

app = FastAPI(title="bc3e", version=__version__)


@app.exception_handler(ValidationError)
def _validation(_, exc):
    return JSONResponse(status_code=422, content={"detail": str(exc), "kind": type(exc).__name__})


@app.exception_handler(NumericalError)
def _numerical(_, exc):
    return JSONResponse(status_code=500, content={"detail": str(exc), "kind": type(exc).__name__})


@app.exception_handler(ProtocolError)
def _protocol(_, exc):
    return JSONResponse(status_code=400, content={"detail": str(exc), "kind": type(exc).__name__})


def _table(req) -> LabelTable:
    n = len(req.class_labels) or len(req.cluster_labels)
    classes = np.array(req.class_labels, dtype=np.int64).reshape(n, -1) if req.class_labels else np.zeros((n, 0))
    clusters = np.array(req.cluster_labels, dtype=np.int64).reshape(n, -1) if req.cluster_labels else np.zeros((n, 0))
    return LabelTable.from_one_based(classes, clusters, req.ids)


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/fit", response_model=FitResponse)
def fit_endpoint(req: FitRequest):
    table = _table(req)
    shape = table.infer_shape(req.n_classes, req.clusters_per_clustering)
    o = req.options
    cfg = FitConfig(outer_tol=o.outer_tol, max_outer_iters=o.max_outer_iters, eps_beta=o.eps_beta,
                    alpha_floor=o.alpha_floor, newton_max_iters=o.newton_max_iters, newton_tol=o.newton_tol,
                    rng_seed=o.seed, freeze_alpha=o.freeze_alpha, inner_tol=o.inner_tol,
                    max_inner_iters=o.max_inner_iters)
    report = fit(table, shape, cfg, workers=o.workers)
    return {
        "ids": table.instance_ids,
        "posteriors": report.posteriors.tolist(),
        "predicted": (report.predicted_class + 1).tolist(),
        "report": report_to_dict(report),
    }


@app.post("/sample", response_model=SampleResponse)
def sample_endpoint(req: SampleRequest):
    spec = standard_spec(req.n_instances, req.n_classes, req.n_classifiers, req.clusters, req.alpha, req.purity,
                         req.classifier_noise, req.seed)
    if req.beta is not None:
        spec = GenerativeSpec(spec.shape, spec.true_alpha, [np.array(b) for b in req.beta], req.classifier_noise,
                              req.seed)
    s = sample_dataset(spec)
    return {
        "ids": s.table.instance_ids,
        "class_labels": (s.table.class_labels + 1).tolist(),
        "cluster_labels": (s.table.cluster_labels + 1).tolist(),
        "true_class": (s.true_class + 1).tolist(),
        "theta": s.theta.tolist(),
    }


@app.post("/evaluate", response_model=EvaluateResponse)
def evaluate_endpoint(req: EvaluateRequest):
    labels = None
    if req.class_labels is not None:
        labels = np.array(req.class_labels, dtype=np.int64).reshape(len(req.truth), -1) - 1
    rep = accuracy_report(np.array(req.predicted) - 1, np.array(req.truth) - 1, labels, req.n_classes)
    return rep.as_dict()


@app.post("/audit", response_model=AuditResponse)
def audit_endpoint(req: AuditRequest):
    entries = [TranscriptEntry(e.offset, e.sender, e.receiver, e.payload.encode("utf-8")) for e in req.entries]
    return audit_privacy(entries).as_dict()
