"""File formats and run configuration.

Labels are 1-based in every file and 0-based in memory; conversion happens
only here. Floats are written with ``repr`` (shortest round-trip form), so a
write/read cycle reproduces every value exactly.
"""

import csv
import json
import os
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ValidationError
from .estimation import FitConfig, FitReport
from .model import LabelTable, ModelParams, ProblemShape, predicted_class
from .synth import GenerativeSpec, separated_beta

ENV_PREFIX = "BC3E_"


class InputFormatError(ValidationError):
    """A file could not be parsed; the message names the file and line."""


def _fmt(x) -> str:
    return repr(float(x))


def _read_rows(path) -> Tuple[List[str], List[Tuple[int, List[str]]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise InputFormatError(f"{path}: cannot read ({exc.strerror})") from None
    if not rows:
        raise InputFormatError(f"{path}: empty file")
    header = [c.strip() for c in rows[0][1]]
    body = rows[1:]
    for line, r in body:
        if len(r) != len(header):
            raise InputFormatError(f"{path}:{line}: expected {len(header)} fields, found {len(r)}")
    return header, body


def _int(path, line, text):
    try:
        return int(text.strip())
    except ValueError:
        raise InputFormatError(f"{path}:{line}: {text.strip()!r} is not an integer label") from None


def _float(path, line, text):
    try:
        return float(text.strip())
    except ValueError:
        raise InputFormatError(f"{path}:{line}: {text.strip()!r} is not a number") from None


# -- label tables ---------------------------------------------------------

def read_labels(path) -> LabelTable:
    """``id,c1..c{r1},g1..g{r2}`` with 1-based labels."""
    header, body = _read_rows(path)
    if not header or header[0] != "id":
        raise InputFormatError(f"{path}:1: header must start with 'id'")
    cls_cols = [i for i, h in enumerate(header) if h.startswith("c")]
    clu_cols = [i for i, h in enumerate(header) if h.startswith("g")]
    if sorted(cls_cols + clu_cols) != list(range(1, len(header))):
        raise InputFormatError(f"{path}:1: columns must be 'id', then c1..cR1, then g1..gR2")
    expected = [f"c{l + 1}" for l in range(len(cls_cols))] + [f"g{m + 1}" for m in range(len(clu_cols))]
    if header[1:] != expected:
        raise InputFormatError(f"{path}:1: columns must be numbered c1.. then g1.. in order")
    if not body:
        raise InputFormatError(f"{path}: no instances")
    ids = [r[0].strip() for _, r in body]
    classes = [[_int(path, line, r[i]) for i in cls_cols] for line, r in body]
    clusters = [[_int(path, line, r[i]) for i in clu_cols] for line, r in body]
    n = len(body)
    return LabelTable.from_one_based(np.array(classes, dtype=np.int64).reshape(n, len(cls_cols)),
                                     np.array(clusters, dtype=np.int64).reshape(n, len(clu_cols)), ids)


def write_labels(path, table: LabelTable):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"c{l + 1}" for l in range(table.n_classifiers)]
                   + [f"g{m + 1}" for m in range(table.n_clusterings)])
        for i, ident in enumerate(table.instance_ids):
            w.writerow([ident] + [int(v) + 1 for v in table.class_labels[i]]
                       + [int(v) + 1 for v in table.cluster_labels[i]])


# -- posteriors and truth -------------------------------------------------

def write_posteriors(path, ids, posteriors):
    """``id,p1..pk,predicted`` (predicted is 1-based)."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    pred = predicted_class(posteriors)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"p{i + 1}" for i in range(posteriors.shape[1])] + ["predicted"])
        for ident, row, p in zip(ids, posteriors, pred):
            w.writerow([ident] + [_fmt(v) for v in row] + [int(p) + 1])


def read_posteriors(path):
    """Returns (ids, N x k posteriors, 0-based predicted classes)."""
    header, body = _read_rows(path)
    k = len(header) - 2
    if header[0] != "id" or header[-1] != "predicted" or header[1:-1] != [f"p{i + 1}" for i in range(k)] or k < 1:
        raise InputFormatError(f"{path}:1: header must be id,p1..pk,predicted")
    ids = [r[0].strip() for _, r in body]
    post = np.array([[_float(path, line, v) for v in r[1:-1]] for line, r in body]).reshape(len(body), k)
    pred = np.array([_int(path, line, r[-1]) - 1 for line, r in body], dtype=np.int64)
    return ids, post, pred


def write_truth(path, ids, true_class, theta):
    """``id,true_class,theta1..thetak`` (true_class is 1-based)."""
    theta = np.asarray(theta, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "true_class"] + [f"theta{i + 1}" for i in range(theta.shape[1])])
        for ident, c, row in zip(ids, true_class, theta):
            w.writerow([ident, int(c) + 1] + [_fmt(v) for v in row])


def read_truth(path):
    """Returns (ids, 0-based true classes, theta or None when absent)."""
    header, body = _read_rows(path)
    if header[:2] != ["id", "true_class"]:
        raise InputFormatError(f"{path}:1: header must start with id,true_class")
    ids = [r[0].strip() for _, r in body]
    truth = np.array([_int(path, line, r[1]) - 1 for line, r in body], dtype=np.int64)
    theta = None
    if len(header) > 2:
        theta = np.array([[_float(path, line, v) for v in r[2:]] for line, r in body])
    return ids, truth, theta


# -- reports --------------------------------------------------------------

def report_to_dict(report: FitReport) -> Dict:
    out = {
        "elbo_trace": [float(v) for v in report.elbo_trace],
        "outer_iterations": int(report.outer_iterations),
        "converged": bool(report.converged),
        "alpha": report.params.alpha.tolist(),
        "beta": [b.tolist() for b in report.params.beta],
        "alpha_trace": [a.tolist() for a in report.alpha_trace],
        "newton_unconverged": int(report.newton_unconverged),
        "estep_unconverged": int(report.estep_unconverged),
    }
    if report.initial_params is not None:
        out["initial_alpha"] = report.initial_params.alpha.tolist()
    return out


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def read_report(path) -> Dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    data["params"] = ModelParams(np.array(data["alpha"]), [np.array(b) for b in data["beta"]])
    return data


# -- configuration --------------------------------------------------------

def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _int_list(text):
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


def _str_list(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


@dataclass
class RunConfig:
    """Flat key = value run configuration; every fit default matches :class:`FitConfig`."""

    mode: str = "centralized"
    n_classes: Optional[int] = None
    n_classifiers: Optional[int] = None
    clusters_per_clustering: Optional[List[int]] = None
    outer_tol: float = FitConfig.outer_tol
    max_outer_iters: int = FitConfig.max_outer_iters
    eps_beta: float = FitConfig.eps_beta
    alpha_floor: float = FitConfig.alpha_floor
    newton_max_iters: int = FitConfig.newton_max_iters
    newton_tol: float = FitConfig.newton_tol
    seed: int = FitConfig.rng_seed
    freeze_alpha: bool = FitConfig.freeze_alpha
    inner_tol: float = FitConfig.inner_tol
    max_inner_iters: int = FitConfig.max_inner_iters
    workers: int = 1
    endpoints: List[str] = field(default_factory=list)
    n_sites: Optional[int] = None
    site_id: int = 1
    round_timeout: float = 60.0
    ring: bool = False
    checkpoint: Optional[str] = None
    labels: Optional[str] = None
    out: Optional[str] = None
    transcript: Optional[str] = None

    _CONVERT = {
        "n_classes": int, "n_classifiers": int, "clusters_per_clustering": _int_list, "outer_tol": float,
        "max_outer_iters": int, "eps_beta": float, "alpha_floor": float, "newton_max_iters": int,
        "newton_tol": float, "seed": int, "freeze_alpha": _parse_bool, "inner_tol": float,
        "max_inner_iters": int, "workers": int, "endpoints": _str_list, "n_sites": int, "site_id": int,
        "round_timeout": float, "ring": _parse_bool,
    }
    MODES = ("centralized", "aggregator", "site", "peer")

    def fit_config(self) -> FitConfig:
        return FitConfig(outer_tol=self.outer_tol, max_outer_iters=self.max_outer_iters, eps_beta=self.eps_beta,
                         alpha_floor=self.alpha_floor, newton_max_iters=self.newton_max_iters,
                         newton_tol=self.newton_tol, rng_seed=self.seed, freeze_alpha=self.freeze_alpha,
                         inner_tol=self.inner_tol, max_inner_iters=self.max_inner_iters)

    def shape_for(self, table: LabelTable) -> ProblemShape:
        return table.infer_shape(self.n_classes, self.clusters_per_clustering)

    def declared_shape(self) -> ProblemShape:
        """Shape known without data (what an aggregator works from)."""
        if self.n_classes is None or self.clusters_per_clustering is None:
            raise ValidationError("n_classes and clusters_per_clustering must be configured for the aggregator")
        r2 = len(self.clusters_per_clustering)
        r1 = self.n_classifiers if self.n_classifiers is not None else (0 if r2 else 1)
        return ProblemShape(1, self.n_classes, r1, r2, tuple(self.clusters_per_clustering))

    def set(self, key, value, where="config"):
        key = key.strip().lower().replace("-", "_")
        names = {f.name for f in fields(self)}
        if key not in names:
            raise ValidationError(f"{where}: unknown key {key!r}")
        conv = self._CONVERT.get(key, str)
        try:
            setattr(self, key, conv(value))
        except ValueError as exc:
            raise ValidationError(f"{where}: bad value for {key}: {exc}") from None
        if key == "mode" and self.mode not in self.MODES:
            raise ValidationError(f"{where}: mode must be one of {', '.join(self.MODES)}")


def parse_config_text(text: str, source: str = "config") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputFormatError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        cfg.set(key, value.strip(), f"{source}:{lineno}")
    return cfg


def load_config(path=None, environ=None) -> RunConfig:
    """Read a config file (if given), then apply ``BC3E_<KEY>`` environment overrides."""
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = parse_config_text(fh.read(), str(path))
        except OSError as exc:
            raise InputFormatError(f"{path}: cannot read ({exc.strerror})") from None
    else:
        cfg = RunConfig()
    environ = os.environ if environ is None else environ
    for name, value in sorted(environ.items()):
        if name.startswith(ENV_PREFIX):
            cfg.set(name[len(ENV_PREFIX):], value, f"environment {name}")
    return cfg


# -- generative specs -----------------------------------------------------

def parse_sample_spec(text: str, source: str = "spec") -> GenerativeSpec:
    """Key-value generative spec.

    Keys: n_instances, n_classes, n_classifiers, clusters (comma list),
    alpha (comma list, default 0.5 each), purity (default 0.8) or explicit
    ``beta<m> = r1c1,r1c2 ; r2c1,...``, classifier_noise, seed.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputFormatError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key.lower()] = (lineno, value)

    def get(key, conv, default):
        if key not in values:
            return default
        lineno, value = values.pop(key)
        try:
            return conv(value)
        except ValueError as exc:
            raise InputFormatError(f"{source}:{lineno}: bad value for {key}: {exc}") from None

    n = get("n_instances", int, 500)
    k = get("n_classes", int, 3)
    r1 = get("n_classifiers", int, 3)
    clusters = get("clusters", _int_list, [3, 3])
    alpha = get("alpha", lambda v: [float(x) for x in v.split(",")], [0.5] * k)
    purity = get("purity", float, 0.8)
    noise = get("classifier_noise", float, 0.3)
    seed = get("seed", int, 42)
    beta = []
    for m, km in enumerate(clusters):
        default = separated_beta(k, km, purity, shift=m)
        b = get(f"beta{m + 1}", lambda v: [[float(x) for x in row.split(",")] for row in v.split(";")], default)
        beta.append(np.asarray(b, dtype=np.float64))
    if values:
        key = sorted(values, key=lambda k_: values[k_][0])[0]
        raise InputFormatError(f"{source}:{values[key][0]}: unknown key {key!r}")
    shape = ProblemShape(n, k, r1, len(clusters), tuple(clusters))
    return GenerativeSpec(shape, np.asarray(alpha, dtype=np.float64), beta, noise, seed)
