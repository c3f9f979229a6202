"""Request/response models for the HTTP API. Labels are 1-based, as in files."""

from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from ..estimation import FitConfig


class FitOptions(BaseModel):
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


class LabelsIn(BaseModel):
    ids: Optional[List[str]] = None
    class_labels: List[List[int]]
    cluster_labels: List[List[int]]


class FitRequest(LabelsIn):
    n_classes: Optional[int] = None
    clusters_per_clustering: Optional[List[int]] = None
    options: FitOptions = Field(default_factory=FitOptions)


class FitReportOut(BaseModel):
    elbo_trace: List[float]
    outer_iterations: int
    converged: bool
    alpha: List[float]
    beta: List[List[List[float]]]
    alpha_trace: List[List[float]]
    newton_unconverged: int
    estep_unconverged: int
    initial_alpha: Optional[List[float]] = None


class FitResponse(BaseModel):
    ids: List[str]
    posteriors: List[List[float]]
    predicted: List[int]
    report: FitReportOut


class SampleRequest(BaseModel):
    n_instances: int = 500
    n_classes: int = 3
    n_classifiers: int = 3
    clusters: List[int] = Field(default_factory=lambda: [3, 3])
    alpha: Optional[List[float]] = None
    beta: Optional[List[List[List[float]]]] = None
    purity: float = 0.8
    classifier_noise: float = 0.3
    seed: int = 42


class SampleResponse(BaseModel):
    ids: List[str]
    class_labels: List[List[int]]
    cluster_labels: List[List[int]]
    true_class: List[int]
    theta: List[List[float]]


class EvaluateRequest(BaseModel):
    predicted: List[int]
    truth: List[int]
    class_labels: Optional[List[List[int]]] = None
    n_classes: Optional[int] = None


class EvaluateResponse(BaseModel):
    accuracy: Optional[float]
    per_classifier: List[float]
    best_component: Optional[float]
    majority_vote: Optional[float]


class TranscriptEntryIn(BaseModel):
    offset: int
    sender: str
    receiver: str
    payload: str


class AuditRequest(BaseModel):
    entries: List[TranscriptEntryIn]


class RuleOut(BaseModel):
    passed: bool
    offsets: List[int]
    notes: List[str]


class AuditResponse(BaseModel):
    passed: bool
    messages: int
    rules: Dict[str, RuleOut]
