"""Consensus of classifier and cluster ensembles by variational EM (BC3E).

Centralized use::

    from bc3e import fit, FitConfig
    report = fit(table, table.infer_shape())

Row-distributed sessions live in :mod:`bc3e.distributed`.
"""

__version__ = "0.1.0"

from .errors import (AllNegativeInfinity, BC3EError, DomainError, LengthMismatch, NumericalError, OutOfRangeLabel,
                     ProtocolError, ProtocolViolation, ShapeMismatch, TransportTimeout, ValidationError)
from .estimation import (FitConfig, FitReport, SufficientStats, alpha_gradient, alpha_objective, fit, init_params,
                         m_step, m_step_alpha, m_step_beta, sufficient_stats)
from .inference import (ElboBreakdown, EStepConfig, compute_elbo, e_step, e_step_instance, update_gamma,
                        update_phi)
from .model import LabelTable, ModelParams, ProblemShape, VariationalState, predicted_class, validate_table
from .special import digamma, log_gamma, normalize_in_log_space, trigamma
from .synth import GenerativeSpec, accuracy_report, evaluate_accuracy, majority_vote, sample_dataset, standard_spec

__all__ = [
    "AllNegativeInfinity", "BC3EError", "DomainError", "EStepConfig", "ElboBreakdown", "FitConfig", "FitReport",
    "GenerativeSpec", "LabelTable", "LengthMismatch", "ModelParams", "NumericalError", "OutOfRangeLabel",
    "ProblemShape", "ProtocolError", "ProtocolViolation", "ShapeMismatch", "SufficientStats", "TransportTimeout",
    "ValidationError", "VariationalState", "accuracy_report", "alpha_gradient", "alpha_objective", "compute_elbo",
    "digamma", "e_step", "e_step_instance", "evaluate_accuracy", "fit", "init_params", "log_gamma",
    "m_step", "m_step_alpha", "m_step_beta", "majority_vote", "normalize_in_log_space", "predicted_class",
    "sample_dataset", "standard_spec", "sufficient_stats", "trigamma", "update_gamma", "update_phi",
    "validate_table",
]
