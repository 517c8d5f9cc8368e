"""Piecewise exponential additive mixed survival models.

Survival tasks are turned into Poisson regressions on interval-expanded
data; the log hazard is an additive predictor of penalized splines,
linear effects and ridge-penalized random effects, optionally joined by
a small neural network trained end to end on the same likelihood.
"""

__version__ = "0.1.0"

from .basis import BasisSpec, PenaltyMatrix, difference_penalty, evaluate_basis, tensor_basis
from .inference import CifSet, SurvivalCurve, cifs, predict_hazard, survival_curve
from .metrics import EvalResult, brier, ibs_at_quartiles, kaplan_meier
from .model import DeepHead, HazardModel, StructuredTerm, load_model, save_model
from .ped import (
    CutPoints,
    PedFrame,
    SurvivalRecord,
    expand_competing_risks,
    make_cut_points,
    to_ped,
)
from .simulate import Scenario, get_scenario, make_scenario_dataset, sample_survival_time
from .training import TrainConfig, TrainReport, fit, gradient, penalized_objective, poisson_nll, tune

__all__ = [
    "BasisSpec", "PenaltyMatrix", "difference_penalty", "evaluate_basis", "tensor_basis",
    "CifSet", "SurvivalCurve", "cifs", "predict_hazard", "survival_curve",
    "EvalResult", "brier", "ibs_at_quartiles", "kaplan_meier",
    "DeepHead", "HazardModel", "StructuredTerm", "load_model", "save_model",
    "CutPoints", "PedFrame", "SurvivalRecord", "expand_competing_risks",
    "make_cut_points", "to_ped",
    "Scenario", "get_scenario", "make_scenario_dataset", "sample_survival_time",
    "TrainConfig", "TrainReport", "fit", "gradient", "penalized_objective",
    "poisson_nll", "tune",
]
