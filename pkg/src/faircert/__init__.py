"""Certified bounds and certified training for individual fairness of ReLU networks."""

from faircert.data import Dataset, Schema, accuracy, census_like, e_dfc, empirical_wasserstein, group_metrics, halfmoons, load_csv, save_csv
from faircert.dif import DifProblem, DifReport, certify_dif, dif_lower, dif_oracle, dif_upper, hoeffding_n, sweep_gamma
from faircert.errors import (
    BudgetError, ConvergenceError, DimensionError, DivergenceError, FaircertError, UnsupportedOpError, ValidationError,
)
from faircert.interval import IntervalTensor, OutputBounds, fairness_gap, ibp_propagate, softmax_bounds
from faircert.local import certify_local, lfc, lower_local, upper_local
from faircert.metric import FairMetric, correlation_weighted_metric, learn_sensr_metric, orthotope, project_to_ball
from faircert.nn import AttackConfig, ModelParams, TrainState, adam_step, forward, grad, make_loss, pgd_maximize, predict
from faircert.train import TrainConfig, TrainResult, fit, ftu_preprocess, loss

__version__ = "0.1.0"
