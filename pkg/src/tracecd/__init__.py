"""Causal discovery in single event sequences with autoregressive density models."""

from .scm import (ScmParams, Sequence, GroundTruthConfig, PerturbationConfig, ParameterError,
                  InputError, generate_scm, calibrate_weight_scale, transition_dist,
                  sample_sequence, sample_dataset, estimate_predictability,
                  ground_truth_instance_graph, perturb_sequence)
from .density import (DensityBackend, ExactBackend, LogLinearModel, TrainHyper, OracleScore,
                      TrainingError, exact_backend, train_loglinear, oracle_score, kl_gap,
                      save_checkpoint, load_checkpoint)
from .engine import (TraceConfig, CmiReport, Staircase, default_context, build_staircase,
                     lagged_ig_matrix, discover_instance_graph, discover, error_bound,
                     recommended_threshold)
from .graphs import InstanceGraph, SummaryGraph, project_summary
from .baselines import BaselineConfig, granger_discover, random_discover, frequency_discover
from .metrics import GraphScore, RunSummary, compare_graphs, aggregate

__version__ = "0.1.0"
