"""Differentially private selective fine-tuning on a small numpy network."""

from .accountant import MechanismEvent, PrivacyLedger, calibrate_sigma, compose, split_budget, to_epsilon_delta
from .nn import Dataset, LayeredModel, LayerSpec, build_model, dense, tanh
from .optim import DpTrainConfig, NO_CLIP, dp_adamw_step, dp_sgd_step, noisy_aggregate, train
from .pipeline import ARMS, ExperimentConfig, RunResult, run_pipeline, run_suite
from .select import SelectionConfig, candidate_family, select, worst_case_perturbation
from .synth import build_synthetic_dataset

__version__ = "0.1.0"
