"""Score-based generative MIMO channel estimation with step skipping."""

from .channel import ChannelDataset, ScenarioConfig, load_dataset, make_splits, save_dataset
from .estimators import (
    GaussianScore,
    GmmPrior,
    PilotObservation,
    gmm_estimate,
    gmm_fit,
    ls_estimate,
    observe,
    sbm_estimate,
    scov_lmmse,
    single_step_estimate,
)
from .evaluation import EstimatorSpec, EvalReport, SweepConfig, emit_csv, nmse, run_sweep
from .schedule import NoiseSchedule, build_schedule, initial_step, skip_indices
from .scorenet import ScoreModel, ScoreNetConfig, init_model, load_model, save_model
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ChannelDataset",
    "EstimatorSpec",
    "EvalReport",
    "GaussianScore",
    "GmmPrior",
    "NoiseSchedule",
    "PilotObservation",
    "ScenarioConfig",
    "ScoreModel",
    "ScoreNetConfig",
    "SweepConfig",
    "TrainConfig",
    "build_schedule",
    "emit_csv",
    "gmm_estimate",
    "gmm_fit",
    "init_model",
    "initial_step",
    "load_dataset",
    "load_model",
    "ls_estimate",
    "make_splits",
    "nmse",
    "observe",
    "run_sweep",
    "save_dataset",
    "save_model",
    "sbm_estimate",
    "scov_lmmse",
    "single_step_estimate",
    "skip_indices",
    "train",
]
