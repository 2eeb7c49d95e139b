"""Diffusion-based anomaly detection for multivariate sensor time series."""
from .data import SyntheticSpec, TimeSeriesDataset, WindowSet, load_csv, make_windows, synth_generate
from .detector import GpdFit, ScoreTrace, fit_pot, label, score_sample, score_windows
from .diffusion import NoiseSchedule, build_schedule, diffusion_loss, forward_diffuse
from .kernels import BACKEND
from .predictor import NoisePredictor, PredictorConfig
from .trainer import TrainConfig, TrainedModel, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "GpdFit", "NoisePredictor", "NoiseSchedule", "PredictorConfig", "ScoreTrace",
    "SyntheticSpec", "TimeSeriesDataset", "TrainConfig", "TrainedModel", "WindowSet",
    "build_schedule", "diffusion_loss", "fit_pot", "forward_diffuse", "label", "load_checkpoint",
    "load_csv", "make_windows", "save_checkpoint", "score_sample", "score_windows",
    "synth_generate", "train",
]
