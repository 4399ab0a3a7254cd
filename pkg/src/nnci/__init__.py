"""Nearest-neighbor outcome features for neural treatment-effect estimation."""

__version__ = "0.1.0"

from .data import CsvSchema, Dataset, SyntheticConfig, generate_synthetic, load_csv, split, true_ate
from .neighbors import DistanceMetric, NeighborFeatures, distance, nnci_features, nnci_features_subsampled
from .losses import LossConfig
from .models import ArchConfig, ThreeHeadModel, build, estimate_effects, predict
from .train import Scaler, TrainConfig, fit, fit_end_to_end, fit_two_stage, standardize
from .metrics import epsilon_ate, epsilon_pehe
from .evalstats import PerformanceMatrix, far_test, finner_posthoc, performance_profile, rank_report

__all__ = [
    "ArchConfig", "CsvSchema", "Dataset", "DistanceMetric", "LossConfig", "NeighborFeatures",
    "PerformanceMatrix", "Scaler", "SyntheticConfig", "ThreeHeadModel", "TrainConfig",
    "build", "distance", "epsilon_ate", "epsilon_pehe", "estimate_effects", "far_test",
    "finner_posthoc", "fit", "fit_end_to_end", "fit_two_stage", "generate_synthetic", "load_csv",
    "nnci_features", "nnci_features_subsampled", "performance_profile", "predict", "rank_report",
    "split", "standardize", "true_ate",
]
