"""Federated prognostics: federated randomized SVD for functional PCA and
federated (log-)location-scale regression for failure-time prediction."""

from .fedcore import Federation, Transcript, UserState, audit_transcript
from .frsvd import FrsvdConfig, FrsvdOutput, centralized_rsvd, federated_rsvd
from .llsreg import GdConfig, Theta, centralized_fit, federated_fit, predict_ttf
from .prognostics import PipelineConfig, predict_single, run_benchmark

__version__ = "0.1.0"

__all__ = [
    "Federation", "Transcript", "UserState", "audit_transcript",
    "FrsvdConfig", "FrsvdOutput", "centralized_rsvd", "federated_rsvd",
    "GdConfig", "Theta", "centralized_fit", "federated_fit", "predict_ttf",
    "PipelineConfig", "predict_single", "run_benchmark",
]
