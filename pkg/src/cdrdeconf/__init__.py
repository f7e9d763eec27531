"""Causal deconfounding for dual-target cross-domain recommendation."""

from .config import PipelineConfig
from .evaluation import MetricsReport
from .pipeline import run_pipeline, run_sweep

__all__ = ["PipelineConfig", "MetricsReport", "run_pipeline", "run_sweep"]
__version__ = "0.1.0"
