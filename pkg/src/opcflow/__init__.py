"""Adaptive optical proximity correction with pattern reuse.

Submodules: ``layout_io``, ``litho``, ``metrics``, ``ilt``, ``embedding``,
``library``, ``shift``, ``selector``, ``pipeline`` and ``cli``.
"""
from .embedding import EmbedderConfig, embed, supcon_loss
from .errors import OpcError
from .ilt import IltConfig, SolverResult, fast_solver, optimize
from .library import HnswParams, MatchResult, PatternLibrary
from .litho import LithoModel, ProcessCondition, aerial_image, default_model, litho, roll2d
from .metrics import EpeConfig, epe_violations, pvband
from .pipeline import PipelineConfig, RunReport, run_pipeline
from .shift import apply_shift, calibrate_and_verify, cross_correlate, estimate_shift

__version__ = "0.1.0"

__all__ = [
    "EmbedderConfig", "embed", "supcon_loss", "OpcError", "IltConfig", "SolverResult",
    "fast_solver", "optimize", "HnswParams", "MatchResult", "PatternLibrary", "LithoModel",
    "ProcessCondition", "aerial_image", "default_model", "litho", "roll2d", "EpeConfig",
    "epe_violations", "pvband", "PipelineConfig", "RunReport", "run_pipeline", "apply_shift",
    "calibrate_and_verify", "cross_correlate", "estimate_shift",
]
