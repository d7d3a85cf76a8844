"""Overhead depth people detection with a two-stage confidence-map network."""
from .confmap import PeakParams, TargetSpec, extract_peaks, render_target
from .data import DepthFrame, load_depth, prepare_input, read_manifest, save_depth
from .estimator import DepthPreprocessor, DPDnetDetector
from .evaluation import CountTally, MatchConfig, MetricsReport, benchmark_fps, compute_metrics, match_frame
from .model import FAST, STANDARD, DPDNet, load_checkpoint, save_checkpoint
from .synth import SceneConfig, generate_dataset, generate_scene
from .training import TrainConfig, TrainRecord, dpdnet_loss, train

__version__ = "0.1.0"

__all__ = [
    "CountTally", "DPDNet", "DPDnetDetector", "DepthFrame", "DepthPreprocessor", "FAST", "MatchConfig",
    "MetricsReport", "PeakParams", "STANDARD", "SceneConfig", "TargetSpec", "TrainConfig", "TrainRecord",
    "benchmark_fps", "compute_metrics", "dpdnet_loss", "extract_peaks", "generate_dataset", "generate_scene",
    "load_checkpoint", "load_depth", "match_frame", "prepare_input", "read_manifest", "render_target",
    "save_checkpoint", "save_depth", "train",
]
