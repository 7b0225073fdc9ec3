"""Hyperspectral unmixing with transformer features and content-adaptive
graph refinement, on a self-contained float64 autodiff engine."""

from .autodiff import (Tape, Tensor, backward, finite_diff_check)
from .config import TrainConfig
from .decoder import UnmixResult, evaluate
from .graph import (build_graph, build_static_grid_graph, grid_positions,
                    propagate)
from .hsi import (HsiCube, SynthSpec, empirical_snr_db, fold,
                  generate_synthetic, read_container, unfold, write_container)
from .model import ModelParams, forward, initialize_from_scene
from .train import (Checkpoint, gradcheck, load_checkpoint, run_ablation,
                    run_beta_sweep, run_snr_sweep, save_checkpoint, train)
from .vca import VcaResult, vca_extract

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward", "finite_diff_check",
    "TrainConfig",
    "UnmixResult", "evaluate",
    "build_graph", "build_static_grid_graph", "grid_positions", "propagate",
    "HsiCube", "SynthSpec", "empirical_snr_db", "fold", "generate_synthetic",
    "read_container", "unfold", "write_container",
    "ModelParams", "forward", "initialize_from_scene",
    "Checkpoint", "gradcheck", "load_checkpoint", "run_ablation",
    "run_beta_sweep", "run_snr_sweep", "save_checkpoint", "train",
    "VcaResult", "vca_extract",
]
