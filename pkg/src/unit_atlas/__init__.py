"""Selectivity x magnitude atlases of CNN units, scored by linear probes and ablation."""

__version__ = "0.1.0"

from .atlas import ActivationMatrix, GridAtlas, build_atlas, capture_activations, partition_grid, unit_stats
from .engine import AblationMask, LayerSpec, ModelGraph, UnitId, forward, forward_batch
from .errors import UnitAtlasError, ValidationError
from .probe import CellResult, ProbeConfig, cell_rank_deficit, fit_linear_probe, run_all_cells
from .store import Dataset, load_dataset, load_model, save_dataset, save_model
from .synth import generate_dataset
from .train import TrainConfig, build_model, train_model

__all__ = [
    "AblationMask", "ActivationMatrix", "CellResult", "Dataset", "GridAtlas", "LayerSpec", "ModelGraph",
    "ProbeConfig", "TrainConfig", "UnitAtlasError", "UnitId", "ValidationError", "build_atlas", "build_model",
    "capture_activations", "cell_rank_deficit", "fit_linear_probe", "forward", "forward_batch",
    "generate_dataset", "load_dataset", "load_model", "partition_grid", "run_all_cells", "save_dataset",
    "save_model", "train_model", "unit_stats",
]
