"""Train whole subspaces (lines, Bezier curves, simplexes) of neural networks in one run."""

__version__ = "0.1.0"

from .data import Dataset, corrupt_gaussian, inject_label_noise, load_idx, synth_blobs, synth_split, write_idx
from .nn import NetworkSpec, ParamVector, backward, forward, mlp, recompute_bn_stats
from .subspace import BEZIER, LINE, Kind, SampleCoord, Subspace, eval_point, geometry_stats, simplex
from .trainer import TrainConfig, train_run

__all__ = [
    "BEZIER",
    "LINE",
    "Dataset",
    "Kind",
    "NetworkSpec",
    "ParamVector",
    "SampleCoord",
    "Subspace",
    "TrainConfig",
    "backward",
    "corrupt_gaussian",
    "eval_point",
    "forward",
    "geometry_stats",
    "inject_label_noise",
    "load_idx",
    "mlp",
    "recompute_bn_stats",
    "simplex",
    "synth_blobs",
    "synth_split",
    "train_run",
    "write_idx",
]
