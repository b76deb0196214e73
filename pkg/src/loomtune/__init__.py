"""Learned autotuning of tensor loop nests.

Workloads (matmul, conv2d) are lowered through a tiling/reorder/unroll/vectorize
config space into loop nests, featurised, scored by a boosted-tree cost model and
searched with simulated annealing plus diversity-aware batch selection.
"""
from .explorer import TunerOptions, tune
from .features import featurize
from .measure import MachineModelParams, OracleBackend, WallclockBackend
from .model import GBTParams, train
from .schedule import define_space, execute, lower
from .workload import make_conv2d, make_matmul, reference_execute, resnet18_suite

__all__ = [
    "GBTParams", "MachineModelParams", "OracleBackend", "TunerOptions", "WallclockBackend",
    "define_space", "execute", "featurize", "lower", "make_conv2d", "make_matmul",
    "reference_execute", "resnet18_suite", "train", "tune",
]
__version__ = "0.1.0"
