"""Black-box functionality cloning with Deep Neural Trees."""

from .blackbox import BlackBox, ChipBlackBox, ChipSpec, DEFAULT_CHIP
from .dnt import DntClone, DntConfig, bootstrap, simplify, train
from .regtree import RegressionTree, best_split, fit

__version__ = "0.1.0"

__all__ = [
    "BlackBox",
    "ChipBlackBox",
    "ChipSpec",
    "DEFAULT_CHIP",
    "DntClone",
    "DntConfig",
    "RegressionTree",
    "best_split",
    "bootstrap",
    "fit",
    "simplify",
    "train",
]
