"""Kernel SVM training with HSS-compressed Gaussian kernels and ADMM."""
from .dataset import Dataset, Permutation, load, random_split
from .kernel import KernelSpec
from .hss import compress, factor_shifted
from .svm import SvmModel, TrainConfig, evaluate, load_model, save_model, train, train_grid

__all__ = [
    "Dataset", "Permutation", "load", "random_split", "KernelSpec",
    "compress", "factor_shifted", "SvmModel", "TrainConfig", "evaluate",
    "load_model", "save_model", "train", "train_grid",
]
__version__ = "0.1.0"
