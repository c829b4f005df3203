"""Differentiable search of image augmentation policies on a small numpy autodiff engine."""

from .data import DatasetBundle, SyntheticSpec, load_binary, make_synthetic, save_binary
from .estimator import AugmentPolicySearch
from .policy import Policy, augment, init_policy
from .search import SearchConfig, run_search

__all__ = [
    "DatasetBundle",
    "AugmentPolicySearch",
    "Policy",
    "SearchConfig",
    "SyntheticSpec",
    "augment",
    "init_policy",
    "load_binary",
    "make_synthetic",
    "run_search",
    "save_binary",
]

__version__ = "0.1.0"
