"""Causal clustering: cross-fitted causal forests with kernelized clustering of effects."""

from .cluster import (
    CausalClustering,
    ClusterResult,
    SonConfig,
    cluster_effects,
    lambda_search,
    select_k_eigengap,
    select_k_elbow,
    select_k_gap,
    select_k_silhouette,
    son_cluster,
    spectral_cluster,
    spectral_embed,
)
from .dataset import CsvSchema, Dataset, load_csv, make_folds, write_csv
from .forest import (
    CausalForest,
    ForestParams,
    KernelMatrix,
    RegressionForest,
    WeightMatrix,
)
from .metrics import MetricsReport, adjusted_rand, nmi, pehe, rand_index
from .pipeline import (
    CrossFitCATE,
    CrossfitResult,
    check_honesty,
    crossfit_cate,
    crossfit_kernel,
)
from .simgen import (
    AdversarialConfig,
    RecoveryConfig,
    gen_adversarial,
    gen_gaussian_clusters,
)

__version__ = "0.1.0"

__all__ = [
    "CausalClustering",
    "ClusterResult",
    "SonConfig",
    "cluster_effects",
    "lambda_search",
    "select_k_eigengap",
    "select_k_elbow",
    "select_k_gap",
    "select_k_silhouette",
    "son_cluster",
    "spectral_cluster",
    "spectral_embed",
    "CsvSchema",
    "Dataset",
    "load_csv",
    "make_folds",
    "write_csv",
    "CausalForest",
    "ForestParams",
    "KernelMatrix",
    "RegressionForest",
    "WeightMatrix",
    "MetricsReport",
    "adjusted_rand",
    "nmi",
    "pehe",
    "rand_index",
    "CrossFitCATE",
    "CrossfitResult",
    "crossfit_cate",
    "crossfit_kernel",
    "check_honesty",
    "AdversarialConfig",
    "RecoveryConfig",
    "gen_adversarial",
    "gen_gaussian_clusters",
]
