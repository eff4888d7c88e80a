"""Sample-clustered federated learning with deep domain isolation.

A pure NumPy simulator: a synthetic two-domain glyph segmentation benchmark,
FedAvg/SCAFFOLD, gradient-based clustering of samples into latent domains,
and the clustered pipeline with a federated domain classifier.
"""
from .config import ExperimentConfig, config_from_dict, full_scale, parse_config
from .data import DataConfig, Dataset, FederatedSplit, generate_dataset, partition
from .ddi import Clustering, GmmFitConfig, deep_domain_isolation, fed_gmm_fit, spectral_cluster
from .errors import FsddiError
from .fed import ClientData, RoundConfig, make_clients, run_federated
from .metrics import SegMetrics, macro_f1, miou, rand_index
from .nn import SegNetConfig, init_params
from .scfl import (ClassifierTrainConfig, PipelineConfig, ScflResult, baseline_cfl,
                   baseline_fedavg_plus, evaluate, evaluate_scfl, infer, prior_scfl, run_scfl,
                   train_domain_classifier)

__version__ = "0.1.0"

__all__ = [
    "ClassifierTrainConfig", "ClientData", "Clustering", "DataConfig", "Dataset",
    "ExperimentConfig", "FederatedSplit", "FsddiError", "GmmFitConfig", "PipelineConfig",
    "RoundConfig", "ScflResult", "SegMetrics", "SegNetConfig", "baseline_cfl",
    "baseline_fedavg_plus", "config_from_dict", "deep_domain_isolation", "evaluate",
    "evaluate_scfl", "fed_gmm_fit", "full_scale", "generate_dataset", "infer", "init_params", "macro_f1",
    "make_clients", "miou", "parse_config", "partition", "prior_scfl",
    "rand_index", "run_federated", "run_scfl", "spectral_cluster", "train_domain_classifier",
]
