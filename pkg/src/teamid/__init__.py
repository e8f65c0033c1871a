"""Teamed-classifier vehicle identification toolkit."""

__version__ = "0.1.0"

from .data import DatasetView, Sample, generate_synthetic, ingest_directory
from .losses import LossConfig, ProxyBank, proxy_nca_loss, triplet_loss
from .metrics import EvaluationReport, map_cmc, nmi, recall_at_k
from .model import AttentionConfig, ModelDescriptor, build_model, embed
from .teaming import TeamRegistry, add_expert, ensemble_embed, route
from .train import TrainConfig, lr_at, train

__all__ = [
    "AttentionConfig", "DatasetView", "EvaluationReport", "LossConfig",
    "ModelDescriptor", "ProxyBank", "Sample", "TeamRegistry", "TrainConfig",
    "add_expert", "build_model", "embed", "ensemble_embed",
    "generate_synthetic", "ingest_directory", "lr_at", "map_cmc", "nmi",
    "proxy_nca_loss", "recall_at_k", "route", "train", "triplet_loss",
]
