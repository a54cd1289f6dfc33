"""Prototype and instance contrastive domain adaptation for embedding extractors."""
from ._backend import BACKEND
from .clustering import DbscanParams, PseudoLabels, cluster_target, dbscan, promote_outliers
from .data import AugmentConfig, SpeakerWorld, WorldSpec, generate_world, make_view
from .encoder import AAMHead, EncoderModel, LRSchedule, SgdOptimizer, aam_loss, step
from .losses import LossConfig, PositiveRef, combined_loss, instance_loss, prototype_loss
from .memory import ClusterPrototypes, HybridMemory, compute_cluster_prototypes
from .metrics import DcfParams, TrialSet, eer, min_dcf, score_trials
from .trainer import TrainConfig, adapt, evaluate, pretrain, sweep

__version__ = "0.1.0"
