"""Cluster-guided quenched pruning of small convolutional networks."""

from .engine import Checkpoint, NetworkSpec, TrainConfig, Schedule, forward, backward, train, evaluate, init_checkpoint
from .masks import ConnectionMask, measured_dilution
from .metrics import FieldMatrix, ClippedMatrix, FilterProfile, LayerStats, find_clusters, layer_stats
from .pruning import afcc_mask, afcc_output_mask, a_afcc_assign, a_afcc_mask, r_afcc_filter_mask, r_afcc_weight_mask, fc_node_mask, estimate_dilution
from .accounting import layer_params, layer_macs, network_cost
from .pipeline import ExperimentConfig, run_stage

__version__ = "0.1.0"
