"""Task fingerprinting with a small graph attention network."""
from .graph import TaskGraph, build_graph, normalized_adjacency
from .network import (Architecture, GnnParams, forward, gat_forward, gatv2_forward,
                      loss_and_gradients, readout_and_classify, topk_pool)
from .training import TaskGNNClassifier, TrainConfig, evaluate, predict, train
