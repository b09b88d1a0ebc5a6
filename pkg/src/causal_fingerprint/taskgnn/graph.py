"""Signature-to-graph conversion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputError


@dataclass
class TaskGraph:
    """One recording as a graph: node ``i`` is state ``i`` with features ``R[i]``.

    ``edge_weights[i, j]`` weighs the edge ``j -> i`` (influence of state ``j``
    on state ``i``); self-loops always carry weight 1.
    """

    node_features: np.ndarray
    edge_weights: np.ndarray
    label: int
    subject_id: str = ""
    task_id: str = ""
    session_tag: str = ""

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.edge_weights = np.asarray(self.edge_weights, dtype=np.float64)
        N = self.node_features.shape[0]
        if self.edge_weights.shape != (N, N):
            raise InputError(f"edge weights {self.edge_weights.shape} do not match {N} nodes")
        if np.any(self.edge_weights < 0) or np.any(self.edge_weights > 1):
            raise InputError("edge weights must lie in [0, 1]")

    @property
    def n_nodes(self):
        return self.node_features.shape[0]

    @property
    def graph_id(self):
        return "/".join(x for x in (self.subject_id, self.task_id, self.session_tag) if x) \
            or f"graph@{id(self):x}"


def normalized_adjacency(A):
    W = np.abs(np.asarray(A, dtype=np.float64))
    top = W.max() if W.size else 0.0
    W = W / top if top > 0 else np.zeros_like(W)
    np.fill_diagonal(W, 1.0)
    return W


def build_graph(sig, label, subject_id="", task_id="", session_tag=""):
    """Node features are the rows of ``[Q A B]``; edges are ``|A|`` scaled to max 1."""
    meta = getattr(sig, "meta", {}) or {}
    return TaskGraph(sig.R, normalized_adjacency(sig.A), int(label),
                     subject_id or meta.get("subject", ""),
                     task_id or meta.get("task", ""),
                     session_tag or meta.get("session", ""))
