"""Graph attention classifier: layers, parameters, forward pass and loss.

Pipeline per graph::

    GAT (+ linear skip) -> GAT (+ linear skip) -> top-k pooling
        -> GATv2 -> mean over nodes -> linear head

All layer functions take batched dense tensors: node features ``(B, N, F)``
and edge weights ``(B, N, N)`` where ``W[b, i, j] > 0`` marks an edge
``j -> i``. Gradients come from torch autograd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import InputError, NonFiniteLossError

NEGATIVE_SLOPE = 0.2

DTYPES = {"float64": torch.float64, "float32": torch.float32}


def _attend(logits, edge_weights):
    """Masked softmax over neighbours ``j``, then edge-weight reweighting.

    ``logits`` is ``(B, K, N, N)``; returns row-stochastic ``(B, K, N, N)``.
    """
    mask = (edge_weights > 0).unsqueeze(1)
    alpha = torch.softmax(logits.masked_fill(~mask, float("-inf")), dim=-1)
    weighted = alpha * edge_weights.unsqueeze(1)
    return weighted / weighted.sum(dim=-1, keepdim=True)


def gat_forward(H, W, a, edge_weights, skip_W=None, skip_b=None, return_attention=False):
    """Multi-head attention layer with concatenated heads and optional linear skip.

    ``W`` is ``(K, F, h)``, ``a`` is ``(K, 2h)`` with the first half scoring the
    receiving node and the second half the sending node.
    """
    K, _, h = W.shape
    z = torch.einsum("bnf,kfh->bknh", H, W)
    s_dst = torch.einsum("bknh,kh->bkn", z, a[:, :h])
    s_src = torch.einsum("bknh,kh->bkn", z, a[:, h:])
    logits = F.leaky_relu(s_dst.unsqueeze(-1) + s_src.unsqueeze(-2), NEGATIVE_SLOPE)
    att = _attend(logits, edge_weights)
    out = F.elu(att @ z)                       # (B, K, N, h)
    out = out.permute(0, 2, 1, 3).reshape(H.shape[0], H.shape[1], K * h)
    if skip_W is not None:
        out = out + H @ skip_W + skip_b
    return (out, att) if return_attention else out


def gatv2_forward(H, W, a, edge_weights, return_attention=False):
    """Single-head GATv2 layer: ``e_ij = a . LeakyReLU(W_l h_i + W_r h_j)``.

    ``W`` is ``(h, 2F)``; its right half also produces the messages ``W_r h_j``.
    """
    Fin = H.shape[-1]
    Wl, Wr = W[:, :Fin], W[:, Fin:]
    zl = H @ Wl.T                              # (B, N, h)
    zr = H @ Wr.T
    g = F.leaky_relu(zl.unsqueeze(2) + zr.unsqueeze(1), NEGATIVE_SLOPE)  # (B, N, N, h)
    logits = (g @ a).unsqueeze(1)              # (B, 1, N, N)
    att = _attend(logits, edge_weights)
    out = F.elu(att[:, 0] @ zr)
    return (out, att) if return_attention else out


def pool_size(ratio, N):
    if not 0 < ratio <= 1:
        raise InputError(f"pool ratio must lie in (0, 1], got {ratio}")
    return max(1, math.ceil(round(ratio * N, 9)))


def topk_pool(H, p, edge_weights, ratio):
    """Keep the ``ceil(ratio * N)`` highest-scoring nodes, gated by ``tanh(score)``.

    Scores are ``H p / ||p||``. Kept nodes come out in descending score order,
    ties going to the lower index. Returns ``(H_out, W_out, kept)``.
    """
    norm = torch.linalg.vector_norm(p)
    if float(norm.detach()) == 0.0:
        raise InputError("degenerate pool scorer: score vector is zero")
    y = (H @ p) / norm                         # (B, N)
    k = pool_size(ratio, H.shape[1])
    kept = torch.sort(y.detach(), dim=1, descending=True, stable=True).indices[:, :k]
    gate = torch.tanh(torch.gather(y, 1, kept))
    H_out = torch.gather(H, 1, kept.unsqueeze(-1).expand(-1, -1, H.shape[-1])) * gate.unsqueeze(-1)
    rows = torch.gather(edge_weights, 1, kept.unsqueeze(-1).expand(-1, -1, edge_weights.shape[-1]))
    W_out = torch.gather(rows, 2, kept.unsqueeze(1).expand(-1, k, -1)).clone()
    W_out.diagonal(dim1=1, dim2=2).fill_(1.0)
    return H_out, W_out, kept


def readout_and_classify(H, W_out, b_out):
    """Mean over nodes followed by an affine map to class logits."""
    if H.shape[1] < 1:
        raise InputError("cannot read out an empty graph")
    return H.mean(dim=1) @ W_out.T + b_out


@dataclass(frozen=True)
class Architecture:
    in_features: int
    n_classes: int
    hidden: int = 32
    heads: int = 2
    pool_ratio: float = 0.5

    def shapes(self):
        return {k: v[0] for k, v in self._layout().items()}

    def fan_in(self, name):
        return self._layout()[name][1]

    def _layout(self):
        d, h, K, C = self.in_features, self.hidden, self.heads, self.n_classes
        return {
            "gat1.W": ((K, d, h), d), "gat1.a": ((K, 2 * h), 2 * h),
            "skip1.W": ((d, K * h), d), "skip1.b": ((K * h,), d),
            "gat2.W": ((K, K * h, h), K * h), "gat2.a": ((K, 2 * h), 2 * h),
            "skip2.W": ((K * h, K * h), K * h), "skip2.b": ((K * h,), K * h),
            "pool.p": ((K * h,), K * h),
            "gatv2.W": ((h, 2 * K * h), 2 * K * h), "gatv2.a": ((h,), h),
            "head.W": ((C, h), h), "head.b": ((C,), h),
        }


class GnnParams:
    """Named parameter tensors of the classifier, shapes checked against an :class:`Architecture`."""

    def __init__(self, arch, tensors):
        self.arch = arch
        expected = arch.shapes()
        if set(tensors) != set(expected):
            raise InputError(f"parameter names {sorted(tensors)} != {sorted(expected)}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise InputError(f"{name} has shape {tuple(tensors[name].shape)}, expected {shape}")
            if not torch.all(torch.isfinite(tensors[name])):
                raise InputError(f"{name} has non-finite entries")
        self.tensors = dict(tensors)

    @classmethod
    def init(cls, arch, seed=0, dtype=torch.float32):
        """Uniform ``(-s, s)`` entries with ``s = 1 / sqrt(fan_in)``."""
        gen = torch.Generator().manual_seed(int(seed))
        tensors = {}
        for name, shape in arch.shapes().items():
            s = 1.0 / math.sqrt(arch.fan_in(name))
            t = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * s
            tensors[name] = t.to(dtype).requires_grad_(True)
        return cls(arch, tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def parameters(self):
        return list(self.tensors.values())

    def to(self, dtype):
        return GnnParams(self.arch, {k: v.detach().to(dtype).requires_grad_(True)
                                     for k, v in self.tensors.items()})

    def to_dict(self):
        return {
            "architecture": {"in_features": self.arch.in_features, "n_classes": self.arch.n_classes,
                             "hidden": self.arch.hidden, "heads": self.arch.heads,
                             "pool_ratio": self.arch.pool_ratio},
            "tensors": {k: {"shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", ""),
                            "data": v.detach().to(torch.float64).reshape(-1).tolist()}
                        for k, v in self.tensors.items()},
        }

    @classmethod
    def from_dict(cls, d):
        arch = Architecture(**d["architecture"])
        tensors = {}
        for k, v in d["tensors"].items():
            dtype = DTYPES.get(v.get("dtype", "float32"), torch.float32)
            tensors[k] = torch.tensor(v["data"], dtype=torch.float64).reshape(v["shape"]) \
                .to(dtype).requires_grad_(True)
        return cls(arch, tensors)


def forward(params, H, W, return_attention=False):
    """Class logits ``(B, C)`` for batched graphs; optionally every layer's attention."""
    P = params.tensors
    H1, att1 = gat_forward(H, P["gat1.W"], P["gat1.a"], W, P["skip1.W"], P["skip1.b"], True)
    H2, att2 = gat_forward(H1, P["gat2.W"], P["gat2.a"], W, P["skip2.W"], P["skip2.b"], True)
    H3, W3, kept = topk_pool(H2, P["pool.p"], W, params.arch.pool_ratio)
    H4, att3 = gatv2_forward(H3, P["gatv2.W"], P["gatv2.a"], W3, True)
    logits = readout_and_classify(H4, P["head.W"], P["head.b"])
    if return_attention:
        return logits, {"gat1": att1, "gat2": att2, "gatv2": att3, "kept": kept}
    return logits


def stack_graphs(graphs, dtype=torch.float32):
    graphs = list(graphs)
    if not graphs:
        raise InputError("empty batch")
    sizes = {g.node_features.shape for g in graphs}
    if len(sizes) != 1:
        raise InputError(f"graphs in a batch must share node count and feature width, got {sizes}")
    H = torch.tensor(np.stack([g.node_features for g in graphs]), dtype=dtype)
    W = torch.tensor(np.stack([g.edge_weights for g in graphs]), dtype=dtype)
    y = torch.tensor([g.label for g in graphs], dtype=torch.long)
    return H, W, y


def batch_loss(params, graphs, dtype=None):
    """Mean cross-entropy of a batch as a differentiable scalar tensor."""
    dtype = params["head.W"].dtype if dtype is None else dtype
    H, W, y = stack_graphs(graphs, dtype)
    logits = forward(params, H, W)
    per_graph = F.cross_entropy(logits, y, reduction="none")
    bad = ~torch.isfinite(per_graph)
    if bool(bad.any()):
        i = int(torch.nonzero(bad)[0])
        raise NonFiniteLossError(graphs[i].graph_id, float(per_graph[i].detach()))
    return per_graph.mean()


def loss_and_gradients(params, batch):
    """``(loss, grads)`` with ``grads`` a name -> tensor mapping shaped like ``params``."""
    batch = list(batch)
    if not batch:
        raise InputError("empty batch")
    for t in params.parameters():
        t.grad = None
    loss = batch_loss(params, batch)
    loss.backward()
    grads = {k: (v.grad.detach().clone() if v.grad is not None else torch.zeros_like(v))
             for k, v in params.tensors.items()}
    return float(loss.detach()), grads


def predict_logits(params, graphs):
    dtype = params["head.W"].dtype
    H, W, _ = stack_graphs(graphs, dtype)
    with torch.no_grad():
        return forward(params, H, W)
