"""Training loop, evaluation and the scikit-learn style task classifier."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import confusion_matrix
from sklearn.utils.validation import check_is_fitted

from ..errors import InputError
from .graph import TaskGraph, build_graph
from .network import DTYPES, Architecture, GnnParams, batch_loss, predict_logits

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 32
    heads: int = 2
    pool_ratio: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    split_fraction: float = 0.5
    precision: str = "float32"

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise InputError(f"split_fraction must lie in (0, 1), got {self.split_fraction}")
        if not 0 < self.pool_ratio <= 1:
            raise InputError(f"pool_ratio must lie in (0, 1], got {self.pool_ratio}")
        if self.precision not in DTYPES:
            raise InputError(f"precision must be one of {sorted(DTYPES)}")
        if min(self.hidden, self.heads, self.epochs, self.batch_size) < 1:
            raise InputError("hidden, heads, epochs and batch_size must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise InputError("lr must be positive and weight_decay nonnegative")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def stratified_split(labels, fraction, seed):
    """Per-class seeded shuffle; the first ``round(fraction * count)`` go to training."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        if len(idx) >= 2:
            k = min(max(k, 1), len(idx) - 1)
        train.extend(idx[:k].tolist())
        test.extend(idx[k:].tolist())
    return sorted(train), sorted(test)


def _accuracy(params, graphs):
    if not graphs:
        return float("nan")
    logits = predict_logits(params, graphs)
    y = np.array([g.label for g in graphs])
    return float(np.mean(logits.argmax(dim=1).numpy() == y))


def _mean_loss(params, graphs):
    if not graphs:
        return float("nan")
    with torch.no_grad():
        return float(batch_loss(params, graphs))


def make_optimizer(params, cfg):
    """Adam with decoupled weight decay: every step first scales weights by ``1 - lr * wd``."""
    return torch.optim.AdamW(params.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def train(dataset, cfg=None, n_classes=None):
    """Fit the classifier on a seeded stratified split of ``dataset``.

    Returns ``(params, history, split)`` where ``history`` has one dict per
    epoch (train/test loss and accuracy) and ``split`` holds the train and
    test indices into ``dataset``.
    """
    cfg = TrainConfig() if cfg is None else cfg
    dataset = list(dataset)
    labels = [g.label for g in dataset]
    if len(set(labels)) < 2:
        raise InputError("training needs at least two classes")
    n_classes = max(labels) + 1 if n_classes is None else n_classes
    dtype = DTYPES[cfg.precision]
    arch = Architecture(dataset[0].node_features.shape[1], n_classes, cfg.hidden, cfg.heads,
                        cfg.pool_ratio)
    params = GnnParams.init(arch, cfg.seed, dtype)
    train_idx, test_idx = stratified_split(labels, cfg.split_fraction, cfg.seed)
    train_set = [dataset[i] for i in train_idx]
    test_set = [dataset[i] for i in test_idx]
    opt = make_optimizer(params, cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            opt.zero_grad()
            loss = batch_loss(params, batch)
            loss.backward()
            opt.step()
        history.append({
            "epoch": epoch,
            "train_loss": _mean_loss(params, train_set),
            "test_loss": _mean_loss(params, test_set),
            "train_acc": _accuracy(params, train_set),
            "test_acc": _accuracy(params, test_set),
        })
        if epoch % 50 == 0 or epoch == cfg.epochs:
            log.info("epoch %d: %s", epoch, history[-1])
    return params, history, {"train": train_idx, "test": test_idx}


def predict(params, graphs):
    return predict_logits(params, list(graphs)).argmax(dim=1).numpy()


def evaluate(params, dataset, n_classes=None):
    """Overall and per-class accuracy plus the confusion matrix (rows = true class)."""
    dataset = list(dataset)
    if not dataset:
        raise InputError("cannot evaluate on an empty dataset")
    n_classes = params.arch.n_classes if n_classes is None else n_classes
    y = np.array([g.label for g in dataset])
    pred = predict(params, dataset)
    cm = confusion_matrix(y, pred, labels=list(range(n_classes)))
    support = cm.sum(axis=1)
    per_class = [float(cm[c, c] / support[c]) if support[c] else None for c in range(n_classes)]
    return {"accuracy": float(np.mean(pred == y)), "n": int(len(y)),
            "per_class_accuracy": per_class, "confusion": cm.tolist(),
            "predictions": pred.tolist()}


def history_csv_text(history):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, ["epoch", "train_loss", "test_loss", "train_acc", "test_acc"],
                            lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: (format(v, ".10g") if isinstance(v, float) else v)
                         for k, v in row.items()})
    return buf.getvalue()


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        fh.write(history_csv_text(history))


class TaskGNNClassifier(ClassifierMixin, BaseEstimator):
    """Graph attention task classifier over causal signatures.

    ``X`` is a sequence of :class:`~causal_fingerprint.sysid.CausalSignature`
    or :class:`TaskGraph`; ``y`` holds the task labels (any hashable). ``fit``
    trains on a stratified ``split_fraction`` of the data and keeps the rest
    as the held-out set whose scores appear in ``history_``.
    """

    def __init__(self, hidden=32, heads=2, pool_ratio=0.5, lr=1e-3, weight_decay=1e-4,
                 epochs=200, batch_size=16, seed=0, split_fraction=0.5, precision="float32"):
        self.hidden = hidden
        self.heads = heads
        self.pool_ratio = pool_ratio
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.split_fraction = split_fraction
        self.precision = precision

    def _config(self):
        return TrainConfig(**self.get_params())

    def _graphs(self, X, y=None):
        out = []
        for k, item in enumerate(X):
            label = 0 if y is None else int(y[k])
            if isinstance(item, TaskGraph):
                out.append(TaskGraph(item.node_features, item.edge_weights, label,
                                     item.subject_id, item.task_id, item.session_tag))
            else:
                out.append(build_graph(item, label))
        return out

    def fit(self, X, y):
        X = list(X)
        if len(X) != len(y):
            raise InputError(f"{len(X)} samples but {len(y)} labels")
        self.classes_, encoded = np.unique(np.asarray(y), return_inverse=True)
        graphs = self._graphs(X, encoded)
        self.params_, self.history_, self.split_ = train(graphs, self._config(),
                                                         len(self.classes_))
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self.classes_[predict(self.params_, self._graphs(list(X)))]

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        logits = predict_logits(self.params_, self._graphs(list(X)))
        return torch.softmax(logits.to(torch.float64), dim=1).numpy()
