"""One-shot subject identification.

Three identification methods share one evaluation harness:

``cm-mdp``
    causal signature, modes matched by optimal assignment (:func:`modal_distance`)
``cm-fn``
    causal signature, Frobenius distance between stacked ``[Q A B]`` blocks
``fc-cor``
    Pearson functional connectome, correlation between upper triangles
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .errors import InputError, NumericalError
from .ingest import PartitionSpec, Recording, group_by, normalize
from .modal import decompose, modal_distance
from .sysid import FitConfig, fit_recording

log = logging.getLogger(__name__)

METHODS = ("cm-mdp", "cm-fn", "fc-cor")


@dataclass
class DatabaseEntry:
    subject_id: str
    features: object
    signature: object


@dataclass
class SignatureDatabase:
    task_id: str
    entries: list
    built_from: str = ""

    def __post_init__(self):
        if not self.entries:
            raise InputError("signature database is empty")
        ids = [e.subject_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise InputError(f"duplicate subject in database: "
                             f"{next(s for s in ids if ids.count(s) > 1)}")
        # sorted by subject so the first minimum is the lexicographic tie-break
        self.entries = sorted(self.entries, key=lambda e: e.subject_id)

    @property
    def subjects(self):
        return [e.subject_id for e in self.entries]

    @property
    def m(self):
        return self.entries[0].signature.m


@dataclass
class FcMatrix:
    values: np.ndarray
    constant_channels: tuple = ()


@dataclass
class IdReport:
    total_queries: int = 0
    correct: int = 0
    per_query: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def accuracy(self):
        return self.correct / self.total_queries if self.total_queries else 0.0

    def add(self, true_subject, predicted, distance, margin, **extra):
        self.per_query.append({"true_subject": true_subject, "predicted_subject": predicted,
                               "distance": _finite_or_none(distance),
                               "margin": _finite_or_none(margin), **extra})
        self.total_queries += 1
        self.correct += int(true_subject == predicted)

    def to_dict(self):
        return {**self.meta, "total_queries": self.total_queries, "correct": self.correct,
                "accuracy": self.accuracy, "errors": self.errors, "per_query": self.per_query}

    @classmethod
    def from_dict(cls, d):
        meta = {k: v for k, v in d.items()
                if k not in {"total_queries", "correct", "accuracy", "errors", "per_query"}}
        return cls(int(d["total_queries"]), int(d["correct"]), list(d["per_query"]),
                   list(d.get("errors", [])), meta)


def _finite_or_none(x):
    return None if x is None or not math.isfinite(x) else float(x)


def _argmin(subjects, distances):
    """Best subject, its distance and the runner-up margin (``inf`` with one candidate)."""
    order = np.argsort(np.asarray(distances), kind="stable")
    best = order[0]
    margin = distances[order[1]] - distances[best] if len(order) > 1 else math.inf
    return subjects[best], float(distances[best]), float(margin)


def build_database(recordings, spec, cfg=None, signatures=None):
    """Fit and decompose one recording per subject.

    ``signatures`` may map recording keys to already fitted signatures.
    """
    recordings = list(recordings)
    if not recordings:
        raise InputError("cannot build a database from zero recordings")
    tasks = {r.task_id for r in recordings}
    if len(tasks) != 1:
        raise InputError(f"database recordings span several tasks: {sorted(tasks)}")
    entries = []
    for rec in recordings:
        try:
            sig = signatures[rec.key] if signatures and rec.key in signatures \
                else fit_recording(rec, spec, cfg)
        except NumericalError as exc:
            raise NumericalError(f"subject {rec.subject_id}: {exc}") from exc
        entries.append(DatabaseEntry(rec.subject_id, decompose(sig), sig))
    sessions = sorted({r.session_tag for r in recordings})
    return SignatureDatabase(tasks.pop(), entries, ",".join(sessions))


def identify(db, query):
    """Database subject whose modes best match ``query`` (a :class:`ModalFeatures`)."""
    if query.m != db.m:
        raise InputError(f"query has m={query.m}, database has m={db.m}")
    d = [modal_distance(query, e.features) for e in db.entries]
    return _argmin(db.subjects, d)


def identify_fn(db, query_sig):
    """Database subject nearest to ``query_sig`` in Frobenius norm of ``[Q A B]``."""
    R = query_sig.R
    if R.shape != db.entries[0].signature.R.shape:
        raise InputError(f"query signature shape {R.shape} differs from database")
    d = [float(np.linalg.norm(R - e.signature.R)) for e in db.entries]
    return _argmin(db.subjects, d)


def fc_matrix(rec):
    """Pearson correlation between all channel pairs.

    Constant channels get a zero row and column (diagonal included) and are
    listed in ``constant_channels``.
    """
    data = rec.data if isinstance(rec, Recording) else np.asarray(rec, dtype=np.float64)
    if data.shape[1] < 3:
        raise InputError("functional connectome needs at least 3 time points")
    C = data - data.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", C, C))
    const = norms == 0
    Z = np.divide(C, norms[:, None], out=np.zeros_like(C), where=~const[:, None])
    F = np.clip(Z @ Z.T, -1.0, 1.0)
    F = 0.5 * (F + F.T)
    np.fill_diagonal(F, np.where(const, 0.0, 1.0))
    return FcMatrix(F, tuple(int(i) for i in np.flatnonzero(const)))


def upper_triangle(M):
    """Strict upper triangle of a square matrix, row-major."""
    M = np.asarray(M)
    return M[np.triu_indices(M.shape[0], k=1)]


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 0.0


def identify_fc(db_fc, query):
    """Subject whose FC upper triangle correlates best with the query's.

    ``db_fc`` is a sequence of ``(subject_id, FcMatrix)``. Returns
    ``(subject_id, score, margin)`` where ``score`` is the winning correlation.
    """
    db_fc = sorted(db_fc, key=lambda item: item[0])
    if not db_fc:
        raise InputError("empty FC database")
    q = upper_triangle(query.values)
    subjects, neg = [], []
    for subject, fc in db_fc:
        if fc.values.shape != query.values.shape:
            raise InputError(f"FC shape {fc.values.shape} differs from query {query.values.shape}")
        subjects.append(subject)
        neg.append(-_pearson(q, upper_triangle(fc.values)))
    subject, best, margin = _argmin(subjects, neg)
    return subject, -best, margin


@dataclass(frozen=True)
class Protocol:
    db_session: str
    query_sessions: tuple
    method: str = "cm-mdp"
    task: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown method {self.method!r}; expected one of {METHODS}")
        object.__setattr__(self, "query_sessions", tuple(self.query_sessions))


def fit_all(recordings, spec, cfg=None):
    """Fit every recording; failures are returned as exceptions in place of signatures."""
    out = {}
    for rec in recordings:
        try:
            out[rec.key] = fit_recording(rec, spec, cfg)
        except NumericalError as exc:
            out[rec.key] = exc
    return out


def evaluate_subject_id(recordings, spec, protocol, cfg=None, signatures=None):
    """Build per-task databases from ``protocol.db_session`` and query the other sessions.

    ``recordings`` is an already loaded and normalized corpus. Queries whose
    fit fails are listed in ``errors`` and excluded from ``total_queries``.
    """
    cfg = FitConfig() if cfg is None else cfg
    recordings = list(recordings)
    sessions = {r.session_tag for r in recordings}
    for s in (protocol.db_session, *protocol.query_sessions):
        if s not in sessions:
            raise InputError(f"session {s!r} not in corpus (have {sorted(sessions)})")
    by_task = group_by(recordings, "task_id")
    tasks = [protocol.task] if protocol.task is not None else sorted(
        t for t, recs in by_task.items() if any(r.session_tag == protocol.db_session for r in recs))
    if protocol.task is not None and protocol.task not in by_task:
        raise InputError(f"task {protocol.task!r} not in corpus")
    if signatures is None and protocol.method != "fc-cor":
        signatures = fit_all(recordings, spec, cfg)

    report = IdReport(meta={
        "method": protocol.method, "db_session": protocol.db_session,
        "query_sessions": list(protocol.query_sessions), "tasks": tasks,
        "ridge_lambda": cfg.ridge_lambda,
    })
    features = {}
    for task in tasks:
        recs = by_task[task]
        db_recs = [r for r in recs if r.session_tag == protocol.db_session]
        queries = sorted((r for r in recs if r.session_tag in protocol.query_sessions),
                         key=lambda r: (r.session_tag, r.subject_id))
        if protocol.method == "fc-cor":
            db_fc = [(r.subject_id, fc_matrix(r)) for r in db_recs]
            for q in queries:
                subject, score, margin = identify_fc(db_fc, fc_matrix(q))
                report.add(q.subject_id, subject, 1.0 - score, margin, task=task,
                           session=q.session_tag)
            continue
        ok = {k: v for k, v in signatures.items() if not isinstance(v, Exception)}
        db = build_database(db_recs, spec, cfg, signatures=ok)
        for q in queries:
            sig = signatures.get(q.key)
            if sig is None:
                sig = signatures[q.key] = _try_fit(q, spec, cfg)
            if isinstance(sig, Exception):
                report.errors.append({"subject": q.subject_id, "task": task,
                                      "session": q.session_tag, "error": str(sig)})
                continue
            if protocol.method == "cm-mdp":
                if q.key not in features:
                    features[q.key] = decompose(sig)
                subject, dist, margin = identify(db, features[q.key])
            else:
                subject, dist, margin = identify_fn(db, sig)
            report.add(q.subject_id, subject, dist, margin, task=task, session=q.session_tag)
    log.info("subject-id %s db=%s: %d/%d correct (%.4f)", protocol.method, protocol.db_session,
             report.correct, report.total_queries, report.accuracy)
    return report


def _try_fit(rec, spec, cfg):
    try:
        return fit_recording(rec, spec, cfg)
    except NumericalError as exc:
        return exc


def leave_one_in_protocols(sessions, method="cm-mdp", task=None):
    """Each session in turn builds the database; the remaining ones are queries."""
    sessions = list(sessions)
    return [Protocol(s, tuple(x for x in sessions if x != s), method, task) for s in sessions]


class SubjectFingerprint(ClassifierMixin, BaseEstimator):
    """One-shot subject identifier over :class:`Recording` objects.

    ``fit`` stores one exemplar per subject; ``predict`` returns the subject
    of the closest exemplar.

    Parameters
    ----------
    method : {"cm-mdp", "cm-fn", "fc-cor"}
    partition : PartitionSpec or None
        State/input split; defaults to the last tenth of channels as inputs.
    normalization : {"zscore_per_channel", "none"}
    ridge_lambda : float
    """

    def __init__(self, method="cm-mdp", partition=None, normalization="zscore_per_channel",
                 ridge_lambda=1e-6):
        self.method = method
        self.partition = partition
        self.normalization = normalization
        self.ridge_lambda = ridge_lambda

    def _prepare(self, recordings):
        return [normalize(r, self.normalization)[0] for r in recordings]

    def fit(self, X, y=None):
        recs = self._prepare(X)
        if not recs:
            raise InputError("no recordings given")
        if y is not None:
            recs = [Recording(str(s), r.task_id, r.session_tag, r.data, r.dt)
                    for r, s in zip(recs, y)]
        p = recs[0].n_channels
        self.partition_ = (self.partition or PartitionSpec.default(p)).validate(p)
        self._cfg = FitConfig(self.ridge_lambda)
        if self.method not in METHODS:
            raise InputError(f"unknown method {self.method!r}")
        if self.method == "fc-cor":
            self.db_fc_ = [(r.subject_id, fc_matrix(r)) for r in recs]
        else:
            recs = [Recording(r.subject_id, "_", "_", r.data, r.dt) for r in recs]
            self.db_ = build_database(recs, self.partition_, self._cfg)
        self.classes_ = np.array(sorted({r.subject_id for r in recs}))
        return self

    def _query(self, rec):
        if self.method == "fc-cor":
            return identify_fc(self.db_fc_, fc_matrix(rec))
        sig = fit_recording(rec, self.partition_, self._cfg)
        if self.method == "cm-mdp":
            return identify(self.db_, decompose(sig))
        return identify_fn(self.db_, sig)

    def predict(self, X):
        check_is_fitted(self, "partition_")
        return np.array([self._query(r)[0] for r in self._prepare(X)])

    def decision_distances(self, X):
        """Distance (or negated correlation for ``fc-cor``) to the winning exemplar."""
        check_is_fitted(self, "partition_")
        out = []
        for r in self._prepare(X):
            _, d, _ = self._query(r)
            out.append(-d if self.method == "fc-cor" else d)
        return np.array(out)
