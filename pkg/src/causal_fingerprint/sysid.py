"""Two-timescale linear state-space identification.

The model relates state rows ``x(t)`` (m channels) and input rows ``u(t)``
(n channels) through::

    x(t) = Q x(t) + A x(t-1) + B u(t-1),    diag(Q) = 0

``Q`` carries same-sample coupling between states, ``A`` and ``B`` the
step-to-step evolution. The parameters are found by minimizing
``||(Q - I) X1 + A X0 + B U0||_F`` over all consecutive sample pairs. The
squared objective is a sum over state rows and the zero-diagonal constraint
only drops one regressor per row, so every row is an independent ridge
regression.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import InputError, NumericalError, RankDeficiencyError
from .ingest import DEFAULT_NORMALIZATION, PartitionSpec, Recording, normalize, partition


@dataclass(frozen=True)
class FitConfig:
    ridge_lambda: float = 1e-6
    # extra samples beyond the per-row unknown count demanded when ridge_lambda == 0
    min_samples_margin: int = 0

    def __post_init__(self):
        if not self.ridge_lambda >= 0:
            raise InputError(f"ridge_lambda must be >= 0, got {self.ridge_lambda}")
        if int(self.min_samples_margin) < 0:
            raise InputError("min_samples_margin must be >= 0")


@dataclass
class CausalSignature:
    """Fitted ``[Q A B]`` with fit diagnostics."""

    Q: np.ndarray
    A: np.ndarray
    B: np.ndarray
    residual_frobenius: float = 0.0
    ridge_lambda_used: float = 0.0
    regressor_condition: float = 1.0
    row_conditions: np.ndarray = field(default=None, repr=False)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        m = self.Q.shape[0]
        if self.Q.shape != (m, m) or self.A.shape != (m, m) or self.B.ndim != 2 \
                or self.B.shape[0] != m:
            raise InputError(
                f"inconsistent signature shapes Q{self.Q.shape} A{self.A.shape} B{self.B.shape}")

    @property
    def m(self):
        return self.Q.shape[0]

    @property
    def n(self):
        return self.B.shape[1]

    @property
    def R(self):
        """The stacked ``m x (2m + n)`` block ``[Q A B]``."""
        return np.hstack([self.Q, self.A, self.B])

    @classmethod
    def from_R(cls, R, m, **kwargs):
        R = np.asarray(R, dtype=np.float64)
        return cls(R[:, :m], R[:, m:2 * m], R[:, 2 * m:], **kwargs)

    def save(self, csv_path, json_path=None):
        """Write ``[Q A B]`` as CSV and the diagnostics as a JSON sidecar."""
        csv_path = Path(csv_path)
        json_path = csv_path.with_suffix(".json") if json_path is None else Path(json_path)
        np.savetxt(csv_path, self.R, delimiter=",", fmt="%.17g")
        sidecar = {
            "m": self.m, "n": self.n,
            "residual": self.residual_frobenius,
            "lambda": self.ridge_lambda_used,
            "condition": (self.regressor_condition
                          if np.isfinite(self.regressor_condition) else None),
            **self.meta,
        }
        json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        return csv_path, json_path

    @classmethod
    def load(cls, csv_path, json_path=None):
        csv_path = Path(csv_path)
        json_path = csv_path.with_suffix(".json") if json_path is None else Path(json_path)
        sidecar = json.loads(json_path.read_text())
        R = np.loadtxt(csv_path, delimiter=",", ndmin=2)
        meta = {k: v for k, v in sidecar.items()
                if k not in {"m", "n", "residual", "lambda", "condition"}}
        return cls.from_R(R, int(sidecar["m"]),
                          residual_frobenius=float(sidecar["residual"]),
                          ridge_lambda_used=float(sidecar["lambda"]),
                          regressor_condition=float(sidecar["condition"] or np.inf),
                          meta=meta)


def _as_series(M, name):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise InputError(f"{name} must be 2-D (channels x time), got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InputError(f"{name} contains non-finite values")
    return M


def build_regression_blocks(X, U):
    """Aligned consecutive-pair blocks ``(X1, X0, U0)``.

    Column ``k`` of ``X1`` is ``x(k+1)``; column ``k`` of ``X0`` and ``U0`` are
    ``x(k)`` and ``u(k)``. All blocks have ``T - 1`` columns.
    """
    X = _as_series(X, "X")
    U = _as_series(U, "U")
    if X.shape[1] != U.shape[1]:
        raise InputError(f"X has {X.shape[1]} samples but U has {U.shape[1]}")
    if X.shape[1] < 2:
        raise InputError("need at least 2 time samples")
    return X[:, 1:], X[:, :-1], U[:, :-1]


def _ridge_row(Phi, y, lam, row, margin):
    """Solve ``min ||Phi.T @ theta - y||^2 + lam ||theta||^2`` via SVD filter factors."""
    k, N = Phi.shape
    Uu, s, Vt = np.linalg.svd(Phi.T, full_matrices=False)
    smax = s[0] if s.size else 0.0
    tol = max(N, k) * np.finfo(np.float64).eps * smax
    rank = int(np.sum(s > tol))
    cond = float(smax / s[-1]) if s.size and s[-1] > 0 else float("inf")
    if lam == 0:
        if rank < k or N < k + margin:
            raise RankDeficiencyError(row, rank, k)
        filt = 1.0 / s
    else:
        filt = s / (s * s + lam)
    # with N < k the solution stays in the row space of Phi (minimum norm)
    theta = Vt.T @ (filt * (Uu.T @ y))
    return theta, cond


def fit_signature(X, U, cfg=None):
    """Fit ``[Q A B]`` from state rows ``X`` (m x T) and input rows ``U`` (n x T)."""
    cfg = FitConfig() if cfg is None else cfg
    X1, X0, U0 = build_regression_blocks(X, U)
    m, n = X1.shape[0], U0.shape[0]
    lam = float(cfg.ridge_lambda)
    Q = np.zeros((m, m))
    A = np.zeros((m, m))
    B = np.zeros((m, n))
    conds = np.empty(m)
    others = np.arange(m)
    for i in range(m):
        keep = others != i
        Phi = np.vstack([X1[keep], X0, U0])
        theta, conds[i] = _ridge_row(Phi, X1[i], lam, i, int(cfg.min_samples_margin))
        Q[i, keep] = theta[:m - 1]
        A[i] = theta[m - 1:2 * m - 1]
        B[i] = theta[2 * m - 1:]
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NumericalError("fit produced non-finite coefficients")
    sig = CausalSignature(Q, A, B, ridge_lambda_used=lam,
                          regressor_condition=float(np.max(conds)), row_conditions=conds)
    sig.residual_frobenius = _residual(sig, X1, X0, U0)
    return sig


def _residual(sig, X1, X0, U0):
    E = sig.Q @ X1 - X1 + sig.A @ X0 + sig.B @ U0
    return float(np.linalg.norm(E, "fro"))


def residual_of(sig, X, U):
    """``||(Q - I) X1 + A X0 + B U0||_F`` of a signature on the given series."""
    X1, X0, U0 = build_regression_blocks(X, U)
    if X1.shape[0] != sig.m or U0.shape[0] != sig.n:
        raise InputError(
            f"signature is m={sig.m}, n={sig.n} but data has m={X1.shape[0]}, n={U0.shape[0]}")
    return _residual(sig, X1, X0, U0)


def fit_recording(rec, spec, cfg=None):
    X, U = partition(rec, spec)
    sig = fit_signature(X, U, cfg)
    sig.meta = {"subject": rec.subject_id, "task": rec.task_id, "session": rec.session_tag}
    return sig


class TwoTimescaleModel(BaseEstimator):
    """Estimator wrapper around :func:`fit_signature`.

    Follows the scikit-learn orientation: ``X`` is ``(n_samples, m)`` and ``U``
    is ``(n_samples, n)``, one row per time point.

    Parameters
    ----------
    ridge_lambda : float, default=1e-6
        Ridge penalty applied to every row regression.
    min_samples_margin : int, default=0
        Extra samples required beyond the per-row unknown count when
        ``ridge_lambda`` is zero.

    Attributes
    ----------
    Q_, A_, B_ : ndarray
        Fitted same-sample, lagged-state and lagged-input matrices.
    signature_ : CausalSignature
    """

    def __init__(self, ridge_lambda=1e-6, min_samples_margin=0):
        self.ridge_lambda = ridge_lambda
        self.min_samples_margin = min_samples_margin

    def fit(self, X, U, y=None):
        X = check_array(X, ensure_min_samples=2, ensure_min_features=2)
        U = check_array(U, ensure_min_samples=2)
        cfg = FitConfig(self.ridge_lambda, self.min_samples_margin)
        self.signature_ = fit_signature(X.T, U.T, cfg)
        self.Q_, self.A_, self.B_ = self.signature_.Q, self.signature_.A, self.signature_.B
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, U):
        """One-step-ahead states ``x(t)`` for ``t = 1..T-1``, shape ``(T-1, m)``."""
        check_is_fitted(self, "signature_")
        X = check_array(X, ensure_min_samples=2)
        U = check_array(U, ensure_min_samples=2)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model was fit on {self.n_features_in_}")
        m = self.Q_.shape[0]
        drive = self.A_ @ X[:-1].T + self.B_ @ U[:-1].T
        return np.linalg.solve(np.eye(m) - self.Q_, drive).T

    def score(self, X, U):
        """Negative Frobenius residual of the fitted equation on ``(X, U)``."""
        check_is_fitted(self, "signature_")
        return -residual_of(self.signature_, np.asarray(X, float).T, np.asarray(U, float).T)


class SignatureExtractor(TransformerMixin, BaseEstimator):
    """Map recordings to flattened ``[Q A B]`` feature vectors.

    ``transform`` returns an array of shape ``(n_recordings, m * (2m + n))``
    so the signatures can feed any scikit-learn estimator; :meth:`extract`
    gives the full :class:`CausalSignature` objects.
    """

    def __init__(self, partition=None, normalization=DEFAULT_NORMALIZATION,
                 ridge_lambda=1e-6, n_inputs=None):
        self.partition = partition
        self.normalization = normalization
        self.ridge_lambda = ridge_lambda
        self.n_inputs = n_inputs

    def fit(self, recordings, y=None):
        recordings = _check_recordings(recordings)
        p = recordings[0].n_channels
        self.partition_ = (self.partition if self.partition is not None
                           else PartitionSpec.default(p, self.n_inputs)).validate(p)
        self.n_channels_ = p
        return self

    def extract(self, recordings):
        check_is_fitted(self, "partition_")
        cfg = FitConfig(self.ridge_lambda)
        out = []
        for rec in _check_recordings(recordings):
            if rec.n_channels != self.n_channels_:
                raise InputError(f"recording {rec.key} has {rec.n_channels} channels, "
                                 f"extractor was fit on {self.n_channels_}")
            rec, _ = normalize(rec, self.normalization)
            out.append(fit_recording(rec, self.partition_, cfg))
        return out

    def transform(self, recordings):
        return np.stack([s.R.ravel() for s in self.extract(recordings)])


def _check_recordings(recordings):
    recordings = list(recordings)
    if not recordings:
        raise InputError("no recordings given")
    for r in recordings:
        if not isinstance(r, Recording):
            raise InputError(f"expected Recording, got {type(r).__name__}")
    return recordings
