"""Dynamic modes of a signature and the mode-matching distance between two signatures.

The modes of ``Q`` (same-sample coupling) and of ``A`` (lagged evolution) are
their right eigenvectors. Two signatures are compared by optimally pairing
their modes and summing the moduli of the Hermitian inner products; the
eigenvalues play no part, so every mode counts equally.
"""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InputError

NEAR_DEFECTIVE_COND = 1e12
UNIT_TOL = 1e-9


class NearDefectiveWarning(RuntimeWarning):
    pass


@dataclass
class ModalFeatures:
    Tbar: np.ndarray
    Lbar: np.ndarray
    That: np.ndarray
    Lhat: np.ndarray
    cond_Tbar: float = 1.0
    cond_That: float = 1.0
    flags: list = field(default_factory=list)

    @property
    def m(self):
        return self.Tbar.shape[0]

    def save(self, prefix):
        """Write ``<prefix>_{Tbar,That}_{re,im}.csv`` plus ``<prefix>_eig.json``."""
        prefix = Path(prefix)
        for name in ("Tbar", "That"):
            M = getattr(self, name)
            np.savetxt(f"{prefix}_{name}_re.csv", M.real, delimiter=",", fmt="%.17g")
            np.savetxt(f"{prefix}_{name}_im.csv", M.imag, delimiter=",", fmt="%.17g")
        eig = {
            "Lbar": [[float(z.real), float(z.imag)] for z in self.Lbar],
            "Lhat": [[float(z.real), float(z.imag)] for z in self.Lhat],
            "cond_Tbar": self.cond_Tbar, "cond_That": self.cond_That, "flags": self.flags,
        }
        Path(f"{prefix}_eig.json").write_text(json.dumps(eig, indent=2) + "\n")

    @classmethod
    def load(cls, prefix):
        def frame(name):
            re = np.loadtxt(f"{prefix}_{name}_re.csv", delimiter=",", ndmin=2)
            im = np.loadtxt(f"{prefix}_{name}_im.csv", delimiter=",", ndmin=2)
            return re + 1j * im
        eig = json.loads(Path(f"{prefix}_eig.json").read_text())
        return cls(frame("Tbar"), np.array([complex(*z) for z in eig["Lbar"]]),
                   frame("That"), np.array([complex(*z) for z in eig["Lhat"]]),
                   eig["cond_Tbar"], eig["cond_That"], list(eig["flags"]))


@dataclass
class ModeMatch:
    assignment: np.ndarray
    similarities: np.ndarray

    @property
    def total(self):
        return float(np.sum(self.similarities))


def fix_phase(V):
    """Scale every column to unit norm with its largest-magnitude entry real and >= 0."""
    V = np.array(V, dtype=np.complex128)
    V /= np.linalg.norm(V, axis=0)
    for j in range(V.shape[1]):
        k = int(np.argmax(np.abs(V[:, j])))  # first index among ties
        pivot = V[k, j]
        V[:, j] *= np.conj(pivot) / abs(pivot)
        V[k, j] = abs(V[k, j])
    return V


def _sort_key(lam, v):
    vec = tuple(c for z in v for c in (-z.real, -z.imag))
    return (-abs(lam), -lam.real, -lam.imag) + vec


def eigenframe(M):
    """Canonical right eigen-decomposition ``(V, w, cond)`` of a real square matrix.

    Columns are unit-norm and phase-fixed. Ordering: descending ``|w|``, then
    descending real part, then the member with nonnegative imaginary part of a
    conjugate pair first, then lexicographically descending eigenvector.
    """
    M = np.asarray(M, dtype=np.float64)
    w, V = np.linalg.eig(M)
    w = np.asarray(w, dtype=np.complex128)
    V = fix_phase(V)
    order = sorted(range(len(w)), key=lambda j: _sort_key(w[j], V[:, j]))
    V = V[:, order]
    w = w[order]
    cond = float(np.linalg.cond(V))
    return V, w, cond


def decompose(sig):
    """Modes and eigenvalues of ``sig.Q`` and ``sig.A``.

    Eigenbases with condition number above 1e12 are kept but flagged
    ``"near-defective"`` and a :class:`NearDefectiveWarning` is issued.
    """
    if sig.m < 1:
        raise InputError("empty signature")
    Tbar, Lbar, cond_bar = eigenframe(sig.Q)
    That, Lhat, cond_hat = eigenframe(sig.A)
    flags = []
    for name, c in (("Tbar", cond_bar), ("That", cond_hat)):
        if not np.isfinite(c) or c > NEAR_DEFECTIVE_COND:
            flags.append(f"near-defective:{name}")
            warnings.warn(f"{name} eigenbasis condition {c:.3g} exceeds {NEAR_DEFECTIVE_COND:g}",
                          NearDefectiveWarning, stacklevel=2)
    return ModalFeatures(Tbar, Lbar, That, Lhat, cond_bar, cond_hat, flags)


def mode_similarity(v, w):
    """``|<v, w>|`` for unit vectors, in ``[0, 1]``."""
    v = np.asarray(v, dtype=np.complex128)
    w = np.asarray(w, dtype=np.complex128)
    for name, x in (("v", v), ("w", w)):
        if abs(np.linalg.norm(x) - 1.0) > UNIT_TOL:
            raise InputError(f"{name} is not a unit vector (norm {np.linalg.norm(x):.12g})")
    return float(min(1.0, abs(np.vdot(v, w))))


def similarity_matrix(T1, T2):
    """``S[i, j] = |T1[:, i]^H T2[:, j]|`` clipped to ``[0, 1]``."""
    if T1.shape != T2.shape:
        raise InputError(f"frame shapes differ: {T1.shape} vs {T2.shape}")
    return np.minimum(np.abs(T1.conj().T @ T2), 1.0)


def best_assignment(S):
    """Maximum-total assignment of rows to columns of a square similarity matrix.

    Returns ``(assignment, similarities)`` with ``assignment[i]`` the column
    paired with row ``i``.
    """
    rows, cols = linear_sum_assignment(S, maximize=True)
    assignment = np.empty(S.shape[0], dtype=int)
    assignment[rows] = cols
    return assignment, S[np.arange(S.shape[0]), assignment]


def brute_force_assignment(S):
    """Exhaustive search over all permutations; for checking small cases only."""
    m = S.shape[0]
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(m)):
        total = S[np.arange(m), perm].sum()
        if total > best:
            best, best_perm = total, perm
    return np.array(best_perm), best


def match_modes(F1, F2):
    if F1.m != F2.m:
        raise InputError(f"cannot match m={F1.m} modes against m={F2.m}")
    out = []
    for name in ("Tbar", "That"):
        assignment, sims = best_assignment(similarity_matrix(getattr(F1, name), getattr(F2, name)))
        out.append(ModeMatch(assignment, sims))
    return tuple(out)


def modal_distance(F1, F2):
    """``2m`` minus the optimal matched similarity totals of both mode frames."""
    match_bar, match_hat = match_modes(F1, F2)
    return max(0.0, 2 * F1.m - match_bar.total - match_hat.total)
