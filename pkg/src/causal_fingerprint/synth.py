"""Ground-truth two-timescale systems, their simulation, and seeded synthetic cohorts.

A cohort mimics the subject/session structure of a multi-session scanning
study: every task has a population base system, every subject a persistent
deviation from it, and every session a smaller fresh deviation on top.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import InputError, InstabilityError, NumericalError
from .ingest import (CorpusManifest, ManifestEntry, PartitionSpec, Recording, manifest_to_dict,
                     write_csv_matrix)

STATE_GUARD = 1e9
MAX_RESAMPLE = 10


def spectral_radius(M):
    return float(np.max(np.abs(np.linalg.eigvals(M)))) if M.size else 0.0


@dataclass
class GroundTruthSystem:
    Q: np.ndarray
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if np.any(np.diag(self.Q) != 0):
            raise InputError("ground-truth Q must have a zero diagonal")
        smin = np.linalg.svd(np.eye(self.m) - self.Q, compute_uv=False)[-1]
        if smin < 1e-6:
            raise InputError(f"I - Q is numerically singular (smallest singular value {smin:.3g})")

    @property
    def m(self):
        return self.Q.shape[0]

    @property
    def n(self):
        return self.B.shape[1]

    def reduced(self):
        """``(M, N)`` with ``x(t) = M x(t-1) + N u(t-1)`` in the noiseless case."""
        IQ = np.eye(self.m) - self.Q
        return np.linalg.solve(IQ, self.A), np.linalg.solve(IQ, self.B)

    @property
    def rho(self):
        return spectral_radius(self.reduced()[0])

    @property
    def stability_margin(self):
        return 1.0 - self.rho

    @property
    def R(self):
        return np.hstack([self.Q, self.A, self.B])


def _rescale_A(Q, A, rho_target):
    rho = spectral_radius(np.linalg.solve(np.eye(Q.shape[0]) - Q, A))
    if rho < 1e-12:
        return None
    return A * (rho_target / rho)


def sample_system(m, n, sparsity_q=0.7, rho_target=0.9, seed=None):
    """Random stable system with ``rho((I - Q)^-1 A) = rho_target``.

    ``Q`` keeps each off-diagonal entry with probability ``1 - sparsity_q``
    and is scaled to spectral norm 0.5. ``B`` has standard normal entries
    divided by ``sqrt(n)``.
    """
    if not 0 < rho_target < 1:
        raise InputError(f"rho_target must lie in (0, 1), got {rho_target}")
    if not 0 <= sparsity_q <= 1:
        raise InputError(f"sparsity_q must lie in [0, 1], got {sparsity_q}")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RESAMPLE):
        Q = rng.standard_normal((m, m)) * (rng.random((m, m)) >= sparsity_q)
        np.fill_diagonal(Q, 0.0)
        qn = np.linalg.norm(Q, 2)
        if qn > 0:
            Q *= 0.5 / qn
        A = rng.standard_normal((m, m)) / np.sqrt(m)
        B = rng.standard_normal((m, n)) / np.sqrt(n)
        A = _rescale_A(Q, A, rho_target)
        if A is not None:
            return GroundTruthSystem(Q, A, B)
    raise NumericalError(f"could not rescale A to rho={rho_target} after {MAX_RESAMPLE} draws")


def make_input(n, T, mode="white", rng=None):
    rng = np.random.default_rng(rng)
    e = rng.standard_normal((n, T))
    if mode == "white":
        return e
    if mode == "smooth":
        a = 0.8
        return lfilter([np.sqrt(1 - a * a)], [1.0, -a], e, axis=1)
    raise InputError(f"unknown input mode {mode!r}; expected 'white' or 'smooth'")


def simulate(system, T, input_mode="white", sigma_noise=0.0, seed=None, U=None):
    """Simulate ``x(t) = (I - Q)^-1 (A x(t-1) + B u(t-1) + w(t))`` from ``x(0) = 0``.

    Returns ``(X, U)`` of shapes ``(m, T)`` and ``(n, T)``. A caller-supplied
    ``U`` replaces the generated input.
    """
    if T < 2:
        raise InputError("T must be at least 2")
    if sigma_noise < 0:
        raise InputError("sigma_noise must be nonnegative")
    rng = np.random.default_rng(seed)
    m = system.m
    if U is None:
        U = make_input(system.n, T, input_mode, rng)
    else:
        U = np.asarray(U, dtype=np.float64)
        if U.shape != (system.n, T):
            raise InputError(f"U must have shape {(system.n, T)}, got {U.shape}")
    W = sigma_noise * rng.standard_normal((m, T)) if sigma_noise > 0 else np.zeros((m, T))
    IQ = np.eye(m) - system.Q
    M = np.linalg.solve(IQ, system.A)
    drive = np.linalg.solve(IQ, system.B @ U[:, :-1] + W[:, 1:])
    X = np.zeros((m, T))
    for t in range(1, T):
        X[:, t] = M @ X[:, t - 1] + drive[:, t - 1]
        if not np.all(np.abs(X[:, t]) < STATE_GUARD):
            raise InstabilityError(f"state norm exceeded {STATE_GUARD:g} at t={t}")
    return X, U


@dataclass
class CohortSpec:
    n_subjects: int = 30
    tasks: tuple = ("REST", "LANG", "GAMB", "MOTO")
    m: int = 20
    n: int = 4
    sigma_population: float = 0.05
    sigma_session: float = 0.01
    sigma_noise: float = 0.02
    T: int = 600
    sessions: tuple = ("REST1_LR", "REST2_LR", "REST1_RL", "REST2_RL")
    seed: int = 0
    dt: float = 0.72
    sparsity_q: float = 0.7
    rho_target: float = 0.9
    rho_max: float = 0.98
    q_norm_max: float = 0.9
    input_mode: str = "white"
    # None means ("GAMB", "MOTO") when both tasks exist, [] disables blending
    overlap_pair: tuple | None = None
    # fraction of the first base that the second task of the pair shares
    overlap: float = 0.5

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self.sessions = tuple(self.sessions)
        if self.overlap_pair is not None:
            self.overlap_pair = tuple(self.overlap_pair)
        if self.n_subjects < 2:
            raise InputError("n_subjects must be at least 2")
        if min(self.sigma_population, self.sigma_session, self.sigma_noise) < 0:
            raise InputError("all sigmas must be nonnegative")
        if not self.tasks or not self.sessions:
            raise InputError("need at least one task and one session")
        if len(set(self.tasks)) != len(self.tasks) or len(set(self.sessions)) != len(self.sessions):
            raise InputError("task and session names must be unique")
        pair = self.overlap_pair
        if pair and (len(pair) != 2 or len(set(pair)) != 2 or not set(pair) <= set(self.tasks)):
            raise InputError(f"overlap_pair {pair} must name two distinct tasks")
        if not 0 <= self.overlap <= 1:
            raise InputError("overlap must lie in [0, 1]")
        if self.m < 2 or self.n < 1:
            raise InputError("need m >= 2 and n >= 1")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown cohort spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def resolved_overlap_pair(self):
        if self.overlap_pair is not None:
            return self.overlap_pair
        default = ("GAMB", "MOTO")
        return default if set(default) <= set(self.tasks) else ()

    def subjects(self):
        width = max(3, len(str(self.n_subjects)))
        return [f"s{k:0{width}d}" for k in range(1, self.n_subjects + 1)]


def _child_rng(spec, *key):
    return np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=key))


def _perturbation(rng, m, n):
    dQ = rng.standard_normal((m, m))
    np.fill_diagonal(dQ, 0.0)
    return dQ, rng.standard_normal((m, m)), rng.standard_normal((m, n))


def _clamped(Q, A, B, spec):
    np.fill_diagonal(Q, 0.0)
    qn = np.linalg.norm(Q, 2)
    if qn > spec.q_norm_max:
        Q = Q * (spec.q_norm_max / qn)
    rho = spectral_radius(np.linalg.solve(np.eye(Q.shape[0]) - Q, A))
    if rho > spec.rho_max:
        A = A * (spec.rho_max / rho)
    return GroundTruthSystem(Q, A, B)


def task_bases(spec):
    bases = {}
    for k, task in enumerate(spec.tasks):
        seed = np.random.SeedSequence(spec.seed, spawn_key=(0, k))
        bases[task] = sample_system(spec.m, spec.n, spec.sparsity_q, spec.rho_target, seed)
    pair = spec.resolved_overlap_pair()
    if pair:
        first, second = pair
        a, b = bases[first], bases[second]
        w = spec.overlap
        Q = w * a.Q + (1 - w) * b.Q
        A = _rescale_A(Q, w * a.A + (1 - w) * b.A, spec.rho_target)
        if A is None:
            raise NumericalError("degenerate blended base system")
        bases[second] = GroundTruthSystem(Q, A, w * a.B + (1 - w) * b.B)
    return bases


def cohort_systems(spec):
    """``{(subject, task, session): GroundTruthSystem}`` for every recording."""
    bases = task_bases(spec)
    out = {}
    for k, task in enumerate(spec.tasks):
        base = bases[task]
        for s, subject in enumerate(spec.subjects()):
            dQ, dA, dB = _perturbation(_child_rng(spec, 1, k, s), spec.m, spec.n)
            sp = spec.sigma_population
            sQ, sA, sB = base.Q + sp * dQ, base.A + sp * dA, base.B + sp * dB
            for j, session in enumerate(spec.sessions):
                eQ, eA, eB = _perturbation(_child_rng(spec, 2, k, s, j), spec.m, spec.n)
                ss = spec.sigma_session
                out[(subject, task, session)] = _clamped(sQ + ss * eQ, sA + ss * eA,
                                                         sB + ss * eB, spec)
    return out


def channel_names(m, n):
    return [f"x{i:02d}" for i in range(m)] + [f"u{i:02d}" for i in range(n)]


def simulate_cohort(spec):
    """In-memory cohort: list of :class:`Recording` with states first, inputs last."""
    recs = []
    names = channel_names(spec.m, spec.n)
    systems = cohort_systems(spec)
    index = {(t, s, j): (k, i, jj)
             for k, t in enumerate(spec.tasks)
             for i, s in enumerate(spec.subjects())
             for jj, j in enumerate(spec.sessions)}
    for (subject, task, session), system in systems.items():
        k, i, j = index[(task, subject, session)]
        X, U = simulate(system, spec.T, spec.input_mode, spec.sigma_noise,
                        np.random.SeedSequence(spec.seed, spawn_key=(3, k, i, j)))
        recs.append(Recording(subject, task, session, np.vstack([X, U]), spec.dt, names))
    return recs


def cohort_partition(spec):
    return PartitionSpec(tuple(range(spec.m)), tuple(range(spec.m, spec.m + spec.n)))


def generate_cohort(spec, out_dir):
    """Write one CSV per recording plus ``manifest.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in simulate_cohort(spec):
        name = f"{rec.subject_id}_{rec.task_id}_{rec.session_tag}.csv"
        write_csv_matrix(out_dir / name, rec.data, rec.channel_names)
        entries.append(ManifestEntry(out_dir / name, rec.subject_id, rec.task_id,
                                     rec.session_tag, rec.dt))
    manifest = CorpusManifest(entries, cohort_partition(spec), "zscore_per_channel", out_dir,
                              {"seed": spec.seed, "cohort": spec.to_dict()})
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True) + "\n")
    return manifest
