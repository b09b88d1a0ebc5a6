import hashlib

import numpy as np
import pytest

from causal_fingerprint.errors import InputError, InstabilityError
from causal_fingerprint.fingerprint import evaluate_subject_id, leave_one_in_protocols
from causal_fingerprint.ingest import normalize
from causal_fingerprint.synth import (CohortSpec, GroundTruthSystem, cohort_partition,
                                      cohort_systems, generate_cohort, make_input, sample_system,
                                      simulate, simulate_cohort, spectral_radius, task_bases)


def power_iteration_norm(M, iters=500):
    """Oracle for the spectral norm: sqrt of the top eigenvalue of M^T M."""
    v = np.ones(M.shape[1])
    for _ in range(iters):
        v = M.T @ (M @ v)
        v /= np.linalg.norm(v)
    return float(np.sqrt(v @ (M.T @ (M @ v))))


def test_sample_system_invariants():
    for seed in range(10):
        s = sample_system(8, 2, seed=seed)
        assert abs(s.stability_margin - 0.1) <= 1e-9
        assert np.all(np.diag(s.Q) == 0)
        assert power_iteration_norm(s.Q) <= 0.5 + 1e-9


def test_sample_system_is_seeded():
    a, b = sample_system(5, 2, seed=9), sample_system(5, 2, seed=9)
    assert np.array_equal(a.R, b.R)
    assert not np.array_equal(a.R, sample_system(5, 2, seed=10).R)


def test_ground_truth_validation():
    with pytest.raises(InputError):
        GroundTruthSystem(np.eye(2), np.zeros((2, 2)), np.zeros((2, 1)))
    Q = np.array([[0.0, 1.0], [1.0, 0.0]])  # I - Q singular
    with pytest.raises(InputError):
        GroundTruthSystem(Q, np.zeros((2, 2)), np.zeros((2, 1)))
    with pytest.raises(InputError):
        sample_system(3, 1, rho_target=1.0)


def test_silent_system_stays_at_zero():
    s = sample_system(4, 1, seed=0)
    quiet = GroundTruthSystem(s.Q, s.A, np.zeros((4, 1)))
    X, _ = simulate(quiet, 100, sigma_noise=0.0, seed=0)
    assert not X.any()


def test_unstable_system_trips_guard():
    s = GroundTruthSystem(np.zeros((2, 2)), 1.5 * np.eye(2), np.ones((2, 1)))
    with pytest.raises(InstabilityError):
        simulate(s, 2000, seed=0)


def test_long_run_variance_is_bounded():
    s = sample_system(6, 2, seed=1)
    X, _ = simulate(s, 20000, sigma_noise=0.1, seed=2)
    first, second = X[:, 5000:12500].var(axis=1), X[:, 12500:].var(axis=1)
    assert np.all(np.isfinite(X))
    assert np.all(np.abs(np.log(first / second)) < 0.5)


def test_input_modes():
    rng = np.random.default_rng(0)
    smooth = make_input(2, 20000, "smooth", rng)
    lag1 = np.mean(smooth[:, 1:] * smooth[:, :-1]) / np.mean(smooth ** 2)
    assert abs(lag1 - 0.8) < 0.05 and abs(smooth.var() - 1) < 0.1
    with pytest.raises(InputError):
        make_input(2, 10, "pink")


def test_given_input_is_used():
    s = sample_system(3, 1, seed=0)
    U = np.ones((1, 50))
    _, U2 = simulate(s, 50, U=U)
    assert np.array_equal(U2, U)
    with pytest.raises(InputError):
        simulate(s, 50, U=np.ones((2, 50)))


def test_cohort_systems_are_clamped_and_stable():
    spec = CohortSpec(n_subjects=5, m=8, n=2, sigma_population=0.5, sigma_session=0.2)
    for system in cohort_systems(spec).values():
        assert np.linalg.norm(system.Q, 2) <= spec.q_norm_max + 1e-9
        assert system.rho <= spec.rho_max + 1e-9
        assert np.all(np.diag(system.Q) == 0)


def test_overlap_blends_the_pair():
    spec = CohortSpec(n_subjects=2, m=6, n=1, overlap=1.0)
    bases = task_bases(spec)
    # full overlap: same Q and B, A only rescaled
    assert np.allclose(bases["GAMB"].Q, bases["MOTO"].Q)
    assert abs(spectral_radius(bases["MOTO"].reduced()[0]) - 0.9) <= 1e-9
    spec0 = CohortSpec(n_subjects=2, m=6, n=1, overlap_pair=[])
    assert spec0.resolved_overlap_pair() == ()
    with pytest.raises(InputError):
        CohortSpec(overlap_pair=("GAMB", "WM"))


def _digest(directory):
    h = hashlib.sha256()
    for f in sorted(directory.iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_generate_cohort_is_byte_identical(tmp_path):
    spec = CohortSpec(n_subjects=3, tasks=("REST", "LANG"), m=4, n=1, T=40, sessions=("A", "B"))
    generate_cohort(spec, tmp_path / "one")
    generate_cohort(CohortSpec.from_dict(spec.to_dict()), tmp_path / "two")
    assert _digest(tmp_path / "one") == _digest(tmp_path / "two")
    assert len(list((tmp_path / "one").glob("*.csv"))) == 12


def test_spec_validation():
    with pytest.raises(InputError):
        CohortSpec(n_subjects=1)
    with pytest.raises(InputError):
        CohortSpec(sigma_noise=-1)
    with pytest.raises(InputError):
        CohortSpec.from_dict({"subjects": 3})
    assert CohortSpec().subjects()[:2] == ["s001", "s002"]


def _rest_accuracy(**kw):
    spec = CohortSpec(tasks=("REST",), **kw)
    recs = [normalize(r)[0] for r in simulate_cohort(spec)]
    reports = [evaluate_subject_id(recs, cohort_partition(spec), p)
               for p in leave_one_in_protocols(spec.sessions)]
    return float(np.mean([r.accuracy for r in reports]))


def test_no_population_spread_is_near_chance():
    n = 10
    acc = _rest_accuracy(n_subjects=n, m=10, n=2, T=300, sigma_population=0.0)
    assert acc <= 3.0 / n


def test_no_session_spread_is_perfect():
    acc = _rest_accuracy(n_subjects=10, m=10, n=2, T=600, sigma_session=0.0)
    assert acc == 1.0


def test_accuracy_falls_with_session_spread():
    ratios = (0.1, 0.2, 0.5, 1.0)
    accs = [_rest_accuracy(n_subjects=15, m=10, n=2, T=400, sessions=("A", "B", "C"),
                           sigma_session=0.05 * r) for r in ratios]
    ordered = sum(a >= b for a, b in zip(accs, accs[1:]))
    assert ordered >= 2 and accs[0] > accs[-1], accs
