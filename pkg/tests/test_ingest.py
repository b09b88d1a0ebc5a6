import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from causal_fingerprint.errors import InputError, LoadError
from causal_fingerprint.ingest import (ManifestEntry, PartitionSpec, Recording, load_corpus,
                                       load_manifest, load_recording, manifest_from_dict,
                                       normalize, partition, read_csv_matrix, write_csv_matrix)
from causal_fingerprint.synth import CohortSpec, generate_cohort, simulate_cohort


def _entry(path):
    return ManifestEntry(path, "s001", "REST", "REST1_LR", 0.72)


def test_zero_csv_loads(tmp_path):
    f = tmp_path / "z.csv"
    f.write_text("a,b,c\n" + "0,0,0\n" * 4)
    rec = load_recording(f, _entry(f))
    assert rec.data.shape == (3, 4)
    assert not rec.data.any()
    assert rec.channel_names == ("a", "b", "c")


def test_short_row_names_line(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("a,b,c\n1,2,3\n4,5\n6,7,8\n")
    with pytest.raises(LoadError) as exc:
        read_csv_matrix(f)
    assert exc.value.line == 3
    assert "line 3" in str(exc.value)


def test_non_numeric_cell_names_column(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("a,b\n1,2\n3,oops\n")
    with pytest.raises(LoadError) as exc:
        read_csv_matrix(f)
    assert (exc.value.line, exc.value.column) == (3, 2)


@pytest.mark.parametrize("body", ["a,b\n", "a,b\n1,2\n", "", "a,b\n1,nan\n2,3\n"])
def test_rejects_too_short_or_bad(tmp_path, body):
    f = tmp_path / "x.csv"
    f.write_text(body)
    with pytest.raises(LoadError):
        read_csv_matrix(f)


def test_malformed_quote(tmp_path):
    f = tmp_path / "x.csv"
    f.write_text('a,b\n1,"2\n3,4\n')
    with pytest.raises(LoadError):
        read_csv_matrix(f)


def test_recording_validation():
    with pytest.raises(InputError):
        Recording("s", "t", "x", np.zeros((1, 5)), 1.0)
    with pytest.raises(InputError):
        Recording("s", "t", "x", np.zeros((3, 5)), 0.0)
    with pytest.raises(InputError):
        Recording("s", "t", "x", np.full((3, 5), np.inf), 1.0)


def test_csv_round_trip_is_bitwise(tmp_path, rng):
    data = rng.standard_normal((4, 7)) * 10.0 ** rng.integers(-8, 8, (4, 7))
    write_csv_matrix(tmp_path / "r.csv", data, ["a", "b", "c", "d"])
    names, back = read_csv_matrix(tmp_path / "r.csv")
    assert names == ["a", "b", "c", "d"]
    assert np.array_equal(back, data)


def test_synthetic_corpus_round_trip(tmp_path):
    spec = CohortSpec(n_subjects=2, tasks=("REST",), m=4, n=1, T=50, sessions=("A", "B"))
    manifest = generate_cohort(spec, tmp_path)
    loaded, part, _ = load_corpus(load_manifest(tmp_path / "manifest.json"), "none")
    direct = {r.key: r for r in simulate_cohort(spec)}
    assert len(loaded) == len(manifest.entries) == 4
    for rec in loaded:
        assert np.array_equal(rec.data, direct[rec.key].data)
    assert (part.m, part.n) == (4, 1)


def test_normalize_examples():
    rec = Recording("s", "t", "x", np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]), 1.0)
    out, warnings = normalize(rec)
    assert np.allclose(out.data[0], [-1.0, 0.0, 1.0], atol=1e-15)
    assert not out.data[1].any()
    assert len(warnings) == 1 and "channel 1" in warnings[0]
    same, w = normalize(rec, "none")
    assert np.array_equal(same.data, rec.data) and w == []
    with pytest.raises(InputError):
        normalize(rec, "minmax")


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 20), elements=st.floats(-1e3, 1e3)))
def test_zscore_moments(data):
    data = data + np.arange(20) * 1e-3  # keep every channel non-constant
    out, _ = normalize(Recording("s", "t", "x", data, 1.0))
    assert np.all(np.abs(out.data.mean(axis=1)) <= 1e-12)
    assert np.allclose(out.data.std(axis=1, ddof=1), 1.0, atol=1e-12)


def test_partition_examples(rng):
    data = rng.standard_normal((100, 30))
    rec = Recording("s", "t", "x", data, 1.0)
    X, U = partition(rec, PartitionSpec.default(100))
    assert X.shape == (90, 30) and U.shape == (10, 30)
    assert np.array_equal(U, data[90:])
    with pytest.raises(InputError):
        PartitionSpec((0, 1, 1), (2,))
    with pytest.raises(InputError):
        PartitionSpec((0, 1), (1,))
    with pytest.raises(InputError):
        partition(rec, PartitionSpec((0, 1), (100,), total=False))
    with pytest.raises(InputError):
        partition(rec, PartitionSpec((0, 1), (2,)))  # total partition of 100 channels


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(8))), st.integers(1, 6))
def test_partition_reinterleaves(perm, n):
    data = np.arange(8 * 5, dtype=float).reshape(8, 5)
    spec = PartitionSpec(tuple(perm[n:]), tuple(perm[:n]))
    X, U = partition(data, spec)
    back = np.empty_like(data)
    back[list(spec.state_indices)] = X
    back[list(spec.input_indices)] = U
    assert np.array_equal(back, data)


def test_manifest_errors(tmp_path):
    with pytest.raises(InputError):
        manifest_from_dict({"entries": [{"path": "a.csv", "subject": "s"}]})
    dup = {"path": "a.csv", "subject": "s", "task": "t", "session": "x"}
    with pytest.raises(InputError, match="duplicate"):
        manifest_from_dict({"entries": [dup, dict(dup, path="b.csv")]})
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(InputError):
        load_manifest(tmp_path / "m.json")
    (tmp_path / "m.json").write_text(json.dumps({"entries": [dup]}))
    with pytest.raises(InputError, match="not found"):
        load_corpus(load_manifest(tmp_path / "m.json"))


def test_manifest_selection(tmp_path):
    raw = {"entries": [{"path": f"{s}_{x}.csv", "subject": s, "task": "REST", "session": x}
                       for s in ("s1", "s2") for x in ("A", "B")],
           "states": [0, 1], "inputs": [2]}
    m = manifest_from_dict(raw, tmp_path)
    assert m.sessions() == ["A", "B"]
    assert len(m.select(session="A")) == 2
    assert m.partition.m == 2 and m.entries[0].path == tmp_path / "s1_A.csv"
