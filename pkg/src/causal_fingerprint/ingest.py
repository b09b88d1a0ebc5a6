"""Loading, validation, normalization and state/input partitioning of recordings.

A recording on disk is a CSV file with a header row of channel names and one
row per time point. In memory it is a :class:`Recording` holding the
``p x T`` matrix (channels as rows).

A corpus is described by a JSON manifest::

    {"entries": [{"path": "s01_REST_REST1_LR.csv", "subject": "s01",
                  "task": "REST", "session": "REST1_LR", "dt": 0.72}, ...],
     "states": [0, 1, ...], "inputs": [20, 21, ...],
     "normalization": "zscore_per_channel"}

Relative paths are resolved against the manifest's directory.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, LoadError

NORMALIZATIONS = ("none", "zscore_per_channel")
DEFAULT_NORMALIZATION = "zscore_per_channel"


@dataclass(frozen=True)
class Recording:
    subject_id: str
    task_id: str
    session_tag: str
    data: np.ndarray
    dt: float = 1.0
    channel_names: tuple = ()

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 2:
            raise InputError(f"recording data must be 2-D, got shape {data.shape}")
        p, T = data.shape
        if p < 2 or T < 2:
            raise InputError(f"recording needs p >= 2 and T >= 2, got p={p}, T={T}")
        if not np.all(np.isfinite(data)):
            raise InputError("recording data contains non-finite values")
        if not (self.dt > 0):
            raise InputError(f"dt must be positive, got {self.dt}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def key(self):
        return (self.subject_id, self.task_id, self.session_tag)

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]

    def with_data(self, data):
        return Recording(self.subject_id, self.task_id, self.session_tag, data,
                         self.dt, self.channel_names)


@dataclass(frozen=True)
class PartitionSpec:
    """Split of the ``p`` channels into ``m`` states and ``n`` inputs."""

    state_indices: tuple
    input_indices: tuple
    total: bool = True

    def __post_init__(self):
        states = tuple(int(i) for i in self.state_indices)
        inputs = tuple(int(i) for i in self.input_indices)
        object.__setattr__(self, "state_indices", states)
        object.__setattr__(self, "input_indices", inputs)
        if len(set(states)) != len(states):
            raise InputError("duplicate index in state_indices")
        if len(set(inputs)) != len(inputs):
            raise InputError("duplicate index in input_indices")
        both = set(states) & set(inputs)
        if both:
            raise InputError(f"indices {sorted(both)} are both states and inputs")
        if len(states) < 2:
            raise InputError("need at least 2 state channels")
        if len(inputs) < 1:
            raise InputError("need at least 1 input channel")
        if min(states + inputs) < 0:
            raise InputError("channel indices must be nonnegative")

    @property
    def m(self):
        return len(self.state_indices)

    @property
    def n(self):
        return len(self.input_indices)

    def validate(self, p):
        top = max(self.state_indices + self.input_indices)
        if top >= p:
            raise InputError(f"channel index {top} out of range for p={p}")
        if self.total and self.m + self.n != p:
            raise InputError(
                f"total partition must cover all channels: m + n = {self.m + self.n} != p = {p}"
            )
        return self

    @classmethod
    def default(cls, p, n_inputs=None):
        """Last ``n_inputs`` channels are inputs, the rest are states.

        Without ``n_inputs`` one tenth of the channels (at least one) become
        inputs, the 90/10 ratio used for 100-parcel data.
        """
        if n_inputs is None:
            n_inputs = max(1, int(round(p / 10)))
        if not 1 <= n_inputs <= p - 2:
            raise InputError(f"cannot take {n_inputs} inputs from {p} channels")
        return cls(tuple(range(p - n_inputs)), tuple(range(p - n_inputs, p)))


@dataclass
class ManifestEntry:
    path: Path
    subject_id: str
    task_id: str
    session_tag: str
    dt: float = 1.0


@dataclass
class CorpusManifest:
    entries: list
    partition: PartitionSpec | None = None
    normalization: str = DEFAULT_NORMALIZATION
    root: Path = field(default_factory=Path)
    extra: dict = field(default_factory=dict)

    def sessions(self):
        return sorted({e.session_tag for e in self.entries})

    def tasks(self):
        return sorted({e.task_id for e in self.entries})

    def select(self, *, task=None, session=None):
        return [e for e in self.entries
                if (task is None or e.task_id == task)
                and (session is None or e.session_tag == session)]


def _parse_float(text, path, line, column):
    try:
        value = float(text)
    except ValueError:
        raise LoadError(f"non-numeric cell {text!r}", path, line, column) from None
    if not math.isfinite(value):
        raise LoadError(f"non-finite cell {text!r}", path, line, column)
    return value


def read_csv_matrix(path):
    """Parse a recording CSV into ``(channel_names, data)`` with data ``p x T``."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh, strict=True))
    except csv.Error as exc:
        raise LoadError(f"malformed CSV: {exc}", path) from None
    except OSError as exc:
        raise LoadError(f"cannot read file: {exc.strerror}", path) from None
    if not rows:
        raise LoadError("empty file, expected a header row", path, 1)
    header = [h.strip() for h in rows[0]]
    p = len(header)
    if p == 0 or any(h == "" for h in header):
        raise LoadError("header row has empty channel names", path, 1)
    values = []
    for k, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != p:
            raise LoadError(f"row has {len(row)} fields, header has {p}", path, k)
        values.append([_parse_float(cell, path, k, j) for j, cell in enumerate(row, start=1)])
    if len(values) < 2:
        raise LoadError(f"need at least 2 time points, found {len(values)}", path)
    return header, np.asarray(values, dtype=np.float64).T


def write_csv_matrix(path, data, channel_names=None):
    """Write a ``p x T`` matrix as a time-major CSV with 17 significant digits."""
    data = np.asarray(data, dtype=np.float64)
    p = data.shape[0]
    if channel_names is None:
        channel_names = [f"ch{i:03d}" for i in range(p)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(channel_names)
        for column in data.T:
            writer.writerow([format(v, ".17g") for v in column])


def load_recording(path, meta):
    """Load one CSV file into a :class:`Recording` using a manifest entry for labels."""
    names, data = read_csv_matrix(path)
    try:
        return Recording(meta.subject_id, meta.task_id, meta.session_tag, data,
                         float(meta.dt), tuple(names))
    except InputError as exc:
        raise LoadError(str(exc), path) from None


def normalize(rec, mode=DEFAULT_NORMALIZATION):
    """Return ``(normalized_recording, warnings)``.

    ``zscore_per_channel`` uses the sample standard deviation (``ddof=1``).
    Constant channels are only mean-centered and reported in ``warnings``.
    """
    if mode not in NORMALIZATIONS:
        raise InputError(f"unknown normalization {mode!r}; expected one of {NORMALIZATIONS}")
    if mode == "none":
        return rec, []
    data = rec.data
    centered = data - data.mean(axis=1, keepdims=True)
    std = data.std(axis=1, ddof=1)
    warnings = []
    out = np.empty_like(centered)
    for i in range(data.shape[0]):
        if std[i] > 0 and np.any(centered[i] != 0):
            z = centered[i] / std[i]
            out[i] = z - z.mean()  # second pass removes the rounding left by large offsets
        else:
            out[i] = 0.0
            warnings.append(f"{'/'.join(rec.key)}: channel {i} has zero variance")
    return rec.with_data(out), warnings


def partition(rec, spec):
    """Split a recording into state rows ``X`` (m x T) and input rows ``U`` (n x T)."""
    data = rec.data if isinstance(rec, Recording) else np.asarray(rec, dtype=np.float64)
    if spec.total:
        spec.validate(data.shape[0])
    else:
        _check_range(spec, data.shape[0])
    X = data[list(spec.state_indices)]
    U = data[list(spec.input_indices)]
    return X, U


def _check_range(spec, p):
    top = max(spec.state_indices + spec.input_indices)
    if top >= p:
        raise InputError(f"channel index {top} out of range for p={p}")


def load_manifest(path):
    path = Path(path)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"manifest {path} is not valid JSON: {exc}") from None
    return manifest_from_dict(raw, root=path.parent)


def manifest_from_dict(raw, root=Path(".")):
    if not isinstance(raw, dict) or "entries" not in raw:
        raise InputError("manifest must be an object with an 'entries' list")
    entries = []
    for k, e in enumerate(raw["entries"]):
        missing = {"path", "subject", "task", "session"} - set(e)
        if missing:
            raise InputError(f"manifest entry {k} lacks {sorted(missing)}")
        p = Path(e["path"])
        entries.append(ManifestEntry(p if p.is_absolute() else Path(root) / p,
                                     str(e["subject"]), str(e["task"]),
                                     str(e["session"]), float(e.get("dt", 1.0))))
    keys = [(e.subject_id, e.task_id, e.session_tag) for e in entries]
    if len(set(keys)) != len(keys):
        dup = next(k for k in keys if keys.count(k) > 1)
        raise InputError(f"duplicate (subject, task, session) in manifest: {dup}")
    part = None
    if "states" in raw or "inputs" in raw:
        if "states" not in raw or "inputs" not in raw:
            raise InputError("manifest must give both 'states' and 'inputs' or neither")
        part = PartitionSpec(tuple(raw["states"]), tuple(raw["inputs"]),
                             bool(raw.get("total", True)))
    norm = raw.get("normalization", DEFAULT_NORMALIZATION)
    if norm not in NORMALIZATIONS:
        raise InputError(f"unknown normalization {norm!r}")
    extra = {k: v for k, v in raw.items()
             if k not in {"entries", "states", "inputs", "normalization", "total"}}
    return CorpusManifest(entries, part, norm, Path(root), extra)


def manifest_to_dict(manifest):
    out = {"entries": [
        {"path": _relative(e.path, manifest.root),
         "subject": e.subject_id, "task": e.task_id, "session": e.session_tag, "dt": e.dt}
        for e in manifest.entries]}
    if manifest.partition is not None:
        out["states"] = list(manifest.partition.state_indices)
        out["inputs"] = list(manifest.partition.input_indices)
    out["normalization"] = manifest.normalization
    out.update(manifest.extra)
    return out


def _relative(path, root):
    try:
        return Path(path).relative_to(root).as_posix()
    except ValueError:
        return str(path)


def check_files(manifest):
    """Raise :class:`InputError` naming the first missing file."""
    for e in manifest.entries:
        if not Path(e.path).is_file():
            raise InputError(f"recording file not found: {e.path}")


def load_corpus(manifest, normalization=None):
    """Load, validate and normalize every recording of a manifest.

    Returns ``(recordings, partition, warnings)``. When the manifest has no
    partition the default one (last tenth of the channels as inputs) is used.
    """
    check_files(manifest)
    mode = manifest.normalization if normalization is None else normalization
    recordings, warnings = [], []
    p = None
    for e in manifest.entries:
        rec = load_recording(e.path, e)
        if p is None:
            p = rec.n_channels
        elif rec.n_channels != p:
            raise InputError(f"{e.path}: {rec.n_channels} channels, corpus has {p}")
        rec, w = normalize(rec, mode)
        recordings.append(rec)
        warnings.extend(w)
    part = manifest.partition if manifest.partition is not None else PartitionSpec.default(p)
    if p is not None:
        part.validate(p)
    return recordings, part, warnings


def group_by(recordings: Sequence[Recording], attr):
    out = {}
    for rec in recordings:
        out.setdefault(getattr(rec, attr), []).append(rec)
    return out
