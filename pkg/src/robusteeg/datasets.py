"""Feature datasets, the EEGF file format, and the synthetic desk-scale generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream


class DatasetFileError(ValueError):
    pass


@dataclass
class Dataset:
    """DE feature samples X (N, n, c, t) with integer labels and subject ids."""

    X: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if self.X.ndim != 4:
            raise ValueError(f"X must be (N, n, c, t), got shape {self.X.shape}")
        if not len(self.X) == len(self.labels) == len(self.subjects):
            raise ValueError("X, labels and subjects must have the same length")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.X.shape[1:])

    @property
    def subject_ids(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subjects))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.labels[idx], self.subjects[idx])

    def by_subjects(self, subjects) -> "Dataset":
        return self.subset(np.isin(self.subjects, list(subjects)))

    def replace_X(self, X) -> "Dataset":
        return Dataset(X, self.labels, self.subjects)


# EEGF ----------------------------------------------------------------------

_MAGIC = b"EEGF"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


def _record_dtype(n, c, t):
    return np.dtype([("subject", "<u2"), ("label", "u1"), ("pad", "u1"), ("x", "<f4", (n, c, t))])


def write_dataset(path, dataset: Dataset) -> None:
    n, c, t = dataset.sample_shape
    if len(dataset) and (dataset.subjects.min() < 0 or dataset.subjects.max() > 0xFFFF):
        raise ValueError("subject ids must fit in an unsigned 16-bit field")
    if len(dataset) and (dataset.labels.min() < 0 or dataset.labels.max() > 0xFF):
        raise ValueError("labels must fit in an unsigned 8-bit field")
    rec = np.zeros(len(dataset), dtype=_record_dtype(n, c, t))
    rec["subject"] = dataset.subjects
    rec["label"] = dataset.labels
    rec["x"] = dataset.X
    header = _HEADER.pack(_MAGIC, _VERSION, n, c, t, len(dataset), len(np.unique(dataset.subjects)))
    Path(path).write_bytes(header + rec.tobytes())


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DatasetFileError(f"truncated EEGF header in {path}: {len(buf)} bytes, need {_HEADER.size}")
    magic, version, n, c, t, count, _ = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise DatasetFileError(f"{path} is not an EEGF file (bad magic at offset 0)")
    if version != _VERSION:
        raise DatasetFileError(f"unsupported EEGF version {version} at offset 4")
    dt = _record_dtype(n, c, t)
    need = _HEADER.size + count * dt.itemsize
    if len(buf) != need:
        raise DatasetFileError(
            f"EEGF size mismatch in {path}: header promises {count} records ending at offset "
            f"{need}, file has {len(buf)} bytes")
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=_HEADER.size)
    return Dataset(rec["x"].astype(np.float32), rec["label"].astype(np.int64),
                   rec["subject"].astype(np.int64))


# synthetic data --------------------------------------------------------------

def synth_generate(num_subjects: int, samples_per_subject: int, shape=(5, 62, 16),
                   num_classes: int = 3, class_sep: float = 2.0, subject_shift: float = 0.5,
                   robust_fraction: float = 0.1, seed: int = 0) -> Dataset:
    """Gaussian class clusters over (n, c, t) feature maps.

    Class k has a mean map ``class_sep * mu_k`` built from two parts: a
    sparse set of (band, channel) cells carrying a strong class offset
    (``robust_fraction`` of the cells) and a weak offset spread over every
    remaining cell. Each pattern is constant over time, as DE maps change
    slowly. Subject s adds its own random mean map of scale
    ``subject_shift``. Noise is unit-variance white Gaussian. Labels are
    balanced within each subject.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if num_subjects < 1 or samples_per_subject < 1:
        raise ValueError("need at least one subject and one sample per subject")
    n, c, t = shape
    rng = stream(seed, "synth")
    cells = n * c
    n_strong = max(1, int(round(robust_fraction * cells)))
    strong = np.zeros(cells, dtype=bool)
    strong[rng.choice(cells, size=n_strong, replace=False)] = True

    means = np.zeros((num_classes, n, c, t))
    for k in range(num_classes):
        dirs = rng.standard_normal(cells)
        pattern = np.where(strong, np.sign(dirs), 0.15 * np.sign(dirs))
        means[k] = pattern.reshape(n, c, 1)
    means -= means.mean(axis=0, keepdims=True)
    means *= class_sep / 2

    X, labels, subjects = [], [], []
    for s in range(num_subjects):
        offset = subject_shift * rng.standard_normal((n, c, 1))
        y = np.arange(samples_per_subject) % num_classes
        rng.shuffle(y)
        noise = rng.standard_normal((samples_per_subject, n, c, t))
        X.append(means[y] + offset + noise)
        labels.append(y)
        subjects.append(np.full(samples_per_subject, s))
    return Dataset(np.concatenate(X).astype(np.float32), np.concatenate(labels),
                   np.concatenate(subjects))
