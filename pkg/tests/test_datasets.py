import struct

import numpy as np
import pytest

from robusteeg.datasets import Dataset, DatasetFileError, read_dataset, synth_generate, write_dataset
from robusteeg.model import DenseClassifier
from robusteeg.training import AdamState, adam_step, loss_and_grads


def test_round_trip_bit_exact(tmp_path):
    ds = synth_generate(3, 7, (5, 4, 6), seed=2)
    path = tmp_path / "d.eegf"
    write_dataset(path, ds)
    back = read_dataset(path)
    assert back.X.tobytes() == ds.X.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.subjects, ds.subjects)


def test_file_layout(tmp_path):
    ds = Dataset(np.arange(2 * 1 * 2 * 3, dtype=np.float32).reshape(2, 1, 2, 3), [1, 2], [7, 300])
    path = tmp_path / "d.eegf"
    write_dataset(path, ds)
    raw = path.read_bytes()
    assert struct.unpack_from("<4sIIIIII", raw) == (b"EEGF", 1, 1, 2, 3, 2, 2)
    rec = 28
    assert struct.unpack_from("<HBB", raw, rec) == (7, 1, 0)
    assert struct.unpack_from("<6f", raw, rec + 4) == tuple(float(v) for v in range(6))
    assert len(raw) == 28 + 2 * (4 + 24)


def test_empty_dataset(tmp_path):
    path = tmp_path / "e.eegf"
    write_dataset(path, Dataset(np.zeros((0, 2, 3, 4), np.float32), [], []))
    back = read_dataset(path)
    assert len(back) == 0 and back.sample_shape == (2, 3, 4)


def test_corrupted_files(tmp_path):
    path = tmp_path / "d.eegf"
    write_dataset(path, synth_generate(2, 3, (1, 2, 2)))
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFileError, match="magic"):
        read_dataset(path)
    path.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(DatasetFileError, match="version"):
        read_dataset(path)
    path.write_bytes(raw[:-3])
    with pytest.raises(DatasetFileError, match="offset"):
        read_dataset(path)
    path.write_bytes(raw[:10])
    with pytest.raises(DatasetFileError, match="header"):
        read_dataset(path)


def test_field_range_checks(tmp_path):
    with pytest.raises(ValueError):
        write_dataset(tmp_path / "d", Dataset(np.zeros((1, 1, 1, 1)), [300], [0]))
    with pytest.raises(ValueError):
        write_dataset(tmp_path / "d", Dataset(np.zeros((1, 1, 1, 1)), [0], [70000]))


def test_dataset_validation_and_subsets():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), [0, 1], [0, 1])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 1, 1)), [0], [0, 1])
    ds = synth_generate(4, 6, (1, 2, 2))
    assert ds.subject_ids == [0, 1, 2, 3]
    part = ds.by_subjects([1, 3])
    assert set(part.subjects) == {1, 3} and len(part) == 12


def test_synth_is_deterministic_and_balanced():
    a = synth_generate(3, 30, (5, 4, 4), seed=5)
    b = synth_generate(3, 30, (5, 4, 4), seed=5)
    assert a.X.tobytes() == b.X.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.X, synth_generate(3, 30, (5, 4, 4), seed=6).X)
    for s in range(3):
        assert np.bincount(a.labels[a.subjects == s], minlength=3).tolist() == [10, 10, 10]
    assert a.X.dtype == np.float32 and a.sample_shape == (5, 4, 4)


def _probe_accuracy(ds, steps=200):
    x = ds.X.reshape(len(ds), -1).astype(np.float64)
    x = (x - x.mean(0)) / (x.std(0) + 1e-8)
    m = DenseClassifier((x.shape[1],), num_classes=3, seed=0)
    opt = AdamState(lr=1e-2)
    for _ in range(steps):
        _, g, _ = loss_and_grads(m, x, ds.labels)
        adam_step(opt, m.parameters(), g)
    return float(np.mean(np.argmax(m(x).data, 1) == ds.labels))


def test_large_separation_is_linearly_separable():
    ds = synth_generate(4, 60, (5, 4, 4), class_sep=5.0, subject_shift=0.0, seed=1)
    assert _probe_accuracy(ds) >= 0.99


def test_zero_separation_is_chance():
    train = synth_generate(4, 60, (5, 4, 4), class_sep=0.0, seed=1)
    test = synth_generate(4, 300, (5, 4, 4), class_sep=0.0, seed=2)
    x = train.X.reshape(len(train), -1).astype(np.float64)
    m = DenseClassifier((x.shape[1],), num_classes=3, seed=0)
    opt = AdamState(lr=1e-2)
    for _ in range(100):
        _, g, _ = loss_and_grads(m, x, train.labels)
        adam_step(opt, m.parameters(), g)
    acc = np.mean(np.argmax(m(test.X.reshape(len(test), -1).astype(np.float64)).data, 1) == test.labels)
    assert abs(acc - 1 / 3) < 0.08


def test_synth_argument_errors():
    with pytest.raises(ValueError):
        synth_generate(0, 5)
    with pytest.raises(ValueError):
        synth_generate(2, 5, num_classes=1)
