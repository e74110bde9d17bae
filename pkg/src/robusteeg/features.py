"""Raw EEG to differential-entropy (DE) feature maps, windowing and z-scoring."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import signal

from .datasets import Dataset

VAR_FLOOR = 1e-12
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Band:
    name: str
    low: float | None
    high: float | None

    @property
    def is_identity(self) -> bool:
        return self.low is None and self.high is None


DEFAULT_BANDS = (
    Band("delta", 1, 4),
    Band("theta", 4, 8),
    Band("alpha", 8, 14),
    Band("beta", 14, 31),
    Band("gamma", 31, 50),
)
IDENTITY_BAND = Band("broadband", None, None)


def check_bands(bands, sample_rate: float) -> None:
    nyq = sample_rate / 2
    prev_low = -np.inf
    for b in bands:
        if b.is_identity:
            continue
        if not 0 < b.low < b.high < nyq:
            raise ValueError(f"band {b.name} ({b.low}-{b.high} Hz) must satisfy 0 < low < high < {nyq} Hz")
        if b.low < prev_low:
            raise ValueError(f"bands must be ordered by lower edge; {b.name} is out of order")
        prev_low = b.low


@dataclass
class RawRecording:
    data: np.ndarray  # (channels, samples)
    sample_rate: float
    subject_id: int = 0
    label: int = 0

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.data.shape[1] / self.sample_rate


def bandpass(rec: RawRecording, low: float, high: float, order: int = 4) -> RawRecording:
    """Zero-phase Butterworth band-pass, applied along time per channel."""
    nyq = rec.sample_rate / 2
    if not 0 < low < high < nyq:
        raise ValueError(f"band {low}-{high} Hz is outside (0, {nyq}) Hz for fs={rec.sample_rate}")
    sos = signal.butter(order, [low, high], btype="bandpass", fs=rec.sample_rate, output="sos")
    return replace(rec, data=signal.sosfiltfilt(sos, rec.data, axis=-1))


def differential_entropy(windows: np.ndarray, axis: int = -1) -> np.ndarray:
    """0.5 * ln(2 pi e var) with the unbiased variance, floored at 1e-12."""
    var = np.maximum(np.var(windows, axis=axis, ddof=1), VAR_FLOOR)
    return 0.5 * np.log(2 * np.pi * np.e * var)


def de_features(rec: RawRecording, bands=DEFAULT_BANDS, window: float = 1.0,
                overlap: float = 0.0) -> np.ndarray:
    """DE per band, channel and window. Returns (n_bands, channels, T)."""
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    check_bands(bands, rec.sample_rate)
    size = int(round(window * rec.sample_rate))
    if size < 2:
        raise ValueError(f"window of {window} s holds fewer than 2 samples at {rec.sample_rate} Hz")
    hop = max(1, int(round(size * (1 - overlap))))
    total = rec.data.shape[1]
    if total < size:
        raise ValueError(f"recording has {total} samples, shorter than one {size}-sample window")
    count = (total - size) // hop + 1
    out = np.empty((len(bands), rec.data.shape[0], count))
    for i, band in enumerate(bands):
        data = rec.data if band.is_identity else bandpass(rec, band.low, band.high).data
        win = np.lib.stride_tricks.sliding_window_view(data, size, axis=-1)[:, ::hop][:, :count]
        out[i] = differential_entropy(win)
    return out


def windowize(features: np.ndarray, t: int, hop: int | None = None) -> np.ndarray:
    """Cut (n, c, T_total) into (count, n, c, t) sliding windows."""
    hop = t if hop is None else hop
    total = features.shape[-1]
    if t > total:
        raise ValueError(f"window length {t} exceeds the {total} available time steps")
    if t < 1 or hop < 1:
        raise ValueError("window length and hop must be positive")
    count = (total - t) // hop + 1
    starts = np.arange(count) * hop
    return np.stack([features[..., s:s + t] for s in starts])


@dataclass
class NormStats:
    mean: np.ndarray  # (n, c)
    std: np.ndarray   # (n, c)


def zscore_fit(samples) -> NormStats:
    """Mean and std per (band, channel) over all samples and time steps."""
    X = samples.X if isinstance(samples, Dataset) else np.asarray(samples)
    if len(X) == 0:
        raise ValueError("cannot fit normalization statistics on an empty set")
    X = X.astype(np.float64)
    mean = X.mean(axis=(0, 3))
    std = np.maximum(X.std(axis=(0, 3)), STD_FLOOR)
    return NormStats(mean, std)


def zscore_apply(samples, stats: NormStats):
    X = samples.X if isinstance(samples, Dataset) else np.asarray(samples)
    out = ((X - stats.mean[None, :, :, None]) / stats.std[None, :, :, None]).astype(X.dtype)
    return samples.replace_X(out) if isinstance(samples, Dataset) else out


def preprocess(recordings, bands=DEFAULT_BANDS, window: float = 1.0, t: int = 16,
               hop: int | None = None, prefilter: tuple[float, float] | None = (0.5, 70.0)) -> Dataset:
    """Recordings -> DE feature dataset of (n, c, t) samples.

    ``prefilter`` is the broadband clean-up filter applied before band
    decomposition; it is skipped when the recording's Nyquist frequency does
    not exceed its upper edge.
    """
    X, labels, subjects = [], [], []
    for rec in recordings:
        if prefilter is not None and prefilter[1] < rec.sample_rate / 2:
            rec = bandpass(rec, *prefilter)
        feats = windowize(de_features(rec, bands, window), t, hop)
        X.append(feats)
        labels.append(np.full(len(feats), rec.label))
        subjects.append(np.full(len(feats), rec.subject_id))
    if not X:
        raise ValueError("no recordings given")
    return Dataset(np.concatenate(X).astype(np.float32), np.concatenate(labels), np.concatenate(subjects))
