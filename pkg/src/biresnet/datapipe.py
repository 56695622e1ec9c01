"""Dataset post-processing: downsampling, noise injection, normalisation, splits and file I/O."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .model import _atomic_write
from .motorsim import CHANNELS, CLASS_NAMES, ExperimentRecord
from .nncore import rng_for

SUPPORTED_FACTORS = (1, 2, 5, 10, 20)
DATASET_MAGIC = b"BRND"
DATASET_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """A stack of equally shaped records: ``X[N, C, T]`` plus labels and onset metadata."""

    X: np.ndarray
    labels: np.ndarray
    t_f: np.ndarray
    sample_period: float = 1e-3
    seeds: np.ndarray | None = None
    channel_names: tuple = CHANNELS

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.t_f = np.asarray(self.t_f, dtype=np.float64)
        if self.seeds is None:
            self.seeds = np.arange(len(self.labels), dtype=np.int64)
        self.seeds = np.asarray(self.seeds, dtype=np.int64)
        if self.X.ndim != 3 or len(self.X) != len(self.labels) or len(self.t_f) != len(self.labels):
            raise DataError("dataset arrays disagree on record count")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_channels(self) -> int:
        return self.X.shape[1]

    @property
    def n_samples(self) -> int:
        return self.X.shape[2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.labels[idx], self.t_f[idx], self.sample_period,
                       self.seeds[idx], self.channel_names)

    def select_channels(self, channels) -> "Dataset":
        channels = list(channels)
        return Dataset(self.X[:, channels], self.labels, self.t_f, self.sample_period, self.seeds,
                       tuple(self.channel_names[c] for c in channels))

    def records(self):
        for i in range(len(self)):
            yield ExperimentRecord(self.X[i], int(self.labels[i]), float(self.t_f[i]),
                                   self.sample_period, int(self.seeds[i]))

    @classmethod
    def from_records(cls, records) -> "Dataset":
        records = list(records)
        if not records:
            raise DataError("no records")
        periods = {r.sample_period for r in records}
        if len(periods) != 1:
            raise DataError("records have different sample periods")
        return cls(np.stack([r.data for r in records]), [r.label for r in records],
                   [r.t_f for r in records], periods.pop(), [r.seed for r in records])

    def class_counts(self, num_classes: int = len(CLASS_NAMES)) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


# ---------------------------------------------------------------------------
# Downsampling and noise
# ---------------------------------------------------------------------------

def _check_factor(k: int) -> int:
    if k not in SUPPORTED_FACTORS:
        raise DataError(f"downsample factor {k} not in {SUPPORTED_FACTORS}")
    return int(k)


def downsample(record, k: int):
    """Keep samples ``0, k, 2k, ...``; works on an ExperimentRecord or a Dataset."""
    k = _check_factor(k)
    if isinstance(record, Dataset):
        return replace(record, X=np.ascontiguousarray(record.X[:, :, ::k]),
                       sample_period=record.sample_period * k)
    return replace(record, data=np.ascontiguousarray(record.data[:, ::k]),
                   sample_period=record.sample_period * k)


def noise_for(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """White Gaussian noise with per-channel power ``mean(x**2) / 10**(snr/10)``; ``x`` is ``[C, T]``."""
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite samples before noise injection")
    power = np.mean(np.square(x, dtype=np.float64), axis=-1, keepdims=True)
    std = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return rng.standard_normal(x.shape) * std


def add_noise(record, snr_db: float, seed: int):
    """Add white noise at ``snr_db`` per channel.

    The noise stream for a record is keyed by ``(seed, record seed)`` so it
    does not depend on record order or on the other records in a dataset.
    """
    if isinstance(record, Dataset):
        X = np.empty_like(record.X)
        for i in range(len(record)):
            g = rng_for(int(record.seeds[i]), f"noise/{seed}")
            X[i] = record.X[i] + noise_for(record.X[i], snr_db, g).astype(record.X.dtype)
        return replace(record, X=X)
    g = rng_for(int(record.seed), f"noise/{seed}")
    return replace(record, data=record.data + noise_for(record.data, snr_db, g).astype(record.data.dtype))


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> np.ndarray:
    noise = noisy.astype(np.float64) - clean
    return 10.0 * np.log10(np.mean(np.square(clean, dtype=np.float64), axis=-1) / np.mean(noise ** 2, axis=-1))


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d) -> "ChannelStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def compute_stats(train) -> ChannelStats:
    X = train.X if isinstance(train, Dataset) else np.asarray(train)
    if X.size == 0 or len(X) == 0:
        raise DataError("cannot compute statistics of an empty split")
    X = X.astype(np.float64, copy=False)
    return ChannelStats(X.mean(axis=(0, 2)), X.std(axis=(0, 2)))


def normalize(records, stats: ChannelStats):
    """Per-channel z-score ``(x - mean) / max(std, 1e-8)``."""
    std = np.maximum(stats.std, 1e-8)
    if isinstance(records, Dataset):
        if len(records) == 0:
            raise DataError("cannot normalise an empty split")
        X = (records.X.astype(np.float64) - stats.mean[None, :, None]) / std[None, :, None]
        return replace(records, X=X.astype(records.X.dtype))
    X = np.asarray(records, dtype=np.float64)
    return (X - stats.mean[None, :, None]) / std[None, :, None]


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def split(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified shuffled split into ``(train, val, test)``.

    Per class, ``round(ratio * n)`` records go to train and val and the rest
    to test. Records keep their relative order inside each part.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError("split ratios must be three numbers summing to 1")
    parts = [[], [], []]
    for cls in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == cls)
        if len(idx) < 10:
            raise DataError(f"class {cls} has only {len(idx)} records (need >= 10)")
        idx = rng_for(seed, f"split/{int(cls)}").permutation(idx)
        n_train = int(round(ratios[0] * len(idx)))
        n_val = int(round(ratios[1] * len(idx)))
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train:n_train + n_val])
        parts[2].extend(idx[n_train + n_val:])
    return tuple(dataset.subset(np.sort(np.asarray(p, dtype=np.int64))) for p in parts)


# ---------------------------------------------------------------------------
# Binary dataset file
# ---------------------------------------------------------------------------

def dataset_bytes(dataset: Dataset) -> bytes:
    out = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, len(dataset))]
    C, T = dataset.n_channels, dataset.n_samples
    for i in range(len(dataset)):
        out.append(struct.pack("<BfII", int(dataset.labels[i]), float(dataset.t_f[i]), C, T))
        out.append(np.ascontiguousarray(dataset.X[i], dtype="<f4").tobytes())
    return b"".join(out)


def write_dataset(dataset: Dataset, path) -> None:
    _atomic_write(path, dataset_bytes(dataset))


def read_dataset(path, sample_period: float = 1e-3, seeds=None) -> Dataset:
    """Read a dataset file. Sample period and record seeds live in the manifest, not the file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DATASET_MAGIC:
        raise DataError("bad dataset magic")
    if len(data) < 12:
        raise DataError("truncated dataset header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != DATASET_VERSION:
        raise DataError(f"unsupported dataset version {version}")
    pos = 12
    X, labels, t_f = [], [], []
    head = struct.calcsize("<BfII")
    for _ in range(count):
        if pos + head > len(data):
            raise DataError("truncated dataset record header")
        label, tf, C, T = struct.unpack_from("<BfII", data, pos)
        pos += head
        nbytes = 4 * C * T
        if pos + nbytes > len(data):
            raise DataError("truncated dataset record")
        X.append(np.frombuffer(data, dtype="<f4", count=C * T, offset=pos).reshape(C, T))
        labels.append(label)
        t_f.append(tf)
        pos += nbytes
    if pos != len(data):
        raise DataError("trailing bytes after dataset records")
    if not X:
        return Dataset(np.zeros((0, len(CHANNELS), 0), np.float32), [], [], sample_period)
    return Dataset(np.stack(X).astype(np.float32), labels, np.asarray(t_f, dtype=np.float32).astype(np.float64),
                   sample_period, seeds)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    class_names: tuple = CLASS_NAMES
    channel_names: tuple = CHANNELS
    sample_period: float = 1e-3
    record_counts: dict = field(default_factory=dict)
    stats: ChannelStats | None = None
    machine_params: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    record_seeds: dict = field(default_factory=dict)
    processing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "channel_names": list(self.channel_names),
            "sample_period": self.sample_period,
            "record_counts": self.record_counts,
            "stats": None if self.stats is None else self.stats.to_dict(),
            "machine_params": self.machine_params,
            "seeds": self.seeds,
            "record_seeds": self.record_seeds,
            "processing": self.processing,
        }

    @classmethod
    def from_dict(cls, d) -> "DatasetManifest":
        return cls(tuple(d["class_names"]), tuple(d["channel_names"]), d["sample_period"],
                   d.get("record_counts", {}),
                   None if d.get("stats") is None else ChannelStats.from_dict(d["stats"]),
                   d.get("machine_params", {}), d.get("seeds", {}), d.get("record_seeds", {}),
                   d.get("processing", {}))

    def write(self, path) -> None:
        _atomic_write(path, json.dumps(self.to_dict(), indent=2, sort_keys=True).encode())

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def load_split(directory, name: str) -> Dataset:
    """Read ``<name>.brnd`` from a directory holding a ``manifest.json``."""
    manifest = DatasetManifest.read(os.path.join(directory, "manifest.json"))
    seeds = manifest.record_seeds.get(name)
    return read_dataset(os.path.join(directory, f"{name}.brnd"), manifest.sample_period, seeds)


def prepare(dataset: Dataset, *, downsample_factor: int = 1, snr_db: float | None = None,
            noise_seed: int = 0, split_seed: int = 0, ratios=(0.8, 0.1, 0.1), noise_first: bool = False):
    """Split, degrade and normalise a raw dataset.

    Returns ``(train, val, test, stats)``; statistics come from the training
    split only. Noise is injected after downsampling unless ``noise_first``.
    """
    train, val, test = split(dataset, ratios, split_seed)

    def degrade(part):
        if noise_first and snr_db is not None:
            part = add_noise(part, snr_db, noise_seed)
        part = downsample(part, downsample_factor)
        if not noise_first and snr_db is not None:
            part = add_noise(part, snr_db, noise_seed)
        return part

    train, val, test = degrade(train), degrade(val), degrade(test)
    stats = compute_stats(train)
    return normalize(train, stats), normalize(val, stats), normalize(test, stats), stats
