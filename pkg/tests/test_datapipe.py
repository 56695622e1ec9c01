import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biresnet.datapipe import (
    ChannelStats,
    DataError,
    Dataset,
    DatasetManifest,
    add_noise,
    compute_stats,
    dataset_bytes,
    downsample,
    load_split,
    measured_snr_db,
    normalize,
    prepare,
    read_dataset,
    split,
    write_dataset,
)
from biresnet.motorsim import ExperimentRecord


def make_dataset(per_class=10, C=8, T=100, seed=0, dtype=np.float64):
    g = np.random.default_rng(seed)
    n = 6 * per_class
    X = (g.standard_normal((n, C, T)) * g.uniform(0.5, 5, (1, C, 1)) + g.uniform(-3, 3, (1, C, 1))).astype(dtype)
    labels = np.arange(n) % 6
    t_f = np.where(labels == 5, np.inf, g.uniform(0.2, 0.8, n))
    return Dataset(X, labels, t_f, 1e-3, seeds=1000 + np.arange(n))


# --- downsample ---------------------------------------------------------------

def test_downsample_examples():
    rec = ExperimentRecord(np.arange(10.0)[None], 0, 0.3, 1e-3)
    out = downsample(rec, 2)
    np.testing.assert_array_equal(out.data[0], [0, 2, 4, 6, 8])
    assert out.sample_period == pytest.approx(2e-3) and out.t_f == 0.3
    assert np.array_equal(downsample(rec, 1).data, rec.data)
    assert downsample(ExperimentRecord(np.zeros((8, 1000)), 0, 0.3, 1e-3), 20).data.shape == (8, 50)


@pytest.mark.parametrize("k", [1, 2, 5, 10, 20])
def test_downsample_is_exact_subsampling(k):
    ds = make_dataset(T=1000, dtype=np.float32)
    out = downsample(ds, k)
    for j in range(out.n_samples):
        assert np.array_equal(out.X[:, :, j], ds.X[:, :, j * k])
    assert np.array_equal(out.t_f, ds.t_f)


@pytest.mark.parametrize("k", [0, 3, 4, 50])
def test_downsample_rejects_factor(k):
    with pytest.raises(DataError):
        downsample(make_dataset(), k)


# --- noise ----------------------------------------------------------------------

@pytest.mark.parametrize("snr", [-5, -3, -1, 1, 3, 5, 30])
def test_noise_hits_target_snr(snr):
    ds = make_dataset(T=1000)
    noisy = add_noise(ds, snr, seed=3)
    # pooled over the records, per channel
    clean = ds.X.transpose(1, 0, 2).reshape(8, -1)
    err = measured_snr_db(clean, noisy.X.transpose(1, 0, 2).reshape(8, -1)) - snr
    assert np.abs(err).max() < 0.2
    # single records scatter like a chi-square power estimate: sd = 10/ln10 * sqrt(2/T) dB
    per_record = measured_snr_db(ds.X, noisy.X) - snr
    assert np.std(per_record) == pytest.approx(10 / np.log(10) * np.sqrt(2 / 1000), rel=0.2)
    assert np.array_equal(noisy.labels, ds.labels) and np.array_equal(noisy.t_f, ds.t_f)


def test_noise_variance_equals_power_at_zero_db():
    x = np.full((1, 1, 200_000), 2.0)
    ds = Dataset(x, [0], [0.5])
    noise = add_noise(ds, 0.0, 1).X - x
    assert np.var(noise) == pytest.approx(4.0, rel=0.01)


def test_noise_on_unit_sine_at_30db():
    t = np.arange(1000) * 1e-3
    sine = np.sin(2 * np.pi * 50 * t)[None]
    rec = ExperimentRecord(sine, 0, 0.5, 1e-3, seed=9)
    noisy = add_noise(rec, 30.0, 0)
    rms_err = np.sqrt(np.mean((noisy.data - sine) ** 2))
    # amplitude ratio 10**(-30/20) applied to the sine RMS of 1/sqrt(2)
    assert 10 ** (-30 / 20) / np.sqrt(2) == pytest.approx(0.0224, abs=5e-5)
    assert rms_err == pytest.approx(0.0224, rel=0.1)


def test_noise_is_seeded_per_record():
    ds = make_dataset()
    a, b = add_noise(ds, 1.0, 5), add_noise(ds, 1.0, 5)
    assert np.array_equal(a.X, b.X)
    assert not np.array_equal(a.X, add_noise(ds, 1.0, 6).X)
    # a record's noise does not depend on its position or neighbours
    sub = add_noise(ds.subset([7, 3]), 1.0, 5)
    assert np.array_equal(sub.X[0], a.X[7]) and np.array_equal(sub.X[1], a.X[3])


def test_noise_rejects_nonfinite():
    ds = make_dataset()
    ds.X[0, 0, 0] = np.nan
    with pytest.raises(DataError):
        add_noise(ds, 1.0, 0)


# --- normalisation -----------------------------------------------------------------

def test_normalized_train_statistics():
    ds = make_dataset(T=500)
    out = normalize(ds, compute_stats(ds))
    assert np.abs(out.X.mean(axis=(0, 2))).max() < 1e-10
    std = out.X.std(axis=(0, 2))
    assert np.all((std >= 0.999) & (std <= 1.001))


def test_normalize_idempotent():
    ds = normalize(make_dataset(), compute_stats(make_dataset()))
    again = normalize(ds, compute_stats(ds))
    np.testing.assert_allclose(again.X, ds.X, atol=1e-9)


def test_constant_channel_goes_to_zero():
    ds = make_dataset()
    ds.X[:, 2] = 7.5
    out = normalize(ds, compute_stats(ds))
    assert not out.X[:, 2].any()


def test_test_split_uses_train_stats():
    train, test = make_dataset(seed=1), make_dataset(seed=2)
    stats = compute_stats(train)
    out = normalize(test, stats)
    np.testing.assert_allclose(out.X, (test.X - stats.mean[:, None]) / stats.std[:, None])
    assert np.abs(out.X.mean(axis=(0, 2))).max() > 1e-6


def test_empty_split_errors():
    empty = Dataset(np.zeros((0, 8, 10)), [], [])
    with pytest.raises(DataError):
        compute_stats(empty)
    with pytest.raises(DataError):
        normalize(empty, ChannelStats(np.zeros(8), np.ones(8)))


# --- split -------------------------------------------------------------------------

def test_split_default_sizes():
    ds = make_dataset(per_class=100, T=4)
    tr, va, te = split(ds, seed=0)
    assert (len(tr), len(va), len(te)) == (480, 60, 60)
    for part, n in [(tr, 80), (va, 10), (te, 10)]:
        assert np.array_equal(part.class_counts(), [n] * 6)


@given(st.integers(10, 40), st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_split_partitions(per_class, seed):
    ds = make_dataset(per_class=per_class, T=2)
    parts = split(ds, seed=seed)
    ids = np.concatenate([p.seeds for p in parts])
    assert len(ids) == len(ds) and set(ids) == set(ds.seeds)
    for part, r in zip(parts, (0.8, 0.1, 0.1)):
        assert np.all(np.abs(part.class_counts() - r * per_class) <= 1)
    again = split(ds, seed=seed)
    assert all(np.array_equal(a.seeds, b.seeds) for a, b in zip(parts, again))


def test_split_errors():
    with pytest.raises(DataError):
        split(make_dataset(per_class=9))
    with pytest.raises(DataError):
        split(make_dataset(), ratios=(0.5, 0.2, 0.2))


# --- file format --------------------------------------------------------------------

def test_file_round_trip(tmp_path):
    ds = make_dataset(T=37, dtype=np.float32)
    path = tmp_path / "d.brnd"
    write_dataset(ds, path)
    back = read_dataset(path)
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.t_f, ds.t_f.astype(np.float32).astype(np.float64))
    assert dataset_bytes(back) == path.read_bytes()


def test_file_layout():
    ds = Dataset(np.array([[[1.0, -2.0]]], np.float32), [3], [0.5])
    raw = dataset_bytes(ds)
    assert raw == (b"BRND" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + bytes([3])
                   + np.float32(0.5).tobytes() + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                   + np.array([1.0, -2.0], "<f4").tobytes())


@pytest.mark.parametrize("mutate", [
    lambda b: b"BRNX" + b[4:],
    lambda b: b[:-3],
    lambda b: b + b"\0",
    lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:],
])
def test_corrupted_files_rejected(tmp_path, mutate):
    path = tmp_path / "bad.brnd"
    path.write_bytes(mutate(dataset_bytes(make_dataset(T=5, dtype=np.float32))))
    with pytest.raises(DataError):
        read_dataset(path)


def test_manifest_round_trip_and_load_split(tmp_path):
    ds = make_dataset(T=5, dtype=np.float32)
    stats = compute_stats(ds)
    m = DatasetManifest(sample_period=2e-3, record_counts={"train": len(ds)}, stats=stats,
                        seeds={"split": 1}, record_seeds={"train": [int(s) for s in ds.seeds]})
    m.write(tmp_path / "manifest.json")
    back = DatasetManifest.read(tmp_path / "manifest.json")
    assert back.to_dict() == m.to_dict()
    write_dataset(ds, tmp_path / "train.brnd")
    loaded = load_split(tmp_path, "train")
    assert loaded.sample_period == 2e-3 and np.array_equal(loaded.seeds, ds.seeds)


# --- prepare ---------------------------------------------------------------------------

def test_prepare_order_and_stats():
    ds = make_dataset(per_class=10, T=100)
    tr, va, te, stats = prepare(ds, downsample_factor=5, snr_db=3.0, noise_seed=1, split_seed=2)
    assert tr.n_samples == 20 and tr.sample_period == pytest.approx(5e-3)
    raw_tr, _, _ = split(ds, seed=2)
    noisy = add_noise(downsample(raw_tr, 5), 3.0, 1)
    np.testing.assert_allclose(stats.mean, compute_stats(noisy).mean)
    np.testing.assert_allclose(tr.X, normalize(noisy, stats).X)
    first = prepare(ds, downsample_factor=5, snr_db=3.0, noise_seed=1, split_seed=2, noise_first=True)[0]
    assert not np.allclose(first.X, tr.X)
