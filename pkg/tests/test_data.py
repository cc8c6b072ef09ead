import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from whar.config import GenerateConfig
from whar.data import (
    ChannelStats,
    Dataset,
    DatasetFormatError,
    dataset_from_bytes,
    dataset_to_bytes,
    fit_stats,
    generate_synthetic,
    iterate_batches,
    normalize,
    prepare_splits,
    read_dataset,
    write_dataset,
)


def small_gen(**kw):
    base = dict(n_classes=3, n_sensors=2, n_variables=2, seq_len=32, train_domains=2, per_class_domain=4, test_per_class=4)
    base.update(kw)
    return GenerateConfig(**base)


# -- normalization -----------------------------------------------------------------------

def test_min_max_mid_map_to_minus_one_plus_one_zero():
    x = np.array([2.0, 6.0, 4.0, 3.0], dtype=np.float32).reshape(1, 1, 1, 4)
    y = normalize(x, fit_stats(x))
    np.testing.assert_array_equal(y.reshape(-1), [-1.0, 1.0, 0.0, -0.5])


def test_constant_channel_maps_to_zero():
    x = np.zeros((3, 2, 1, 5), dtype=np.float32)
    x[:, 0] = 7.0
    x[:, 1] = np.arange(5)
    y = normalize(x, fit_stats(x))
    np.testing.assert_array_equal(y[:, 0], 0.0)
    assert y[:, 1].min() == -1.0 and y[:, 1].max() == 1.0


def test_values_outside_training_range_clamp():
    stats = ChannelStats(np.zeros((1, 1)), np.ones((1, 1)))
    y = normalize(np.array([-3.0, 0.5, 9.0], dtype=np.float32).reshape(1, 1, 1, 3), stats)
    np.testing.assert_array_equal(y.reshape(-1), [-1.0, 0.0, 1.0])


@given(hnp.arrays(np.float32, (4, 2, 3, 6), elements=st.floats(-1e3, 1e3, width=32)))
def test_normalized_values_lie_in_range_and_are_idempotent(x):
    stats = fit_stats(x)
    y = normalize(x, stats)
    assert y.min() >= -1.0 and y.max() <= 1.0
    again = normalize(normalize(x, stats), stats)
    np.testing.assert_array_equal(again, normalize(y, stats))


def test_prepare_splits_uses_training_statistics_only():
    raw = generate_synthetic(small_gen())
    splits, stats = prepare_splits(raw)
    np.testing.assert_array_equal(stats.lo, raw.train.x.min(axis=(0, 3)))
    assert splits.train.x.min() == -1.0 and splits.train.x.max() == 1.0
    for s in (splits.val, splits.test):
        assert s.x.min() >= -1.0 and s.x.max() <= 1.0


# -- file format -------------------------------------------------------------------------

def _random_dataset(seed=0, s=5):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((s, 2, 3, 7)).astype(np.float32), rng.integers(0, 4, size=s), 4)


def test_round_trip_is_bit_identical(tmp_path):
    data = _random_dataset()
    path = tmp_path / "d.whar"
    write_dataset(path, data)
    back = read_dataset(path)
    assert back.x.tobytes() == data.x.tobytes()
    np.testing.assert_array_equal(back.labels, data.labels)
    assert back.n_classes == 4
    write_dataset(tmp_path / "e.whar", back)
    assert (tmp_path / "e.whar").read_bytes() == path.read_bytes()


def test_header_layout_is_little_endian():
    raw = dataset_to_bytes(_random_dataset(s=2))
    assert raw[:4] == b"WHAR"
    assert list(np.frombuffer(raw[4:28], dtype="<u4")) == [1, 2, 2, 3, 7, 4]
    assert len(raw) == 28 + 4 * 2 * 2 * 3 * 7 + 4 * 2


def test_truncated_file_reports_expected_and_actual_length():
    raw = dataset_to_bytes(_random_dataset())
    with pytest.raises(DatasetFormatError, match=f"expected {len(raw)} bytes, got {len(raw) - 3}") as err:
        dataset_from_bytes(raw[:-3])
    assert err.value.offset == len(raw) - 3
    with pytest.raises(DatasetFormatError, match="truncated header"):
        dataset_from_bytes(raw[:10])


def test_wrong_magic_rejected_at_offset_zero():
    raw = dataset_to_bytes(_random_dataset())
    with pytest.raises(DatasetFormatError, match="bad magic") as err:
        dataset_from_bytes(b"WHAT" + raw[4:])
    assert err.value.offset == 0
    with pytest.raises(DatasetFormatError, match="bad magic"):
        dataset_from_bytes(b"XX" + raw[:4])


def test_wrong_version_rejected():
    raw = bytearray(dataset_to_bytes(_random_dataset()))
    raw[4] = 9
    with pytest.raises(DatasetFormatError, match="version 9") as err:
        dataset_from_bytes(bytes(raw))
    assert err.value.offset == 4


def test_out_of_range_label_in_file_rejected():
    raw = bytearray(dataset_to_bytes(_random_dataset(s=1)))
    raw[-4:] = np.array([4], dtype="<u4").tobytes()
    with pytest.raises(DatasetFormatError, match="out of range"):
        dataset_from_bytes(bytes(raw))


# -- generator ------------------------------------------------------------------------------

def test_same_seed_gives_byte_identical_datasets():
    a, b = generate_synthetic(small_gen()), generate_synthetic(small_gen())
    for name in ("train", "val", "test"):
        assert dataset_to_bytes(getattr(a, name)) == dataset_to_bytes(getattr(b, name))
    c = generate_synthetic(small_gen(seed=7))
    assert dataset_to_bytes(c.train) != dataset_to_bytes(a.train)


def test_split_sizes_and_label_balance():
    cfg = small_gen()
    s = generate_synthetic(cfg)
    pool = cfg.n_classes * cfg.per_class_domain * cfg.train_domains
    assert len(s.train) + len(s.val) == pool
    assert len(s.val) == round(cfg.val_fraction * pool)
    np.testing.assert_array_equal(np.bincount(s.test.labels), [cfg.test_per_class] * cfg.n_classes)
    assert s.train.dims == (cfg.n_sensors, cfg.n_variables, cfg.seq_len)


def test_test_split_is_a_held_out_domain():
    s = generate_synthetic(small_gen())
    assert set(np.unique(s.test.domains)).isdisjoint(np.unique(s.train.domains))
    shared = generate_synthetic(small_gen(domain_disjoint=False))
    assert set(np.unique(shared.test.domains)) <= set(np.unique(shared.train.domains))


def test_generator_rejects_degenerate_shapes():
    with pytest.raises(ValueError):
        generate_synthetic(small_gen(n_classes=1))


def test_zero_noise_distinct_frequencies_are_nearest_neighbour_separable():
    cfg = small_gen(noise=0.0, freq_spacing=2.0, per_class_domain=6)
    train = generate_synthetic(cfg).train
    assert oracles.nearest_neighbour_loo(train.x, train.labels) == 1.0


def test_double_amplitude_shift_quadruples_channel_variance():
    # a pure moment shift: unit scale, no offset in training, 2x scale at test
    cfg = small_gen(
        noise=0.1, per_class_domain=200, test_per_class=400, train_domains=1,
        domain_scale=(1.0, 1.0), domain_offset=(0.0, 0.0), shift_scale=2.0, shift_offset=0.0,
    )
    s = generate_synthetic(cfg)
    train_var = np.concatenate([s.train.x, s.val.x]).var(axis=(0, 3), dtype=np.float64)
    test_var = s.test.x.var(axis=(0, 3), dtype=np.float64)
    np.testing.assert_allclose(test_var / train_var, 4.0, rtol=0.05)


def test_shift_changes_only_first_and_second_moments():
    cfg = small_gen(noise=0.0, phase_jitter=0.0, domain_scale=(1.0, 1.0), domain_offset=(0.0, 0.0),
                    shift_scale=2.0, shift_offset=0.5)
    s = generate_synthetic(cfg)
    # without noise or phase jitter every window of a class is the same waveform
    train_wave = s.train.x[s.train.labels == 0][0].astype(np.float64)
    test_wave = s.test.x[s.test.labels == 0][0].astype(np.float64)
    np.testing.assert_allclose(test_wave, 2.0 * train_wave + 0.5, atol=1e-5)


# -- batching ---------------------------------------------------------------------------------

@given(st.integers(1, 40), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_batches_cover_each_sample_exactly_once(size, batch, seed):
    data = Dataset(np.arange(size, dtype=np.float32).reshape(size, 1, 1, 1), np.zeros(size, dtype=int), 1)
    seen = np.concatenate([x.reshape(-1) for x, _ in iterate_batches(data, batch, np.random.default_rng(seed))])
    np.testing.assert_array_equal(np.sort(seen), np.arange(size))
    assert all(len(y) <= batch for _, y in iterate_batches(data, batch))


def test_shuffle_is_seed_deterministic():
    data = _random_dataset(s=20)
    run = lambda seed: [y.tolist() for _, y in iterate_batches(data, 6, np.random.default_rng(seed))]
    assert run(3) == run(3)
    order = lambda seed: np.concatenate([x[:, 0, 0, 0] for x, _ in iterate_batches(data, 6, np.random.default_rng(seed))])
    assert not np.array_equal(order(3), order(4))


def test_dataset_validates_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 1, 3)), [0, 5], 3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 3)), [0, 1], 3)

