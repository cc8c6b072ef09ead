import numpy as np
import pytest

import oracles
from whar.config import ConfigError, MfeConfig
from whar.mfe import ModalityEmbedding
from whar.tensor import Tensor


def build(n=2, m=3, length=20, **kw):
    cfg = MfeConfig(**{"kernel": 4, "stride": 4, "channels": 5, **kw})
    return ModalityEmbedding(n, m, length, cfg, np.random.default_rng(0))


def test_embedded_length_for_default_window():
    mfe = build(n=1, m=1, length=100)
    assert mfe.out_len == 25
    assert mfe(Tensor(np.zeros((2, 1, 1, 100)))).shape == (2, 1, 1, 5, 25)


def test_length_is_floor_formula_when_stride_does_not_divide():
    assert build(length=23, kernel=5, stride=3).out_len == (23 - 5) // 3 + 1


def test_window_shorter_than_kernel_fails_at_build_time():
    with pytest.raises(ConfigError, match="shorter than kernel"):
        build(length=3)


def test_one_by_one_kernel_is_identity():
    mfe = build(n=1, m=1, length=7, kernel=1, stride=1, channels=1)
    mfe.conv.weight.data[:] = 1.0
    mfe.conv.bias.data[:] = 0.0
    x = np.random.default_rng(1).standard_normal((3, 1, 1, 7)).astype(np.float32)
    np.testing.assert_array_equal(mfe(Tensor(x)).data.reshape(3, 7), x.reshape(3, 7))


def test_perturbing_one_series_changes_only_its_block():
    mfe = build()
    x = np.random.default_rng(2).standard_normal((2, 2, 3, 20)).astype(np.float32)
    base = mfe(Tensor(x)).data
    for n, m in [(0, 0), (1, 2)]:
        y = x.copy()
        y[:, n, m] = 0.0
        out = mfe(Tensor(y)).data
        changed = np.zeros((2, 3), dtype=bool)
        changed[n, m] = True
        assert not np.array_equal(out[:, n, m], base[:, n, m])
        assert out[:, ~changed].tobytes() == base[:, ~changed].tobytes()


def test_each_block_matches_its_own_convolution():
    mfe = build(n=2, m=2, length=12, kernel=3, stride=2, channels=4)
    x = np.random.default_rng(3).standard_normal((2, 2, 2, 12))
    out = mfe(Tensor(x, dtype=np.float64)).data
    w, b = mfe.conv.weight.data.astype(np.float64), mfe.conv.bias.data.astype(np.float64)
    for n in range(2):
        for m in range(2):
            g = n * 2 + m
            ref = oracles.conv1d(x[:, n, m][:, None], w[g * 4 : (g + 1) * 4], b[g * 4 : (g + 1) * 4], stride=2)
            np.testing.assert_allclose(out[:, n, m], ref, rtol=1e-6, atol=1e-7)


def test_parameter_count():
    n, m, p, d = 3, 4, 6, 7
    mfe = build(n=n, m=m, length=30, kernel=p, stride=3, channels=d)
    assert mfe.num_parameters() == n * m * (p * d + d)


def test_shared_mode_uses_one_kernel_for_every_series():
    mfe = build(shared=True)
    assert mfe.num_parameters() == 4 * 5 + 5
    x = np.random.default_rng(4).standard_normal((1, 2, 3, 20)).astype(np.float32)
    x[0, 1, 2] = x[0, 0, 0]
    out = mfe(Tensor(x)).data
    np.testing.assert_array_equal(out[0, 1, 2], out[0, 0, 0])


def test_wrong_input_shape_is_rejected():
    from whar.tensor import ShapeError

    with pytest.raises(ShapeError):
        build()(Tensor(np.zeros((1, 3, 2, 20))))


def test_flops_count_every_kernel_tap():
    mfe = build(n=2, m=3, length=20, kernel=4, stride=4, channels=5)
    assert mfe.flops() == 2 * 3 * 5 * 4 * 5
