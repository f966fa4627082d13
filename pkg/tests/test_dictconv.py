import json

import numpy as np
import pytest

from pqkd import dictconv as dc
from pqkd.errors import ConfigurationError, NumericalError
from pqkd.nn import Tensor, check_gradients, conv2d

WIDTHS = [(32, 64, 128), (48, 96, 128), (64, 128, 128)]


def test_projection_statistics_and_determinism():
    a = dc.make_projection(3, 10_000, 512)
    assert abs(a.mean()) <= 4 / np.sqrt(a.size)
    assert abs(a.var() - 1 / 512) <= 0.1 / 512
    assert np.array_equal(a, dc.make_projection(3, 10_000, 512))
    assert not np.array_equal(a[:10], dc.make_projection(4, 10, 512))
    with pytest.raises(ConfigurationError):
        dc.make_projection(0, 0, 512)


def test_generate_mixing_examples():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2 * 3 * 4, 16))
    assert np.all(dc.generate_mixing(a, np.zeros(16), 2, 3, 4) == 0)
    eye = np.eye(24, 16)
    m = dc.generate_mixing(eye, np.eye(16)[5], 2, 3, 4)
    assert m.sum() == 1 and m.reshape(-1)[5] == 1 and m[0, 1, 1] == 1  # o slowest, r fastest
    z = rng.normal(size=16)
    m = dc.generate_mixing(a, z, 2, 3, 4)
    for o in range(2):
        for i in range(3):
            for r in range(4):
                row = (o * 3 + i) * 4 + r
                assert abs(m[o, i, r] - sum(a[row, j] * z[j] for j in range(16))) <= 1e-12
    with pytest.raises(ConfigurationError):
        dc.generate_mixing(a, np.zeros(15), 2, 3, 4)
    with pytest.raises(ConfigurationError):
        dc.generate_mixing(a, z, 2, 3, 3)


def test_reconstruct_kernel_examples():
    rng = np.random.default_rng(1)
    b = rng.normal(size=(1, 3, 3))
    w = dc.reconstruct_kernel(np.ones((2, 3, 1)), b)
    assert all(np.array_equal(w[o, i], b[0]) for o in range(2) for i in range(3))
    assert np.all(dc.reconstruct_kernel(np.zeros((2, 2, 2)), rng.normal(size=(2, 3, 3))) == 0)
    m, b = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 3, 3))
    ref = np.zeros((2, 2, 3, 3))
    for o in range(2):
        for i in range(2):
            for x in range(3):
                for y in range(3):
                    for r in range(2):
                        ref[o, i, x, y] += m[o, i, r] * b[r, x, y]
    np.testing.assert_allclose(dc.reconstruct_kernel(m, b), ref, atol=1e-12)
    # matrix form W_(k) = M_(c) B_(k)
    np.testing.assert_allclose(dc.reconstruct_kernel(m, b).reshape(4, 9), m.reshape(4, 2) @ b.reshape(2, 9), atol=1e-12)
    with pytest.raises(ConfigurationError):
        dc.reconstruct_kernel(m, rng.normal(size=(3, 3, 3)))


def test_kernel_is_linear_in_z():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3 * 2 * 2, 8)), rng.normal(size=(2, 3, 3))
    z1, z2 = rng.normal(size=8), rng.normal(size=8)
    w = lambda z: dc.reconstruct_kernel(dc.generate_mixing(a, z, 3, 2, 2), b)
    np.testing.assert_allclose(w(0.7 * z1 - 1.3 * z2), 0.7 * w(z1) - 1.3 * w(z2), atol=1e-12)


def test_layer_forward_composition_and_zero_feature():
    rng = np.random.default_rng(3)
    layer = dc.DictConvLayer(2, 3, 3, 2, 1, projection_seed=7, d=16)
    layer.bias.data[:] = [0.5, -1.0, 2.0]
    x = rng.normal(size=(2, 2, 6, 6))
    y0 = layer(x, np.zeros(16)).data
    assert np.allclose(y0, np.array([0.5, -1.0, 2.0])[None, :, None, None])
    z = rng.normal(size=16)
    w = dc.reconstruct_kernel(dc.generate_mixing(layer.projection, z, 3, 2, 2), layer.basis.data)
    ref = conv2d(Tensor(x), Tensor(w), Tensor(layer.bias.data), 1).data
    np.testing.assert_allclose(layer(x, z).data, ref, atol=1e-12)


def test_layer_gradients_match_finite_differences():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        layer = dc.DictConvLayer(2, 3, 3, 2, 1, projection_seed=seed, d=16)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        z = rng.normal(size=16)
        assert check_gradients(lambda: (layer(x, z) ** 2).sum(), [layer.basis, layer.bias]) <= 1e-4


def test_only_basis_and_bias_receive_gradients():
    layer = dc.DictConvLayer(2, 4, 3, 2, 1, projection_seed=0, d=8)
    a_before = layer.projection.copy()
    (layer(np.ones((1, 2, 4, 4)), np.ones(8)) ** 2).sum().backward()
    assert layer.basis.grad is not None and layer.bias.grad is not None
    assert [p.name for p in layer.parameters()] == ["basis", "bias"]
    assert np.array_equal(layer.projection, a_before)


@pytest.mark.parametrize("c_in,c_out,k,rank", [(1, 32, 5, 4), (32, 64, 3, 4), (64, 128, 3, 8), (7, 3, 3, 1)])
def test_trainable_count_law(c_in, c_out, k, rank):
    layer = dc.DictConvLayer(c_in, c_out, k, rank, k // 2, projection_seed=0, d=4)
    assert layer.trainable_count == rank * k * k + c_out == dc.dict_conv_params(c_out, rank, k)


def test_basis_init_scale():
    layer = dc.DictConvLayer(64, 8, 3, 8, 1, projection_seed=0, d=4)
    assert np.std(layer.basis.data) == pytest.approx(np.sqrt(2 / (64 * 9 * 8)), rel=0.3)


def test_dense_and_teacher_counts():
    assert dc.dense_conv_params(64, 32, 3) == 18_496
    assert dc.dict_conv_params(64, 4, 3) == 100
    assert [dc.teacher_param_count(w) for w in WIDTHS] == [94_474, 154_826, 224_394]
    for c1, c2, c3 in WIDTHS:
        assert dc.teacher_param_count((c1, c2, c3)) == 9 * c1 * c2 + 9 * c2 * c3 + 26 * c1 + c2 + c3 + 10 * c3 + 10


def test_table_compression_factors():
    expected = {"conv1": [1.01, 1.01, 1.01], "conv12": [1.25, 1.38, 1.50]}
    for scope, values in expected.items():
        got = [round(dc.count_params(dc.CompressionConfig(scope, (4,), 30, w)).cr_overall, 2) for w in WIDTHS]
        assert got == values
    r = dc.count_params(dc.CompressionConfig("conv1", (4,), 30, WIDTHS[0]))
    assert (r.teacher_total, r.student_total) == (94_474, 93_804)
    r = dc.count_params(dc.CompressionConfig("conv12", (4, 4), 30, WIDTHS[2]))
    assert r.student_total == 149_232 and r.cr_overall == pytest.approx(1.5037, abs=1e-4)


def test_all_convs_counts_follow_formula():
    r = dc.count_params(dc.CompressionConfig("all", (4,), 30, WIDTHS[0]))
    assert r.student_total == (25 * 4 + 32) + (9 * 4 + 64) + (9 * 4 + 128) + 1290 + 30 == 1716
    assert round(r.cr_overall, 2) == 55.05


def test_degenerate_layer_ratio_and_json():
    assert dc.layer_compression_ratio(1, 1, 1, 1) == 1.0
    report = dc.count_params(dc.CompressionConfig("conv12", (4, 2), 30, WIDTHS[1]))
    payload = json.loads(report.to_json())
    for key in ("scope", "ranks", "dim_theta", "teacher_total", "student_total", "cr_overall", "cr_conv"):
        assert key in payload
    assert payload["ranks"] == [4, 2] and payload["cr_overall"] > 0 and payload["cr_conv"] > 0


def test_trainable_mixing_is_counted():
    base = dc.count_params(dc.CompressionConfig("conv1", (4,), 0, WIDTHS[0]))
    dic = dc.count_params(dc.CompressionConfig("conv1", (4,), 0, WIDTHS[0], mixing_trainable=True))
    assert dic.student_total - base.student_total == 32 * 1 * 4


def test_compression_config_validation():
    assert dc.CompressionConfig("all", (8,), 30, WIDTHS[0]).ranks == (8, 8, 8)
    with pytest.raises(ConfigurationError):
        dc.CompressionConfig("conv12", (4, 4, 4), 30, WIDTHS[0])
    with pytest.raises(ConfigurationError):
        dc.CompressionConfig("conv3", (4,), 30, WIDTHS[0])
    with pytest.raises(ConfigurationError):
        dc.CompressionConfig("conv1", (0,), 30, WIDTHS[0])


def test_project_mixing_membership_and_idempotence():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(40, 6))
    z0 = rng.normal(size=6)
    z, res = dc.project_mixing(a, a @ z0)
    assert np.abs(z - z0).max() <= 1e-9 and res <= 1e-9
    m = rng.normal(size=40)
    z1, _ = dc.project_mixing(a, m)
    pm = a @ z1
    z2, res2 = dc.project_mixing(a, pm)
    assert np.abs(a @ z2 - pm).max() <= 1e-9 and res2 <= 1e-9
    assert np.abs(a.T @ (m - pm)).max() <= 1e-8
    z_ref = np.linalg.cholesky(a.T @ a)
    z_ref = np.linalg.solve(z_ref.T, np.linalg.solve(z_ref, a.T @ m))
    assert np.abs(z1 - z_ref).max() <= 1e-8


def test_project_mixing_rank_deficient():
    a = np.ones((10, 3))
    with pytest.raises(NumericalError):
        dc.project_mixing(a, np.ones(10))


def test_spectral_norm_matches_svd():
    a = np.random.default_rng(5).normal(size=(50, 20))
    assert dc.spectral_norm(a, tol=1e-14) == pytest.approx(np.linalg.svd(a, compute_uv=False)[0], rel=1e-6)
