import numpy as np
import pytest

from nodule3d import attention as A
from nodule3d.gradcheck import grad_check
from nodule3d.tensor import Parameter, ShapeError, Tensor


def _zero(module):
    for p in module.parameters():
        p.data[...] = 0


def _x(rng, shape=(1, 4, 6, 6, 6)):
    return Parameter(rng.standard_normal(shape), dtype=np.float64)


def _check_module(module, x, tol=1e-4, max_checks=60):
    module.astype(np.float64)
    inputs = {"x": x}
    inputs.update(dict(module.named_parameters()))
    rep = grad_check(lambda: module(x), inputs, tolerance=tol, max_checks=max_checks)
    assert rep.passed, rep.lines()
    return rep


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestChannelAttention:
    def test_zero_params_half(self, rng):
        blk = A.ChannelAttention(4)
        _zero(blk)
        x = rng.standard_normal((2, 4, 5, 6, 7))
        a, out = A.channel_attention(Tensor(x), blk)
        assert a.shape == (2, 4, 1, 1, 1)
        np.testing.assert_array_equal(a.data, 0.5)
        np.testing.assert_array_equal(out.data, (0.5 * x).astype(out.dtype))

    def test_constant_per_channel_depends_on_means_only(self, rng):
        blk = A.ChannelAttention(3, rng=rng).astype(np.float64)
        v = np.array([0.3, -1.0, 2.0])
        x1 = np.broadcast_to(v[None, :, None, None, None], (1, 3, 6, 6, 6)).copy()
        x2 = np.broadcast_to(v[None, :, None, None, None], (1, 3, 4, 9, 5)).copy()
        a1, _ = A.channel_attention(Tensor(x1), blk)
        a2, _ = A.channel_attention(Tensor(x2), blk)
        np.testing.assert_allclose(a1.data, a2.data, rtol=1e-12)

    def test_ratio_constant_within_channel(self, rng):
        blk = A.ChannelAttention(4, rng=rng).astype(np.float64)
        x = rng.uniform(0.5, 2.0, (1, 4, 6, 6, 6))
        _, out = A.channel_attention(Tensor(x), blk)
        ratio = out.data / x
        spread = ratio.reshape(4, -1).max(axis=1) - ratio.reshape(4, -1).min(axis=1)
        assert np.all(spread < 1e-12)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            A.ChannelAttention(2)(Tensor(np.zeros((1, 2, 2, 4, 4))))

    def test_param_count(self):
        assert A.ChannelAttention(32).num_parameters() == A.proposed_channel_param_count(32) == 27680
        assert A.SEAttention(32, 16).num_parameters() == A.se_param_count(32, 16) == 162

    def test_grad(self, rng):
        _check_module(A.ChannelAttention(4, rng=rng), _x(rng))


class TestSpatialAttention:
    def test_zero_params_half(self, rng):
        blk = A.CrossSectionSpatialAttention(4, (5, 6, 7))
        _zero(blk)
        x = rng.standard_normal((1, 4, 5, 6, 7))
        a, out = A.spatial_attention(Tensor(x), blk)
        assert a.shape == x.shape
        np.testing.assert_array_equal(a.data, 0.5)
        np.testing.assert_array_equal(out.data, (0.5 * x).astype(out.dtype))

    @pytest.mark.parametrize("plane", ["axial", "coronal", "sagittal"])
    def test_view_round_trip(self, rng, plane):
        e = rng.standard_normal((2, 3, 4, 5))
        v = A.to_view(Tensor(e), plane)
        assert np.array_equal(A.from_view(v, plane).data, e)

    def test_view_channel_axes(self, rng):
        e = rng.standard_normal((1, 3, 4, 5))
        assert A.to_view(Tensor(e), "coronal").shape == (1, 4, 3, 5)
        assert A.to_view(Tensor(e), "sagittal").shape == (1, 5, 3, 4)
        # voxel (d, h, w) = (1, 2, 3) lands on coronal channel h and sagittal channel w
        assert A.to_view(Tensor(e), "coronal").data[0, 2, 1, 3] == e[0, 1, 2, 3]
        assert A.to_view(Tensor(e), "sagittal").data[0, 3, 1, 2] == e[0, 1, 2, 3]

    def test_maps_in_open_unit_interval(self, rng):
        blk = A.CrossSectionSpatialAttention(3, (4, 5, 6), rng=rng)
        a = blk.attention_map(Tensor(rng.standard_normal((2, 3, 4, 5, 6)).astype(np.float32)))
        assert np.all((a.data > 0) & (a.data < 1))

    def test_grad(self, rng):
        _check_module(A.CrossSectionSpatialAttention(4, (6, 6, 6), rng=rng), _x(rng))

    def test_wrong_extent(self, rng):
        blk = A.CrossSectionSpatialAttention(4, (6, 6, 6))
        with pytest.raises(ShapeError):
            blk(Tensor(np.zeros((1, 4, 6, 6, 5))))


class TestBaselines:
    def test_se_zero_half(self, rng):
        blk = A.SEAttention(32, 16)
        _zero(blk)
        a, _ = A.se_channel_attention(Tensor(rng.standard_normal((1, 32, 3, 3, 3))), blk)
        np.testing.assert_array_equal(a.data, 0.5)

    def test_se_bad_reduction(self):
        with pytest.raises(ValueError):
            A.SEAttention(6, 4)

    def test_se_constant_depends_on_channel_means(self, rng):
        blk = A.SEAttention(4, 2, rng=rng).astype(np.float64)
        v = rng.standard_normal(4)
        x1 = np.broadcast_to(v[None, :, None, None, None], (1, 4, 3, 3, 3)).copy()
        x2 = np.broadcast_to(v[None, :, None, None, None], (1, 4, 5, 2, 7)).copy()
        np.testing.assert_allclose(blk.attention_map(Tensor(x1)).data, blk.attention_map(Tensor(x2)).data, rtol=1e-12)

    def test_cbam_zero_half(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 4, 4, 4)))
        ca, sa = A.CBAMChannelAttention(4, 2), A.CBAMSpatialAttention()
        _zero(ca)
        _zero(sa)
        np.testing.assert_array_equal(A.cbam_channel_attention(x, ca)[0].data, 0.5)
        np.testing.assert_array_equal(A.cbam_spatial_attention(x, sa)[0].data, 0.5)

    def test_cbam_constant_logits_doubled(self, rng):
        blk = A.CBAMChannelAttention(4, 2, rng=rng).astype(np.float64)
        v = rng.standard_normal(4)
        x = np.broadcast_to(v[None, :, None, None, None], (1, 4, 3, 3, 3)).copy()
        a = blk.attention_map(Tensor(x)).data.ravel()
        mlp = blk._mlp(Tensor(v[None])).data.ravel()
        np.testing.assert_allclose(a, 1 / (1 + np.exp(-2 * mlp)), rtol=1e-12)

    def test_cbam_spatial_single_channel(self, rng):
        blk = A.CBAMSpatialAttention(rng=rng).astype(np.float64)
        x = rng.standard_normal((1, 1, 4, 4, 4))
        ref = blk.conv(Tensor(2 * x)).data
        np.testing.assert_allclose(blk.attention_map(Tensor(x)).data, 1 / (1 + np.exp(-ref)), rtol=1e-12)

    @pytest.mark.parametrize(
        "factory",
        [
            lambda rng: A.SEAttention(4, 2, rng=rng),
            lambda rng: A.CBAMChannelAttention(4, 2, rng=rng),
            lambda rng: A.CBAMSpatialAttention(rng=rng),
        ],
    )
    def test_grad(self, rng, factory):
        # distinct-valued input keeps the max pools away from ties
        x = Parameter(rng.permutation(4 * 216).reshape(1, 4, 6, 6, 6) / 300.0, dtype=np.float64)
        _check_module(factory(rng), x)


class TestResidualUnit:
    @pytest.mark.parametrize("mode", A.ATTENTION_MODES)
    def test_all_maps_in_unit_interval(self, rng, mode):
        unit = A.ResidualUnit(4, (6, 6, 6), groups=2, attention=mode, reduction=2, rng=rng)
        x = Tensor(rng.standard_normal((1, 4, 6, 6, 6)).astype(np.float32))
        y = unit.branch(x)
        for gate in unit.gates:
            a = gate.attention_map(y)
            assert np.all((a.data > 0) & (a.data < 1))
            refined = gate(y)
            nz = y.data != 0
            assert np.all(np.abs(refined.data[nz]) < np.abs(y.data[nz]))
            y = refined

    def test_zero_branch_no_attention(self, rng):
        unit = A.ResidualUnit(4, (4, 4, 4), groups=2, rng=rng)
        unit.conv3.bn.gamma.data[...] = 0
        x = rng.standard_normal((1, 4, 4, 4, 4)).astype(np.float32)
        out = unit(Tensor(x)).data
        np.testing.assert_allclose(out, np.where(x > 0, x, np.tanh(x)), rtol=1e-6)

    def test_proposed_ca_zero_gate(self, rng):
        unit = A.ResidualUnit(4, (4, 4, 4), groups=2, attention="proposed_ca", rng=rng).astype(np.float64)
        _zero(unit.gates[0])
        x = Tensor(rng.standard_normal((1, 4, 4, 4, 4)))
        pre = 0.5 * unit.branch(x).data + x.data
        np.testing.assert_allclose(unit(x).data, np.where(pre > 0, pre, np.tanh(pre)), rtol=1e-12)

    @pytest.mark.parametrize("mode", ["none", "proposed_ca_sa", "cbam_ca"])
    def test_grad(self, rng, mode):
        unit = A.ResidualUnit(4, (6, 6, 6), groups=2, attention=mode, reduction=2, rng=rng)
        x = Parameter(rng.permutation(4 * 216).reshape(1, 4, 6, 6, 6) / 300.0, dtype=np.float64)
        _check_module(unit, x, max_checks=25)


class TestZoomIn:
    def test_shape_law(self, rng):
        z = A.ZoomIn(8, rng=rng)
        assert z(Tensor(np.zeros((1, 8, 10, 10, 10), np.float32))).shape == (1, 8, 10, 10, 10)

    def test_odd_extent_restored(self, rng):
        z = A.ZoomIn(2, rng=rng)
        assert z(Tensor(np.zeros((1, 2, 5, 5, 5), np.float32))).shape == (1, 2, 5, 5, 5)

    def test_zero_weights(self, rng):
        z = A.ZoomIn(2, act="relu", rng=rng).eval()
        _zero(z.up)
        x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)).astype(np.float32))
        np.testing.assert_array_equal(A.zoom_in_path(x, z).data, 0.0)

    def test_grad(self, rng):
        z = A.ZoomIn(2, rng=rng)
        x = _x(rng, (1, 2, 4, 4, 4))
        _check_module(z, x, max_checks=40)
