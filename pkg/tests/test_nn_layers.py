"""Shape and gradient tests for the hand-differentiated layers."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qtse.drcnet import CrmHead
from qtse.errors import ShapeError
from qtse.nn import (
    CumulativeLayerNorm,
    ElmanBottleneck,
    GatedConv2d,
    GatedConvSpec,
    PReLU,
    gated_block,
)

from _oracles import central_difference, check_param_grads, rel_error

SEEDS = range(10)
LAYER_TOL = 1e-4


def layer_gradcheck(layer, x, seed, complex_out=False):
    """Worst relative error of parameter and input gradients of
    ``sum(probe * layer(x))`` for a random probe."""
    rng = np.random.default_rng(seed)
    params = layer.init(rng)
    y, _ = layer.forward(params, x)
    probe = rng.standard_normal(y.shape)
    if complex_out:
        probe = probe + 1j * rng.standard_normal(y.shape)

    def loss():
        out = layer.forward(params, x)[0]
        return float(np.sum(probe.real * out.real + probe.imag * np.imag(out)))

    _, cache = layer.forward(params, x)
    gx, grads = layer.backward(params, cache, probe)
    worst = check_param_grads(loss, grads, params, rng)
    for _ in range(6):
        idx = tuple(int(rng.integers(0, d)) for d in x.shape)
        worst = max(worst, rel_error(central_difference(loss, x, idx), gx[idx]))
    return worst


def features(seed, shape=(3, 5, 9)):
    return np.random.default_rng(100 + seed).standard_normal(shape)


class TestGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_gated_conv(self, seed):
        layer = GatedConv2d("g", GatedConvSpec(3, 4, kernel=(2, 3), stride=(1, 2)))
        assert layer_gradcheck(layer, features(seed), seed) <= LAYER_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gated_conv_time_stride(self, seed):
        layer = GatedConv2d("g", GatedConvSpec(3, 2, kernel=(3, 5), stride=(2, 3)))
        assert layer_gradcheck(layer, features(seed), seed) <= LAYER_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_transposed_gated_conv(self, seed):
        layer = GatedConv2d("t", GatedConvSpec(3, 2, kernel=(2, 5), stride=(1, 2), transposed=True))
        assert layer_gradcheck(layer, features(seed), seed) <= LAYER_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_cumulative_layer_norm(self, seed):
        layer = CumulativeLayerNorm("n", 3)
        rng = np.random.default_rng(seed)
        params = layer.init(rng)
        params["n.gain"] = rng.uniform(0.5, 2, 3)
        params["n.bias"] = rng.standard_normal(3)
        x = features(seed)
        probe = rng.standard_normal(x.shape)

        def loss():
            return float(np.sum(probe * layer.forward(params, x)[0]))

        gx, grads = layer.backward(params, layer.forward(params, x)[1], probe)
        worst = check_param_grads(loss, grads, params, rng)
        for _ in range(6):
            idx = tuple(int(rng.integers(0, d)) for d in x.shape)
            worst = max(worst, rel_error(central_difference(loss, x, idx), gx[idx]))
        assert worst <= LAYER_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_prelu(self, seed):
        x = features(seed)
        x[np.abs(x) < 1e-3] = 0.1  # keep clear of the kink
        assert layer_gradcheck(PReLU("p", 3), x, seed) <= LAYER_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_recurrent_bottleneck(self, seed):
        layer = ElmanBottleneck("r", 3, 9, hidden=6)
        assert layer_gradcheck(layer, features(seed), seed) <= LAYER_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_crm_head(self, seed):
        assert layer_gradcheck(CrmHead("head", 3), features(seed), seed, complex_out=True) <= LAYER_TOL

    @pytest.mark.parametrize("seed", SEEDS[:3])
    def test_gated_block(self, seed):
        block = gated_block("b", GatedConvSpec(3, 4, kernel=(2, 3)))
        assert layer_gradcheck(block, features(seed), seed) <= LAYER_TOL


class TestShapes:
    @given(st.integers(1, 6), st.integers(2, 40), st.integers(1, 3), st.integers(0, 2))
    def test_encoder_decoder_round_trip(self, n_frames, n_bins, stride, extra):
        kernel = stride + extra
        down = GatedConv2d("d", GatedConvSpec(2, 3, kernel=(2, kernel), stride=(1, stride)))
        x = np.zeros((2, n_frames, n_bins))
        y, _ = down.forward(down.init(np.random.default_rng(0)), x)
        assert y.shape == (3, n_frames, -(-n_bins // stride))
        pad = (n_bins - 1) % stride if stride > 1 else 0
        up = GatedConv2d("u", GatedConvSpec(3, 2, kernel=(2, kernel), stride=(1, stride), transposed=True,
                                            output_padding=pad))
        z, _ = up.forward(up.init(np.random.default_rng(0)), y)
        assert z.shape == (2, n_frames, n_bins)

    def test_wrong_channels(self):
        layer = GatedConv2d("g", GatedConvSpec(3, 4))
        with pytest.raises(ShapeError):
            layer.forward(layer.init(np.random.default_rng(0)), np.zeros((2, 4, 8)))

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            GatedConvSpec(2, 2, kernel=(1, 1), stride=(1, 2))
        with pytest.raises(ValueError):
            GatedConvSpec(2, 2, stride=(2, 2), transposed=True)

    def test_bottleneck_bins_checked(self):
        layer = ElmanBottleneck("r", 2, 5, hidden=3)
        with pytest.raises(ShapeError):
            layer.forward(layer.init(np.random.default_rng(0)), np.zeros((2, 4, 6)))


class TestCausality:
    def _perturb_future(self, layer, seed=0):
        rng = np.random.default_rng(seed)
        params = layer.init(rng)
        x = rng.standard_normal((3, 10, 9))
        y0 = layer.forward(params, x)[0]
        x2 = x.copy()
        x2[:, 6:] += rng.standard_normal((3, 4, 9))
        y1 = layer.forward(params, x2)[0]
        return y0, y1

    @pytest.mark.parametrize("layer", [
        CumulativeLayerNorm("n", 3),
        GatedConv2d("g", GatedConvSpec(3, 3, kernel=(3, 3))),
        GatedConv2d("t", GatedConvSpec(3, 3, kernel=(2, 3), transposed=True)),
        ElmanBottleneck("r", 3, 9, hidden=4),
    ], ids=["cln", "conv", "tconv", "rnn"])
    def test_past_frames_unchanged(self, layer):
        y0, y1 = self._perturb_future(layer)
        np.testing.assert_array_equal(y0[:, :6], y1[:, :6])
        assert not np.allclose(y0[:, 6:], y1[:, 6:])

    def test_cln_first_frame_uses_only_itself(self, rng):
        layer = CumulativeLayerNorm("n", 2)
        x = rng.standard_normal((2, 4, 5))
        y = layer.forward(layer.init(rng), x)[0]
        first = x[:, 0]
        expected = (first - first.mean()) / np.sqrt(first.var() + 1e-8)
        np.testing.assert_allclose(y[:, 0], expected, atol=1e-12)
