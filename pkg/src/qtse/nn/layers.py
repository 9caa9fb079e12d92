"""Layers with hand-written reverse passes.

Every layer is stateless: parameters live in a flat ``dict`` keyed
``"<layer name>.<tensor>"``. ``forward(params, x)`` returns the output and a
cache, ``backward(params, cache, gy)`` returns the input gradient and a dict
of parameter gradients with the same keys.

Feature maps are (channels, time, freq) float arrays. Convolutions pad the
time axis causally and the frequency axis symmetrically so that a stride
``s`` maps ``F`` bins to ``ceil(F / s)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError

CLN_EPS = 1e-8


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def freq_padding(f_in: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return ``(left, right, f_out)`` for a strided frequency convolution."""
    f_out = -(-f_in // stride)
    total = max((f_out - 1) * stride + kernel - f_in, 0)
    return total // 2, total - total // 2, f_out


@dataclass(frozen=True)
class GatedConvSpec:
    in_ch: int
    out_ch: int
    kernel: tuple[int, int] = (1, 5)
    stride: tuple[int, int] = (1, 2)
    transposed: bool = False
    output_padding: int = 0

    def __post_init__(self):
        if min(self.in_ch, self.out_ch, *self.kernel, *self.stride) < 1:
            raise ValueError(f"all sizes must be positive: {self}")
        if self.kernel[1] < self.stride[1]:
            raise ValueError("frequency kernel must be at least the stride")
        if self.transposed and self.stride[0] != 1:
            raise ValueError("transposed convolutions keep the time resolution")
        if not 0 <= self.output_padding < self.stride[1]:
            raise ValueError("output_padding must lie in [0, stride)")

    def out_shape(self, n_frames: int, n_bins: int) -> tuple[int, int]:
        kt, kf = self.kernel
        st, sf = self.stride
        if self.transposed:
            return n_frames, sf * (n_bins - 1) + 1 + self.output_padding
        return -(-n_frames // st), -(-n_bins // sf)

    @property
    def fan_in(self) -> int:
        return self.in_ch * self.kernel[0] * self.kernel[1]


def _check_channels(x, n, name):
    if x.ndim != 3 or x.shape[0] != n:
        raise ShapeError(f"{name}: expected ({n}, T, F) input, got {x.shape}")


def conv_forward(x, w, b, stride):
    """Causal-in-time strided 2-D convolution.

    Args:
        x: (I, T, F) input.
        w: (O, I, kt, kf) weights.
        b: (O,) bias.
    """
    _, kt, kf = w.shape[1:]
    st, sf = stride
    n_frames, n_bins = x.shape[1:]
    left, right, f_out = freq_padding(n_bins, kf, sf)
    t_out = -(-n_frames // st)
    xp = np.pad(x, ((0, 0), (kt - 1, 0), (left, right)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kt, kf), axis=(1, 2))
    cols = cols[:, ::st, ::sf][:, :t_out, :f_out]
    y = np.tensordot(w, cols, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None]
    return y, (cols, xp.shape, left, x.shape)


def conv_backward(gy, w, cache, stride):
    cols, padded_shape, left, x_shape = cache
    _, kt, kf = w.shape[1:]
    st, sf = stride
    t_out, f_out = gy.shape[1:]
    gw = np.tensordot(gy, cols, axes=([1, 2], [1, 2]))
    gb = gy.sum(axis=(1, 2))
    gcols = np.tensordot(w, gy, axes=([0], [0]))
    gxp = np.zeros(padded_shape)
    for dt in range(kt):
        for df in range(kf):
            gxp[:, dt : dt + st * t_out : st, df : df + sf * f_out : sf] += gcols[:, dt, df]
    gx = gxp[:, kt - 1 :, left : left + x_shape[2]]
    return gx, gw, gb


def conv_transpose_forward(x, w, b, sf, f_out):
    """Frequency-transposed convolution, the adjoint of :func:`conv_forward`
    along frequency (stride 2 restores ``F`` from ``ceil(F / 2)``) and causal
    along time.

    Args:
        x: (I, T, F_in) input.
        w: (I, O, kt, kf) weights.
        sf: frequency stride.
        f_out: target number of bins; ``ceil(f_out / sf)`` must equal F_in.
    """
    kt, kf = w.shape[2:]
    if -(-f_out // sf) != x.shape[2]:
        raise ShapeError(f"stride {sf} cannot restore {f_out} bins from {x.shape[2]}")
    n_frames, f_in = x.shape[1:]
    left, _, _ = freq_padding(f_out, kf, sf)
    width = max((f_in - 1) * sf + kf, left + f_out)
    z = np.tensordot(w, x, axes=([0], [0]))  # (O, kt, kf, T, F_in)
    full = np.zeros((w.shape[1], n_frames + kt - 1, width))
    for dt in range(kt):
        for df in range(kf):
            full[:, dt : dt + n_frames, df : df + sf * f_in : sf] += z[:, dt, df]
    y = full[:, :n_frames, left : left + f_out] + b[:, None, None]
    return y, (x, left, width, sf)


def conv_transpose_backward(gy, w, cache):
    x, left, width, sf = cache
    kt, kf = w.shape[2:]
    n_frames, f_in = x.shape[1:]
    full = np.zeros((gy.shape[0], n_frames + kt - 1, width))
    full[:, :n_frames, left : left + gy.shape[2]] = gy
    gz = np.lib.stride_tricks.sliding_window_view(full, (kt, kf), axis=(1, 2))
    gz = gz[:, :n_frames, ::sf][:, :, :f_in]  # (O, T, F_in, kt, kf)
    gx = np.tensordot(w, gz, axes=([1, 2, 3], [0, 3, 4]))
    gw = np.tensordot(x, gz, axes=([1, 2], [1, 2]))
    gb = gy.sum(axis=(1, 2))
    return gx, gw, gb


class Layer:
    name: str

    def init(self, rng: np.random.Generator) -> dict:
        return {}

    def forward(self, params, x):
        raise NotImplementedError

    def backward(self, params, cache, gy):
        raise NotImplementedError

    def key(self, tensor: str) -> str:
        return f"{self.name}.{tensor}"


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Layer):
    """Plain (ungated) convolution; used as the 1x1 mask head."""

    def __init__(self, name, in_ch, out_ch, kernel=(1, 1), stride=(1, 1)):
        self.name, self.in_ch, self.out_ch = name, in_ch, out_ch
        self.kernel, self.stride = tuple(kernel), tuple(stride)

    def init(self, rng):
        fan_in = self.in_ch * self.kernel[0] * self.kernel[1]
        return {
            self.key("w"): _uniform(rng, (self.out_ch, self.in_ch, *self.kernel), fan_in),
            self.key("b"): _uniform(rng, (self.out_ch,), fan_in),
        }

    def forward(self, params, x):
        _check_channels(x, self.in_ch, self.name)
        return conv_forward(x, params[self.key("w")], params[self.key("b")], self.stride)

    def backward(self, params, cache, gy):
        gx, gw, gb = conv_backward(gy, params[self.key("w")], cache, self.stride)
        return gx, {self.key("w"): gw, self.key("b"): gb}


class GatedConv2d(Layer):
    """``y = conv_lin(x) * sigmoid(conv_gate(x))`` with independent weights."""

    def __init__(self, name: str, spec: GatedConvSpec):
        self.name, self.spec = name, spec

    def _wshape(self):
        s = self.spec
        if s.transposed:
            return (s.in_ch, s.out_ch, *s.kernel)
        return (s.out_ch, s.in_ch, *s.kernel)

    def init(self, rng):
        fan_in = self.spec.fan_in
        params = {}
        for branch in ("lin", "gate"):
            params[self.key(f"w_{branch}")] = _uniform(rng, self._wshape(), fan_in)
            params[self.key(f"b_{branch}")] = _uniform(rng, (self.spec.out_ch,), fan_in)
        return params

    def _linear(self, params, x, branch):
        w, b = params[self.key(f"w_{branch}")], params[self.key(f"b_{branch}")]
        if self.spec.transposed:
            f_out = self.spec.out_shape(*x.shape[1:])[1]
            return conv_transpose_forward(x, w, b, self.spec.stride[1], f_out)
        return conv_forward(x, w, b, self.spec.stride)

    def forward(self, params, x):
        _check_channels(x, self.spec.in_ch, self.name)
        a, cache_a = self._linear(params, x, "lin")
        g, cache_g = self._linear(params, x, "gate")
        gate = sigmoid(g)
        return a * gate, (a, gate, cache_a, cache_g)

    def backward(self, params, cache, gy):
        a, gate, cache_a, cache_g = cache
        grads = {}
        gx = 0.0
        for branch, c, g_branch in (
            ("lin", cache_a, gy * gate),
            ("gate", cache_g, gy * a * gate * (1.0 - gate)),
        ):
            w = params[self.key(f"w_{branch}")]
            if self.spec.transposed:
                gxi, gw, gb = conv_transpose_backward(g_branch, w, c)
            else:
                gxi, gw, gb = conv_backward(g_branch, w, c, self.spec.stride)
            gx = gx + gxi
            grads[self.key(f"w_{branch}")] = gw
            grads[self.key(f"b_{branch}")] = gb
        return gx, grads


class CumulativeLayerNorm(Layer):
    """Causal normalization with statistics over all channels, bins and frames so far."""

    def __init__(self, name, channels):
        self.name, self.channels = name, channels

    def init(self, rng):
        return {self.key("gain"): np.ones(self.channels), self.key("bias"): np.zeros(self.channels)}

    def forward(self, params, x):
        _check_channels(x, self.channels, self.name)
        n_ch, n_frames, n_bins = x.shape
        count = n_ch * n_bins * np.arange(1, n_frames + 1)
        mean = np.cumsum(x.sum(axis=(0, 2))) / count
        var = np.maximum(np.cumsum((x**2).sum(axis=(0, 2))) / count - mean**2, 0.0)
        inv_std = 1.0 / np.sqrt(var + CLN_EPS)
        xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
        gain, bias = params[self.key("gain")], params[self.key("bias")]
        y = gain[:, None, None] * xhat + bias[:, None, None]
        return y, (x, xhat, mean, inv_std, count)

    def backward(self, params, cache, gy):
        x, xhat, mean, inv_std, count = cache
        gain = params[self.key("gain")]
        grads = {self.key("gain"): (gy * xhat).sum(axis=(1, 2)), self.key("bias"): gy.sum(axis=(1, 2))}
        gxhat = gy * gain[:, None, None]
        centered = x - mean[None, :, None]
        g_inv_std = (gxhat * centered).sum(axis=(0, 2))
        g_var = -0.5 * inv_std**3 * g_inv_std
        g_mean = -inv_std * gxhat.sum(axis=(0, 2)) - 2.0 * mean * g_var
        # back through the running sums
        g_sum = np.cumsum((g_mean / count)[::-1])[::-1]
        g_sumsq = np.cumsum((g_var / count)[::-1])[::-1]
        gx = gxhat * inv_std[None, :, None] + g_sum[None, :, None] + 2.0 * x * g_sumsq[None, :, None]
        return gx, grads


class PReLU(Layer):
    def __init__(self, name, channels, init_slope=0.25):
        self.name, self.channels, self.init_slope = name, channels, init_slope

    def init(self, rng):
        return {self.key("slope"): np.full(self.channels, self.init_slope)}

    def forward(self, params, x):
        _check_channels(x, self.channels, self.name)
        slope = params[self.key("slope")][:, None, None]
        return np.where(x > 0, x, slope * x), x

    def backward(self, params, cache, gy):
        x = cache
        slope = params[self.key("slope")][:, None, None]
        gx = np.where(x > 0, gy, slope * gy)
        return gx, {self.key("slope"): np.where(x > 0, 0.0, gy * x).sum(axis=(1, 2))}


class ElmanBottleneck(Layer):
    """Residual recurrent pass over frames of a flattened (C*F) feature.

    ``h_t = tanh(W_in x_t + W_rec h_{t-1} + b)`` and
    ``y_t = x_t + W_out h_t + b_out``.
    """

    def __init__(self, name, channels, n_bins, hidden=64):
        self.name, self.channels, self.n_bins, self.hidden = name, channels, n_bins, hidden

    @property
    def width(self):
        return self.channels * self.n_bins

    def init(self, rng):
        d, h = self.width, self.hidden
        return {
            self.key("w_in"): _uniform(rng, (h, d), d),
            self.key("w_rec"): _uniform(rng, (h, h), h),
            self.key("b"): np.zeros(h),
            self.key("w_out"): _uniform(rng, (d, h), h),
            self.key("b_out"): np.zeros(d),
        }

    def forward(self, params, x):
        _check_channels(x, self.channels, self.name)
        if x.shape[2] != self.n_bins:
            raise ShapeError(f"{self.name}: expected {self.n_bins} bins, got {x.shape[2]}")
        n_frames = x.shape[1]
        seq = x.transpose(1, 0, 2).reshape(n_frames, -1)
        w_rec = params[self.key("w_rec")]
        pre = seq @ params[self.key("w_in")].T + params[self.key("b")]
        h = np.zeros((n_frames + 1, self.hidden))
        for t in range(n_frames):
            h[t + 1] = np.tanh(pre[t] + w_rec @ h[t])
        out = seq + h[1:] @ params[self.key("w_out")].T + params[self.key("b_out")]
        y = out.reshape(n_frames, self.channels, self.n_bins).transpose(1, 0, 2)
        return y, (seq, h)

    def backward(self, params, cache, gy):
        seq, h = cache
        n_frames = seq.shape[0]
        gout = gy.transpose(1, 0, 2).reshape(n_frames, -1)
        w_out, w_rec = params[self.key("w_out")], params[self.key("w_rec")]
        gh = gout @ w_out
        gpre = np.zeros((n_frames, self.hidden))
        carry = np.zeros(self.hidden)
        for t in range(n_frames - 1, -1, -1):
            gpre[t] = (gh[t] + carry) * (1.0 - h[t + 1] ** 2)
            carry = w_rec.T @ gpre[t]
        grads = {
            self.key("w_in"): gpre.T @ seq,
            self.key("w_rec"): gpre.T @ h[:-1],
            self.key("b"): gpre.sum(axis=0),
            self.key("w_out"): gout.T @ h[1:],
            self.key("b_out"): gout.sum(axis=0),
        }
        gseq = gout + gpre @ params[self.key("w_in")]
        gx = gseq.reshape(n_frames, self.channels, self.n_bins).transpose(1, 0, 2)
        return gx, grads


class Sequential(Layer):
    def __init__(self, name, layers):
        self.name, self.layers = name, list(layers)

    def init(self, rng):
        params = {}
        for layer in self.layers:
            params.update(layer.init(rng))
        return params

    def forward(self, params, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(params, x)
            caches.append(c)
        return x, caches

    def backward(self, params, caches, gy):
        grads = {}
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            gy, g = layer.backward(params, c, gy)
            grads.update(g)
        return gy, grads


def gated_block(name, spec: GatedConvSpec) -> Sequential:
    """Gated conv, cumulative layer norm, PReLU."""
    return Sequential(
        name,
        [
            GatedConv2d(f"{name}.conv", spec),
            CumulativeLayerNorm(f"{name}.cln", spec.out_ch),
            PReLU(f"{name}.prelu", spec.out_ch),
        ],
    )
