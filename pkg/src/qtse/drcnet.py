"""Low-quality path: a gated-convolutional U-Net that predicts a complex ratio mask.

The network sees the real and imaginary parts of the GSS output spectrum
and emits a tanh-bounded complex mask. The enhanced spectrum is the mask
times the input, so a silent input always gives a silent output.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn.layers import Conv2d, ElmanBottleneck, GatedConvSpec, Layer, gated_block
from .nn.model import Model
from .nn.params import ModelParams
from .signal import StftConfig, apply_crm, istft, stft


@dataclass(frozen=True)
class DrcNetSpec:
    """``channels`` lists the input width followed by the first three block
    widths; the fourth encoder block keeps the last width."""

    n_bins: int = 257
    channels: tuple[int, ...] = (2, 32, 32, 64)
    kernel: tuple[int, int] = (1, 5)
    stride: tuple[int, int] = (1, 2)
    n_blocks: int = 4
    rnn_hidden: int = 64

    def __post_init__(self):
        if self.channels[0] != 2:
            raise ValueError("input width must be 2 (real and imaginary parts)")
        if self.n_bins < 2:
            raise ValueError("need at least 2 frequency bins")

    @property
    def encoder_widths(self) -> list[int]:
        widths = list(self.channels[1:])
        return (widths + [widths[-1]] * self.n_blocks)[: self.n_blocks]

    @property
    def bin_sizes(self) -> list[int]:
        sizes = [self.n_bins]
        for _ in range(self.n_blocks):
            sizes.append(-(-sizes[-1] // self.stride[1]))
        return sizes


class CrmHead(Layer):
    """1x1 convolution to two channels, tanh, read as real and imaginary parts."""

    def __init__(self, name, in_ch):
        self.name = name
        self.conv = Conv2d(name, in_ch, 2)

    def init(self, rng):
        return self.conv.init(rng)

    def forward(self, params, x):
        logits, cache = self.conv.forward(params, x)
        bounded = np.tanh(logits)
        return bounded[0] + 1j * bounded[1], (cache, bounded)

    def backward(self, params, cache, g_mask):
        """``g_mask`` holds dL/dRe + 1j * dL/dIm of the mask."""
        conv_cache, bounded = cache
        g_logits = np.stack([g_mask.real, g_mask.imag]) * (1.0 - bounded**2)
        return self.conv.backward(params, conv_cache, g_logits)


class DrcNetLite(Model):
    arch_name = "drcnet_lite"

    def __init__(self, spec: DrcNetSpec = DrcNetSpec()):
        self.spec = spec
        enc_w = spec.encoder_widths
        sizes = spec.bin_sizes
        sf = spec.stride[1]
        self.encoder = []
        in_ch = spec.channels[0]
        for i, w in enumerate(enc_w):
            self.encoder.append(gated_block(f"enc{i + 1}", GatedConvSpec(in_ch, w, spec.kernel, spec.stride)))
            in_ch = w
        self.bottleneck = ElmanBottleneck("rnn", enc_w[-1], sizes[-1], spec.rnn_hidden)
        self.decoder = []
        prev = enc_w[-1]
        for j in range(spec.n_blocks):
            skip = enc_w[spec.n_blocks - 1 - j]
            out = enc_w[max(spec.n_blocks - 2 - j, 0)]
            f_in, f_out = sizes[spec.n_blocks - j], sizes[spec.n_blocks - 1 - j]
            pad = f_out - (sf * (f_in - 1) + 1)
            self.decoder.append(
                gated_block(
                    f"dec{j + 1}",
                    GatedConvSpec(prev + skip, out, spec.kernel, (1, sf), transposed=True, output_padding=pad),
                )
            )
            prev = out
        self.head = CrmHead("head", prev)

    @classmethod
    def from_arch(cls, arch: dict) -> "DrcNetLite":
        return cls(DrcNetSpec(arch["n_bins"], tuple(arch["channels"]), tuple(arch["kernel"]),
                              tuple(arch["stride"]), arch["n_blocks"], arch["rnn_hidden"]))

    def arch(self):
        s = self.spec
        return {"name": self.arch_name, "n_bins": s.n_bins, "channels": list(s.channels),
                "kernel": list(s.kernel), "stride": list(s.stride), "n_blocks": s.n_blocks,
                "rnn_hidden": s.rnn_hidden}

    def _layers(self):
        return [*self.encoder, self.bottleneck, *self.decoder, self.head]

    def _init_tensors(self, rng):
        tensors = {}
        for layer in self._layers():
            tensors.update(layer.init(rng))
        return tensors

    def forward(self, params, spec):
        """(T, F) complex spectrum -> (T, F) complex mask with |Re|, |Im| < 1."""
        spec = np.asarray(spec)
        if spec.ndim != 2 or spec.shape[1] != self.spec.n_bins:
            raise ShapeError(f"expected (T, {self.spec.n_bins}) spectrum, got {spec.shape}")
        x = np.stack([spec.real, spec.imag])
        skips, caches = [], []
        for block in self.encoder:
            x, c = block.forward(params, x)
            skips.append(x)
            caches.append(c)
        x, c_rnn = self.bottleneck.forward(params, x)
        dec_caches = []
        for j, block in enumerate(self.decoder):
            skip = skips[-1 - j]
            x, c = block.forward(params, np.concatenate([x, skip]))
            dec_caches.append(c)
        mask, c_head = self.head.forward(params, x)
        return mask, (caches, c_rnn, dec_caches, c_head, [s.shape[0] for s in skips])

    def backward(self, params, cache, g_mask):
        """``g_mask`` holds dL/dRe + 1j * dL/dIm of the mask."""
        caches, c_rnn, dec_caches, c_head, skip_ch = cache
        g, grads = self.head.backward(params, c_head, g_mask)
        g_skips = [None] * len(self.encoder)
        for j in range(len(self.decoder) - 1, -1, -1):
            g_cat, gd = self.decoder[j].backward(params, dec_caches[j], g)
            grads.update(gd)
            n_skip = skip_ch[-1 - j]
            g, g_skips[-1 - j] = g_cat[:-n_skip], g_cat[-n_skip:]
        g, gr = self.bottleneck.backward(params, c_rnn, g)
        grads.update(gr)
        for i in range(len(self.encoder) - 1, -1, -1):
            g = g + g_skips[i]
            g, ge = self.encoder[i].backward(params, caches[i], g)
            grads.update(ge)
        return grads


def loss_eq1(est: np.ndarray, target: np.ndarray, alpha: float = 0.5) -> float:
    """Hybrid spectral loss.

    ``alpha * ||est - target||_2 + (1 - alpha) * || |est| - |target| ||_2``
    with Frobenius norms over all time-frequency bins.
    """
    est, target = np.asarray(est), np.asarray(target)
    if est.shape != target.shape:
        raise ShapeError(f"shape mismatch {est.shape} vs {target.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    complex_term = np.linalg.norm(est - target)
    mag_term = np.linalg.norm(np.abs(est) - np.abs(target))
    return float(alpha * complex_term + (1 - alpha) * mag_term)


def loss_eq1_grad(est, target, alpha: float = 0.5) -> tuple[float, np.ndarray]:
    """Loss value and its gradient as dL/dRe(est) + 1j * dL/dIm(est)."""
    diff = est - target
    complex_term = np.linalg.norm(diff)
    mag_est = np.abs(est)
    mag_diff = mag_est - np.abs(target)
    mag_term = np.linalg.norm(mag_diff)
    grad = np.zeros_like(est, dtype=complex)
    if complex_term > 0:
        grad += alpha * diff / complex_term
    if mag_term > 0:
        phase = np.divide(est, mag_est, out=np.zeros_like(est, dtype=complex), where=mag_est > 0)
        grad += (1 - alpha) * mag_diff / mag_term * phase
    return float(alpha * complex_term + (1 - alpha) * mag_term), grad


def crm_loss(y: np.ndarray, target: np.ndarray, alpha: float = 0.5):
    """Loss closure over the mask: L(mask * y, target) and dL/dmask."""

    def fn(mask):
        loss, g_est = loss_eq1_grad(apply_crm(y, mask), target, alpha)
        # est = mask * y  =>  dL/dmask = g_est * conj(y) in the Re + 1j Im convention
        return loss, g_est * np.conj(y)

    return fn


def _model_for(params: ModelParams, model: DrcNetLite | None, n_bins: int) -> DrcNetLite:
    if model is not None:
        return model
    if params.arch:
        return DrcNetLite.from_arch(params.arch)
    return DrcNetLite(DrcNetSpec(n_bins=n_bins))


def drcnet_forward(gss_spec: np.ndarray, params: ModelParams, model: DrcNetLite | None = None) -> np.ndarray:
    model = _model_for(params, model, np.shape(gss_spec)[-1])
    return model.forward(params.tensors, gss_spec)[0]


def drcnet_enhance(gss_wave: np.ndarray, params: ModelParams, cfg: StftConfig = StftConfig(),
                   model: DrcNetLite | None = None) -> np.ndarray:
    spec = stft(gss_wave, cfg)
    mask = drcnet_forward(spec, params, model)
    return istft(apply_crm(spec, mask), cfg, length=len(gss_wave))
