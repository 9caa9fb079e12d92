"""Medium-quality path: multi-channel fusion mask on the averaged far-field.

Eight channels (six far-field microphones, their average, and the GSS
output) are loudness-normalized, turned into magnitude spectra and passed
through a frequency down-sampling (FD) layer. A transposed gated convolution
restores the frequency resolution and a sigmoid bounds the mask, which is
applied to the averaged far-field spectrum with that spectrum's phase.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import ShapeError
from .nn.layers import GatedConv2d, GatedConvSpec, gated_block, sigmoid
from .nn.model import Model
from .nn.params import ModelParams
from .signal import MultiChannelWave, StftConfig, average_channels, istft, loudness_normalize, stft

FARFIELD_CHANNELS = 6
FUSION_CHANNELS = 8
TARGET_LOUDNESS_DB = -25.0


@dataclass(frozen=True)
class FusionInput:
    farfield: MultiChannelWave
    gss_out: np.ndarray
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.farfield.channels != FARFIELD_CHANNELS:
            raise ShapeError(f"expected {FARFIELD_CHANNELS} far-field channels, got {self.farfield.channels}")
        gss = np.asarray(self.gss_out, dtype=np.float64)
        if gss.shape != (self.farfield.length,):
            raise ShapeError(f"GSS output length {gss.shape} != far-field length {self.farfield.length}")
        if self.farfield.sample_rate != self.stft.sample_rate:
            raise ShapeError("far-field sample rate differs from the STFT configuration")
        object.__setattr__(self, "gss_out", gss)

    @property
    def averaged(self) -> np.ndarray:
        return average_channels(self.farfield)


def assemble_channels(inp: FusionInput) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``[ff1..ff6, mean(ff), gss]`` as loudness-normalized magnitudes.

    The average is taken before normalization and then normalized itself.

    Returns:
        (8, T, F) magnitudes and the (8,) per-channel silent flags.
    """
    stack = np.vstack([inp.farfield.samples, inp.averaged[None], inp.gss_out[None]])
    normed, silent = loudness_normalize(MultiChannelWave(stack, inp.farfield.sample_rate), TARGET_LOUDNESS_DB)
    return np.abs(stft(normed.samples, inp.stft)), silent


@dataclass(frozen=True)
class FdLayerSpec:
    n_bins: int = 257
    in_ch: int = FUSION_CHANNELS
    width: int = 32
    kernel: tuple[int, int] = (2, 3)
    stride: tuple[int, int] = (1, 2)
    head_kernel: tuple[int, int] = (1, 3)


def _restore_padding(f_full: int, stride: int) -> int:
    f_low = -(-f_full // stride)
    return f_full - (stride * (f_low - 1) + 1)


class FdNet(Model):
    """Gated conv (2,3)/(1,2) -> cLN -> PReLU -> transposed gated conv -> sigmoid."""

    arch_name = "fd_net"

    def __init__(self, spec: FdLayerSpec = FdLayerSpec(), zero_mask_init: bool = True):
        self.spec = spec
        self.zero_mask_init = zero_mask_init
        self.down = gated_block("fd", GatedConvSpec(spec.in_ch, spec.width, spec.kernel, spec.stride))
        self.up = GatedConv2d(
            "fd.up",
            GatedConvSpec(
                spec.width, 1, spec.head_kernel, (1, spec.stride[1]), transposed=True,
                output_padding=_restore_padding(spec.n_bins, spec.stride[1]),
            ),
        )

    @classmethod
    def from_arch(cls, arch: dict) -> "FdNet":
        return cls(FdLayerSpec(arch["n_bins"], arch["in_ch"], arch["width"], tuple(arch["kernel"]),
                               tuple(arch["stride"]), tuple(arch["head_kernel"])))

    def arch(self):
        s = self.spec
        return {"name": self.arch_name, "n_bins": s.n_bins, "in_ch": s.in_ch, "width": s.width,
                "kernel": list(s.kernel), "stride": list(s.stride), "head_kernel": list(s.head_kernel)}

    def _init_tensors(self, rng):
        tensors = self.down.init(rng)
        tensors.update(self.up.init(rng))
        if self.zero_mask_init:
            # the mask starts at sigmoid(0) = 0.5 everywhere
            tensors["fd.up.w_lin"] = np.zeros_like(tensors["fd.up.w_lin"])
            tensors["fd.up.b_lin"] = np.zeros_like(tensors["fd.up.b_lin"])
        return tensors

    def forward(self, params, features):
        """(8, T, F) magnitudes -> (T, F) mask in (0, 1)."""
        if features.ndim != 3 or features.shape[0] != self.spec.in_ch or features.shape[2] != self.spec.n_bins:
            raise ShapeError(f"expected ({self.spec.in_ch}, T, {self.spec.n_bins}) features, got {features.shape}")
        h, c_down = self.down.forward(params, features)
        logits, c_up = self.up.forward(params, h)
        mask = sigmoid(logits[0])
        return mask, (c_down, c_up, mask)

    def backward(self, params, cache, g_mask):
        c_down, c_up, mask = cache
        g_logits = (g_mask * mask * (1.0 - mask))[None]
        g_h, grads = self.up.backward(params, c_up, g_logits)
        _, g_down = self.down.backward(params, c_down, g_h)
        grads.update(g_down)
        return grads


def fd_forward(features: np.ndarray, params: ModelParams, model: FdNet | None = None) -> np.ndarray:
    if model is None:
        model = FdNet.from_arch(params.arch) if params.arch else FdNet(FdLayerSpec(n_bins=features.shape[2]))
    return model.forward(params.tensors, features)[0]


class Extractor(Protocol):
    """Downstream extraction stage fed with the fused wave.

    ``visual`` is an optional (T', D) visual-cue embedding stream that is
    forwarded untouched.
    """

    def __call__(self, wave: np.ndarray, sample_rate: int, visual: np.ndarray | None = None) -> np.ndarray: ...


class IdentityExtractor:
    def __call__(self, wave, sample_rate, visual=None):
        return wave


def masked_average(inp: FusionInput, mask: np.ndarray) -> np.ndarray:
    """Apply a real (T, F) mask to the averaged far-field spectrum and resynthesize."""
    avg_spec = stft(inp.averaged, inp.stft)
    if mask.shape != avg_spec.shape:
        raise ShapeError(f"mask shape {mask.shape} != spectrum shape {avg_spec.shape}")
    return istft(mask * avg_spec, inp.stft, length=inp.farfield.length)


def fusion_extract(inp: FusionInput, params: ModelParams, model: FdNet | None = None,
                   extractor: Extractor | None = None, visual: np.ndarray | None = None) -> np.ndarray:
    features, _ = assemble_channels(inp)
    mask = fd_forward(features, params, model)
    fused = masked_average(inp, mask)
    extractor = extractor or IdentityExtractor()
    return extractor(fused, inp.farfield.sample_rate, visual)


def save_visual_embedding(path, emb: np.ndarray) -> Path:
    """Binary layout: little-endian uint32 rows, uint32 cols, then float32 row-major data."""
    emb = np.asarray(emb, dtype="<f4")
    if emb.ndim != 2:
        raise ShapeError("visual embedding must be a (T', D) matrix")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *emb.shape))
        fh.write(emb.tobytes(order="C"))
    return path


def load_visual_embedding(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ShapeError(f"{path}: truncated header")
    rows, cols = struct.unpack("<II", raw[:8])
    body = raw[8:]
    if len(body) != rows * cols * 4:
        raise ShapeError(f"{path}: header says {rows}x{cols} but payload has {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
