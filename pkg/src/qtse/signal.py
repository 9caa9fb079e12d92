"""Time/frequency conversion and the channel arithmetic shared by every stage.

Shapes used throughout the package:
    mono wave:          (N,) float
    multichannel wave:  (C, N) float, wrapped in :class:`MultiChannelWave`
    spectrogram:        (T, F) complex, F = fft_size // 2 + 1
    spectrogram stack:  (C, T, F) complex
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import InputTooShort, MetricUndefined, SampleRateMismatch, ShapeError

CANONICAL_RATE = 16000
SILENCE_RMS = 1e-8
SI_SDR_CAP_DB = 60.0


@dataclass(frozen=True)
class MultiChannelWave:
    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[None]
        if samples.ndim != 2 or samples.shape[1] < 1 or samples.shape[0] < 1:
            raise ShapeError(f"expected (C, N) samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    def __len__(self):
        return self.length


@dataclass(frozen=True)
class StftConfig:
    window_ms: float = 32.0
    hop_ms: float = 10.0
    fft_size: int = 512
    window: str = "sqrt_hann"
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        if self.hop_ms > self.window_ms or self.hop_ms <= 0:
            raise ValueError("need 0 < hop_ms <= window_ms")
        if self.fft_size < self.win_length:
            raise ValueError("fft_size must cover the window")
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def analysis_window(self) -> np.ndarray:
        return _WINDOWS[self.window](self.win_length)

    def num_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop_length

    def frame_centers_s(self, n_frames: int) -> np.ndarray:
        return np.arange(n_frames) * self.hop_length / self.sample_rate


def _periodic_hann(n):
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


_WINDOWS = {
    "sqrt_hann": lambda n: np.sqrt(_periodic_hann(n)),
    "hann": _periodic_hann,
}


def stft(x: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Short-time Fourier transform of a mono wave (or a (C, N) stack).

    The signal is reflect-padded by half a window on both sides, so frame
    ``t`` is centred on sample ``t * hop`` and ``T = 1 + N // hop``.

    Returns:
        Complex array of shape (T, F), or (C, T, F) for stacked input.
    """
    x = np.asarray(x, dtype=np.float64)
    win = cfg.win_length
    if x.shape[-1] < win:
        raise InputTooShort(f"need at least {win} samples, got {x.shape[-1]}")
    half = win // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(half, half)]
    padded = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, win, axis=-1)
    frames = frames[..., :: cfg.hop_length, :]
    frames = frames[..., : cfg.num_frames(x.shape[-1]), :]
    return np.fft.rfft(frames * cfg.analysis_window(), n=cfg.fft_size, axis=-1)


def istft(spec: np.ndarray, cfg: StftConfig = StftConfig(), length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Each synthesis frame is windowed again and the sum is divided by the
    overlapped squared window, which makes ``istft(stft(x))`` exact wherever
    that sum is nonzero.

    Args:
        spec: (T, F) or (C, T, F) complex spectrogram.
        length: output length in samples. Defaults to ``(T - 1) * hop``.
    """
    spec = np.asarray(spec)
    if spec.ndim < 2 or spec.shape[-1] != cfg.n_bins:
        raise ShapeError(f"expected (..., T, {cfg.n_bins}) spectrogram, got {spec.shape}")
    n_frames = spec.shape[-2]
    hop, win = cfg.hop_length, cfg.win_length
    window = cfg.analysis_window()
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1)[..., :win] * window

    total = (n_frames - 1) * hop + win
    out = np.zeros(spec.shape[:-2] + (total,))
    norm = np.zeros(total)
    wsq = window**2
    for t in range(n_frames):
        out[..., t * hop : t * hop + win] += frames[..., t, :]
        norm[t * hop : t * hop + win] += wsq
    norm = np.where(norm > 1e-10, norm, 1.0)
    out = out / norm

    half = win // 2
    if length is None:
        length = (n_frames - 1) * hop
    out = out[..., half : half + length]
    if out.shape[-1] < length:
        fill = [(0, 0)] * (out.ndim - 1) + [(0, length - out.shape[-1])]
        out = np.pad(out, fill)
    return out


def rms(x: np.ndarray, axis=-1) -> np.ndarray:
    return np.sqrt(np.mean(np.square(x), axis=axis))


def loudness_normalize(
    wave: MultiChannelWave, target_db: float = -25.0
) -> tuple[MultiChannelWave, np.ndarray]:
    """Scale every channel so that its RMS level equals ``target_db`` dBFS.

    Channels quieter than ``SILENCE_RMS`` are left untouched.

    Returns:
        The normalized wave and a boolean per-channel ``silent`` flag array.
    """
    levels = rms(wave.samples)
    silent = levels < SILENCE_RMS
    gains = np.where(silent, 1.0, 10 ** (target_db / 20) / np.where(silent, 1.0, levels))
    return MultiChannelWave(wave.samples * gains[:, None], wave.sample_rate), silent


def average_channels(wave: MultiChannelWave) -> np.ndarray:
    return wave.samples.mean(axis=0)


def apply_crm(spec: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Complex ratio masking: elementwise product of mask and mixture."""
    if np.shape(spec) != np.shape(mask):
        raise ShapeError(f"mask shape {np.shape(mask)} != spectrogram shape {np.shape(spec)}")
    return np.asarray(mask) * np.asarray(spec)


def si_sdr(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Scale-invariant SDR in dB, capped at +60 dB.

    Both signals are mean-removed and the estimate is projected onto the
    reference, as in Le Roux et al., "SDR - half-baked or well done?".
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if estimate.shape != reference.shape:
        raise ShapeError(f"length mismatch {estimate.shape} vs {reference.shape}")
    estimate = estimate - estimate.mean()
    reference = reference - reference.mean()
    ref_energy = np.dot(reference, reference)
    if ref_energy < SILENCE_RMS**2 * reference.size:
        raise MetricUndefined("reference is silent")
    target = np.dot(estimate, reference) / ref_energy * reference
    residual = estimate - target
    t_energy = np.dot(target, target)
    r_energy = np.dot(residual, residual)
    if t_energy == 0.0:
        return -SI_SDR_CAP_DB
    if r_energy <= t_energy * 10 ** (-SI_SDR_CAP_DB / 10):
        return SI_SDR_CAP_DB
    return float(max(10 * np.log10(t_energy / r_energy), -SI_SDR_CAP_DB))


def read_wav(path, expected_rate: int = CANONICAL_RATE) -> MultiChannelWave:
    """Read a PCM16 or float32 WAV file into a (C, N) float wave."""
    rate, data = wavfile.read(str(path))
    if rate != expected_rate:
        raise SampleRateMismatch(f"{path}: {rate} Hz, expected {expected_rate} Hz")
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype.kind == "f":
        data = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if data.ndim == 1:
        data = data[None]
    else:
        data = data.T
    return MultiChannelWave(data, rate)


def write_wav(path, wave, sample_rate: int = CANONICAL_RATE, pcm16: bool = False) -> Path:
    """Write a mono (N,) array, a (C, N) array or a MultiChannelWave."""
    if isinstance(wave, MultiChannelWave):
        sample_rate, data = wave.sample_rate, wave.samples
    else:
        data = np.asarray(wave, dtype=np.float64)
    if data.ndim == 2:
        data = data.T if data.shape[0] > 1 else data[0]
    if pcm16:
        data = (np.clip(data, -1.0, 1.0 - 1 / 32768) * 32768).astype(np.int16)
    else:
        data = data.astype(np.float32)
    path = Path(path)
    wavfile.write(str(path), sample_rate, data)
    return path
