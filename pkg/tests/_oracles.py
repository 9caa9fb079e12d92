"""Independent reference computations used by the tests.

Everything here is deliberately slow and literal: explicit loops, direct
formulas, no shared code with the package beyond plain NumPy.
"""
from __future__ import annotations

from math import lgamma, log, pi

import numpy as np


def central_difference(fn, array: np.ndarray, index, h: float = 1e-5) -> float:
    """d fn() / d array[index] by a central difference (mutates and restores)."""
    old = array[index]
    array[index] = old + h
    up = fn()
    array[index] = old - h
    down = fn()
    array[index] = old
    return (up - down) / (2 * h)


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_param_grads(loss, grads: dict, params: dict, rng, per_tensor: int = 6, h: float = 1e-5,
                      kinks=None):
    """Largest relative error between analytic and numeric gradients over
    ``per_tensor`` random entries of every parameter tensor.

    ``kinks`` optionally returns a boolean array (for example the signs of
    every PReLU input). A central difference whose two ends fall on
    different sides of a kink measures neither slope, so for such entries
    the step shrinks until both ends agree with the unperturbed pattern.
    """
    worst = 0.0
    for name, tensor in params.items():
        for _ in range(per_tensor):
            idx = tuple(int(rng.integers(0, d)) for d in tensor.shape)
            step = h if kinks is None else _kink_free_step(kinks, tensor, idx, h)
            numeric = central_difference(loss, tensor, idx, step)
            worst = max(worst, rel_error(numeric, grads[name][idx]))
    return worst


def _kink_free_step(kinks, tensor, idx, h, min_step=1e-9):
    base = kinks()
    old = tensor[idx]
    try:
        while h > min_step:
            tensor[idx] = old + h
            up = kinks()
            tensor[idx] = old - h
            down = kinks()
            if np.array_equal(up, base) and np.array_equal(down, base):
                return h
            h /= 10
        return h
    finally:
        tensor[idx] = old


def frame_dft(x: np.ndarray, win: np.ndarray, hop: int, n_fft: int) -> np.ndarray:
    """Reflect-padded framing with an explicit DFT matrix."""
    pad = len(win) // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = 1 + len(x) // hop
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(n_fft)[None, :]
    basis = np.exp(-2j * np.pi * k * n / n_fft)
    out = np.zeros((n_frames, n_fft // 2 + 1), dtype=complex)
    for t in range(n_frames):
        frame = np.zeros(n_fft)
        frame[: len(win)] = xp[t * hop : t * hop + len(win)] * win
        out[t] = basis @ frame
    return out


def sqrt_periodic_hann(n: int) -> np.ndarray:
    return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n))


def cacg_log_pdf(z: np.ndarray, shape: np.ndarray) -> float:
    """Log density of one unit vector under a complex angular central Gaussian."""
    c = len(z)
    quad = np.real(np.conj(z) @ np.linalg.solve(shape, z))
    _, logdet = np.linalg.slogdet(shape)
    return lgamma(c) - log(2) - c * log(pi) - logdet - c * log(quad)


def mixture_loglik(obs: np.ndarray, weights, shapes, active) -> np.ndarray:
    """Per-frequency observed-data log-likelihood with activity-gated priors,
    evaluated point by point. ``obs`` is (C, T, F)."""
    n_ch, n_frames, n_bins = obs.shape
    out = np.zeros(n_bins)
    for f in range(n_bins):
        y = obs[:, :, f]
        power = np.sqrt(np.mean(np.abs(y) ** 2, axis=1))
        y = y / np.where(power > 1e-20, power, 1.0)[:, None]
        for t in range(n_frames):
            v = y[:, t]
            norm = np.linalg.norm(v)
            if norm <= 1e-10:
                continue
            v = v / norm
            terms = [log(weights[k, f]) + cacg_log_pdf(v, shapes[k, f])
                     for k in range(len(weights)) if active[k, t] and weights[k, f] > 0]
            out[f] += np.logaddexp.reduce(terms)
    return out


def hybrid_loss_elementwise(est, target, alpha):
    """Hybrid complex/magnitude L2 loss summed bin by bin in plain Python."""
    sq_complex = 0.0
    sq_mag = 0.0
    for e, s in zip(np.ravel(est), np.ravel(target)):
        sq_complex += (e.real - s.real) ** 2 + (e.imag - s.imag) ** 2
        sq_mag += (abs(e) - abs(s)) ** 2
    return alpha * sq_complex**0.5 + (1 - alpha) * sq_mag**0.5


def energy_ratio_db(a: np.ndarray, b: np.ndarray) -> float:
    return 10 * np.log10(np.sum(np.square(a)) / np.sum(np.square(b)))


def si_sdr_reference(est, ref) -> float:
    est = est - est.mean()
    ref = ref - ref.mean()
    alpha = np.dot(est, ref) / np.dot(ref, ref)
    return 10 * np.log10(np.sum((alpha * ref) ** 2) / np.sum((est - alpha * ref) ** 2))

