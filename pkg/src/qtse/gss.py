"""Activity-guided source separation.

A complex angular central Gaussian mixture (cACGMM) is fitted independently
in every frequency bin. Speaker activity gates the class priors frame by
frame, which both resolves the permutation problem and forces inactive
speakers to zero. The resulting masks drive a Souden MVDR beamformer.
"""
from __future__ import annotations

import json
import warnings
from math import lgamma, log, pi
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import BeamformerSingular, NeedMultichannel, ShapeError
from .signal import MultiChannelWave, StftConfig, istft, stft

NOISE_ID = "<noise>"
_TINY = 1e-20
DEFAULT_SHRINKAGE = 1e-2


@dataclass(frozen=True)
class ActivityGrid:
    """Binary (K, T) class activity; the last row is the always-on noise class."""

    active: np.ndarray
    source_ids: tuple[str, ...]

    def __post_init__(self):
        active = np.asarray(self.active, dtype=bool)
        if active.ndim != 2:
            raise ShapeError(f"activity must be (K, T), got {active.shape}")
        if active.shape[0] != len(self.source_ids) + 1:
            raise ShapeError("need one row per source plus a trailing noise row")
        if not active[-1].all():
            raise ValueError("noise row must be all ones")
        object.__setattr__(self, "active", active)
        object.__setattr__(self, "source_ids", tuple(self.source_ids))

    @classmethod
    def from_speakers(cls, speaker_activity, source_ids=None) -> "ActivityGrid":
        """Build a grid from (K-1, T) speaker rows, appending the noise row."""
        speaker_activity = np.atleast_2d(np.asarray(speaker_activity, dtype=bool))
        if source_ids is None:
            source_ids = tuple(f"spk{i}" for i in range(speaker_activity.shape[0]))
        noise = np.ones((1, speaker_activity.shape[1]), dtype=bool)
        return cls(np.concatenate([speaker_activity, noise]), tuple(source_ids))

    @classmethod
    def from_segments(
        cls,
        segments: Sequence[dict],
        n_frames: int,
        cfg: StftConfig = StftConfig(),
        source_ids: Sequence[str] | None = None,
    ) -> "ActivityGrid":
        """Rasterize ``{source_id, start_s, end_s}`` segments onto the frame grid.

        A frame is active for a source when its centre lies in ``[start_s, end_s)``.
        """
        if source_ids is None:
            source_ids = sorted({seg["source_id"] for seg in segments})
        index = {sid: i for i, sid in enumerate(source_ids)}
        centers = cfg.frame_centers_s(n_frames)
        rows = np.zeros((len(source_ids), n_frames), dtype=bool)
        for seg in segments:
            sid = seg["source_id"]
            if sid not in index:
                raise KeyError(f"unknown source_id {sid!r}")
            start, end = float(seg["start_s"]), float(seg["end_s"])
            if end < start:
                raise ValueError(f"segment for {sid!r} ends before it starts")
            rows[index[sid]] |= (centers >= start) & (centers < end)
        return cls.from_speakers(rows, tuple(source_ids))

    @property
    def n_classes(self) -> int:
        return self.active.shape[0]

    @property
    def n_frames(self) -> int:
        return self.active.shape[1]

    def index_of(self, source_id: str) -> int:
        if source_id == NOISE_ID:
            return self.n_classes - 1
        return self.source_ids.index(source_id)


def load_activity_json(path, n_frames: int, cfg: StftConfig = StftConfig(), source_ids=None) -> ActivityGrid:
    segments = json.loads(Path(path).read_text())
    return ActivityGrid.from_segments(segments, n_frames, cfg, source_ids)


@dataclass
class CacgmmState:
    """Per-frequency mixture parameters.

    Shapes:
        weights: (K, F), each column on the simplex.
        shape: (K, F, C, C) Hermitian positive definite, trace C.
    """

    weights: np.ndarray
    shape: np.ndarray

    def copy(self) -> "CacgmmState":
        return CacgmmState(self.weights.copy(), self.shape.copy())


def normalize_observations(obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map a (C, T, F) stack to unit-norm spatial vectors of shape (F, T, C).

    Each channel is first divided by its RMS over time in every bin, so a
    constant per-channel gain has no effect on the result.

    Returns:
        Unit vectors and a (F, T) boolean mask of frames with usable energy.
    """
    y = np.transpose(obs, (2, 1, 0))
    power = np.sqrt(np.mean(np.abs(y) ** 2, axis=1, keepdims=True))
    y = y / np.where(power > _TINY, power, 1.0)
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    valid = norm[..., 0] > 1e-10
    return y / np.where(valid[..., None], norm, 1.0), valid


def _log_density(z, state):
    """Log cACG density up to the class-independent constant.

    Returns:
        log_pdf (K, F, T) and the quadratic forms z^H B^-1 z of the same shape.
    """
    n_ch = z.shape[-1]
    inv = np.linalg.inv(state.shape)
    _, logdet = np.linalg.slogdet(state.shape)
    quad = np.einsum("ftc,kfcd,ftd->kft", z.conj(), inv, z, optimize=True).real
    quad = np.maximum(quad, _TINY)
    return -logdet[..., None] - n_ch * np.log(quad), quad


def _e_step(z, valid, log_prior_act, state):
    log_pdf, quad = _log_density(z, state)
    with np.errstate(divide="ignore"):
        log_w = np.log(state.weights)[..., None]
    joint = log_w + log_pdf + log_prior_act[:, None, :]
    post = np.exp(joint - logsumexp(joint, axis=0, keepdims=True))
    post = np.nan_to_num(post)
    # frames without energy carry no spatial information
    fallback = np.exp(log_prior_act - logsumexp(log_prior_act, axis=0, keepdims=True))
    post = np.where(valid[None], post, fallback[:, None, :])
    return post, quad


def _m_step(z, valid, post, quad, state, shrinkage=DEFAULT_SHRINKAGE):
    """One MM update of weights and shape matrices.

    The shape update maximizes a minorizer of the log-likelihood plus the
    log-prior ``-nu * (tr B + tr B^-1)`` with ``nu = shrinkage * n_valid``.
    The prior pins the otherwise free scale of B near the identity and
    bounds its eigenvalues on both sides, so a class whose weighted data
    spans few directions cannot collapse. Stationarity of the minorizer
    gives ``nu B^2 + m B = A + nu I`` with scatter ``A`` and class mass
    ``m``, solved in the eigenbasis of the right-hand side. The penalized
    likelihood never decreases.
    """
    n_ch = z.shape[-1]
    post = post * valid[None]
    mass = post.sum(axis=-1)
    weights = mass / np.maximum(mass.sum(axis=0, keepdims=True), _TINY)

    nu = shrinkage * np.maximum(valid.sum(axis=-1), 1)[None, :, None]
    scaled = post / quad
    rhs = n_ch * np.einsum("kft,ftc,ftd->kfcd", scaled, z, z.conj(), optimize=True)
    rhs = 0.5 * (rhs + np.swapaxes(rhs.conj(), -1, -2)) + nu[..., None] * np.eye(n_ch)
    mu, vec = np.linalg.eigh(rhs)
    m = mass[..., None]
    b = 2.0 * mu / (m + np.sqrt(m**2 + 4.0 * nu * mu))
    cov = np.einsum("kfcd,kfd,kfed->kfce", vec, b, vec.conj(), optimize=True)
    return CacgmmState(weights, cov)


def penalized_log_likelihood(obs, activities, state, shrinkage=DEFAULT_SHRINKAGE) -> np.ndarray:
    """Per-frequency objective that :func:`run_em` increases monotonically.

    Observed-data log-likelihood of the activity-gated mixture (including
    the density normalizer) plus the shape-matrix log-prior.
    """
    z, valid = normalize_observations(obs)
    n_ch = z.shape[-1]
    log_pdf, _ = _log_density(z, state)
    log_pdf = log_pdf + lgamma(n_ch) - log(2) - n_ch * log(pi)
    with np.errstate(divide="ignore"):
        joint = np.log(state.weights)[..., None] + log_pdf + np.log(activities.active.astype(float))[:, None, :]
    data = np.where(valid, logsumexp(joint, axis=0), 0.0).sum(axis=-1)
    nu = shrinkage * np.maximum(valid.sum(axis=-1), 1)
    traces = np.einsum("kfcc->kf", state.shape + np.linalg.inv(state.shape)).real
    return data - nu * traces.sum(axis=0)


def init_state(n_classes: int, n_bins: int, n_ch: int, activity: np.ndarray, seed: int = 0, jitter: float = 1e-3):
    """Identity shape matrices with a small seeded per-class perturbation.

    The perturbation lies along the all-ones matrix, so it separates the
    classes while staying invariant to microphone permutations.
    """
    rng = np.random.default_rng(seed)
    delta = jitter * rng.uniform(0.5, 1.0, size=(n_classes, 1, 1, 1))
    shape = np.eye(n_ch) + delta * np.ones((n_ch, n_ch)) / n_ch
    shape = np.broadcast_to(shape, (n_classes, n_bins, n_ch, n_ch))
    shape = n_ch * shape / np.einsum("kfcc->kf", shape)[..., None, None]
    weights = np.repeat(activity.any(axis=1, keepdims=True).astype(float), n_bins, axis=1)
    weights /= weights.sum(axis=0, keepdims=True)
    return CacgmmState(weights, shape.astype(complex))


def run_em(
    obs: np.ndarray,
    activities: ActivityGrid,
    iterations: int = 20,
    seed: int = 0,
    on_iteration: Callable[[int, CacgmmState], None] | None = None,
    shrinkage: float = DEFAULT_SHRINKAGE,
) -> np.ndarray:
    """Estimate (K, T, F) class posteriors for a (C, T, F) observation stack.

    Args:
        obs: multichannel STFT.
        activities: class activity with one row per speaker plus noise.
        iterations: number of EM iterations.
        seed: seed for the shape-matrix initialization.
        on_iteration: called with ``(i, state)`` after every M-step.
        shrinkage: prior strength per valid frame; keeps the shape matrices
            of rarely active classes well conditioned.

    Returns:
        Posterior masks; they sum to one over classes and are exactly zero
        wherever a class is inactive.
    """
    obs = np.asarray(obs)
    if obs.ndim != 3:
        raise ShapeError(f"expected (C, T, F) observations, got {obs.shape}")
    n_ch, n_frames, n_bins = obs.shape
    if n_ch < 2:
        raise NeedMultichannel("cACGMM needs at least two channels")
    if activities.n_frames != n_frames:
        raise ShapeError(f"activity has {activities.n_frames} frames, observation has {n_frames}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")

    z, valid = normalize_observations(obs)
    with np.errstate(divide="ignore"):
        log_act = np.log(activities.active.astype(float))
    state = init_state(activities.n_classes, n_bins, n_ch, activities.active, seed)
    for i in range(iterations):
        post, quad = _e_step(z, valid, log_act, state)
        state = _m_step(z, valid, post, quad, state, shrinkage)
        if on_iteration is not None:
            on_iteration(i, state.copy())
    post, _ = _e_step(z, valid, log_act, state)
    post = post * activities.active[:, None, :]
    return np.transpose(post, (0, 2, 1))


def spatial_covariance(obs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mask-weighted (F, C, C) covariance of a (C, T, F) stack."""
    weighted = np.einsum("tf,ctf,dtf->fcd", mask, obs, obs.conj(), optimize=True)
    norm = np.maximum(mask.sum(axis=0), _TINY)
    return weighted / norm[:, None, None]


def mvdr_beamform(
    obs: np.ndarray,
    target_mask: np.ndarray,
    distortion_mask: np.ndarray,
    ref_channel: int = 0,
    loading: float = 1e-6,
) -> np.ndarray:
    """Souden MVDR beamformer driven by time-frequency masks.

    Args:
        obs: (C, T, F) observation.
        target_mask, distortion_mask: (T, F) masks in [0, 1].
        ref_channel: channel whose target image is reconstructed.

    Returns:
        (T, F) single-channel estimate.
    """
    obs = np.asarray(obs)
    if obs.ndim != 3 or target_mask.shape != obs.shape[1:] or distortion_mask.shape != obs.shape[1:]:
        raise ShapeError("masks must match the (T, F) geometry of the observation")
    n_ch = obs.shape[0]
    if n_ch == 1:
        return target_mask * obs[0]

    phi_x = spatial_covariance(obs, target_mask)
    phi_n = spatial_covariance(obs, distortion_mask)
    trace_n = np.einsum("fcc->f", phi_n).real
    phi_n = phi_n + loading * trace_n[:, None, None] * np.eye(n_ch)
    cond = np.linalg.cond(phi_n)
    singular = (trace_n <= _TINY) | ~np.isfinite(cond) | (cond > 1e12)
    if singular.any():
        warnings.warn(
            BeamformerSingular(f"{int(singular.sum())} bin(s) passed through on channel {ref_channel}"),
            stacklevel=2,
        )
        phi_n = np.where(singular[:, None, None], np.eye(n_ch), phi_n)

    numerator = np.linalg.solve(phi_n, phi_x)
    lam = np.einsum("fcc->f", numerator)
    scale = np.where(np.abs(lam) > _TINY * max(1.0, np.abs(lam).max()), lam, np.inf)
    w = numerator[:, :, ref_channel] / scale[:, None]
    out = np.einsum("fc,ctf->tf", w.conj(), obs)
    return np.where(singular[None, :], obs[ref_channel], out)


@dataclass(frozen=True)
class GssConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    iterations: int = 20
    ref_channel: int = 0
    seed: int = 0
    shrinkage: float = DEFAULT_SHRINKAGE

    def with_ref(self, ref_channel: int) -> "GssConfig":
        return replace(self, ref_channel=ref_channel)


def gss_masks(wave: MultiChannelWave, activities: ActivityGrid, cfg: GssConfig = GssConfig()):
    obs = stft(wave.samples, cfg.stft)
    return obs, run_em(obs, activities, cfg.iterations, cfg.seed, shrinkage=cfg.shrinkage)


def gss_extract(
    wave: MultiChannelWave,
    activities: ActivityGrid,
    cfg: GssConfig = GssConfig(),
    target: int | str = 0,
) -> np.ndarray:
    """Extract one speaker: STFT, guided cACGMM, MVDR and inverse STFT.

    ``target`` is a class index or a source id from ``activities``. All other
    speakers plus the noise class form the distortion mask.
    """
    k = activities.index_of(target) if isinstance(target, str) else int(target)
    if not 0 <= k < activities.n_classes - 1:
        raise ValueError(f"target class {target!r} is not a speaker")
    obs, masks = gss_masks(wave, activities, cfg)
    target_mask = masks[k]
    distortion = masks.sum(axis=0) - target_mask
    enhanced = mvdr_beamform(obs, target_mask, distortion, cfg.ref_channel)
    return istft(enhanced, cfg.stft, length=wave.length)
