"""Synthetic far-field data: speech-like sources, room responses, dynamic mixing."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .errors import CannotSetSnr, GeometryError
from .signal import CANONICAL_RATE, MultiChannelWave, StftConfig

SPEED_OF_SOUND = 343.0
SNR_RANGE_DB = (-10.0, 20.0)
RT60_RANGE_S = (0.1, 1.0)


@dataclass(frozen=True)
class Room:
    dims_m: tuple[float, float, float] = (6.0, 5.0, 3.0)
    rt60_s: float = 0.3

    def __post_init__(self):
        if len(self.dims_m) != 3 or min(self.dims_m) <= 0:
            raise GeometryError(f"room dimensions must be 3 positive lengths, got {self.dims_m}")
        if not RT60_RANGE_S[0] <= self.rt60_s <= RT60_RANGE_S[1]:
            raise ValueError(f"rt60 {self.rt60_s} outside {RT60_RANGE_S}")

    @property
    def volume(self) -> float:
        return float(np.prod(self.dims_m))

    def contains(self, pos) -> bool:
        pos = np.asarray(pos, dtype=float)
        return bool(np.all(pos >= 0) and np.all(pos <= np.asarray(self.dims_m)))


@dataclass(frozen=True)
class MixSpec:
    snr_db: float
    n_interferers: int = 1
    room: Room = field(default_factory=Room)
    mic_count: int = 6
    seed: int = 0

    def __post_init__(self):
        lo, hi = SNR_RANGE_DB
        if not lo <= self.snr_db <= hi:
            raise ValueError(f"snr_db {self.snr_db} outside [{lo}, {hi}]")
        if self.n_interferers < 0:
            raise ValueError("n_interferers must be >= 0")
        if self.mic_count != 6:
            raise ValueError("the far-field array has exactly 6 microphones")

    @classmethod
    def from_dict(cls, d: dict) -> "MixSpec":
        d = dict(d)
        room = d.pop("room", {})
        if isinstance(room, dict):
            room = Room(tuple(room.get("dims_m", Room.dims_m)), room.get("rt60_s", Room.rt60_s))
        return cls(room=room, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["room"]["dims_m"] = list(self.room.dims_m)
        return d


def random_mixspec(rng: np.random.Generator, seed: int | None = None) -> MixSpec:
    """Draw a spec from the training distribution (1 or 2 interferers)."""
    dims = (rng.uniform(4, 8), rng.uniform(3.5, 6), rng.uniform(2.6, 3.5))
    return MixSpec(
        snr_db=float(rng.uniform(*SNR_RANGE_DB)),
        n_interferers=int(rng.integers(1, 3)),
        room=Room(tuple(float(d) for d in dims), float(rng.uniform(0.15, 0.6))),
        seed=int(rng.integers(2**31)) if seed is None else seed,
    )


def linear_array(center, n_mics: int = 6, spacing: float = 0.04) -> np.ndarray:
    offsets = (np.arange(n_mics) - (n_mics - 1) / 2) * spacing
    mics = np.tile(np.asarray(center, dtype=float), (n_mics, 1))
    mics[:, 0] += offsets
    return mics


def _fractional_delay(delay: float, amplitude: float, length: int, half_taps: int = 16) -> np.ndarray:
    h = np.zeros(length)
    center = int(np.floor(delay))
    idx = np.arange(center - half_taps + 1, center + half_taps + 1)
    keep = (idx >= 0) & (idx < length)
    frac = idx - delay
    taps = np.sinc(frac) * (0.5 + 0.5 * np.cos(np.pi * frac / half_taps))
    h[idx[keep]] += amplitude * taps[keep]
    return h


def direct_path_rir(source_pos, mic_positions, sample_rate: int = CANONICAL_RATE) -> np.ndarray:
    """Direct-path part of :func:`synth_rir` alone: delay and ``1 / r`` gain."""
    source_pos = np.asarray(source_pos, dtype=float)
    mic_positions = np.atleast_2d(np.asarray(mic_positions, dtype=float))
    dist = np.maximum(np.linalg.norm(mic_positions - source_pos, axis=1), 0.05)
    delays = dist / SPEED_OF_SOUND * sample_rate
    length = int(np.ceil(delays.max())) + 32
    return np.stack([_fractional_delay(d, 1.0 / r, length) for d, r in zip(delays, dist)])


def synth_rir(
    room: Room,
    source_pos,
    mic_positions,
    seed: int = 0,
    sample_rate: int = CANONICAL_RATE,
) -> np.ndarray:
    """Per-microphone impulse responses for one source.

    Each response is a fractionally delayed direct path with amplitude
    ``1 / r`` (unit gain at 1 m) followed by an exponentially decaying
    Gaussian tail. The tail energy follows the diffuse-field level
    ``1 / r_c**2`` with critical distance ``r_c = 0.057 * sqrt(V / rt60)``
    and decays 60 dB over ``rt60`` seconds.

    Returns:
        (M, L) array of impulse responses.
    """
    source_pos = np.asarray(source_pos, dtype=float)
    mic_positions = np.atleast_2d(np.asarray(mic_positions, dtype=float))
    for p in [source_pos, *mic_positions]:
        if not room.contains(p):
            raise GeometryError(f"position {p.tolist()} outside room {room.dims_m}")
    rng = np.random.default_rng(seed)

    dist = np.maximum(np.linalg.norm(mic_positions - source_pos, axis=1), 0.05)
    delays = dist / SPEED_OF_SOUND * sample_rate
    tail_len = int(np.ceil(room.rt60_s * sample_rate))
    length = int(np.ceil(delays.max())) + tail_len + 32

    crit = 0.057 * np.sqrt(room.volume / room.rt60_s)
    decay = 3 * np.log(10) / (room.rt60_s * sample_rate)
    rirs = np.zeros((len(mic_positions), length))
    for m, (d, r) in enumerate(zip(delays, dist)):
        rirs[m] = _fractional_delay(d, 1.0 / r, length)
        start = int(np.ceil(d)) + 16
        n = length - start
        env = np.exp(-decay * np.arange(n))
        tail = rng.standard_normal(n) * env
        # scale so the tail carries the diffuse-field energy
        tail *= np.sqrt(1.0 / crit**2 / np.sum(tail**2))
        rirs[m, start:] += tail
    return rirs


def synth_speech(duration_s: float, rng: np.random.Generator, sample_rate: int = CANONICAL_RATE,
                 span: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """Speech-like test signal: harmonic syllables with formants and pauses.

    Real corpora are out of scope, so tests and the simulator use these
    signals. They are sparse in time-frequency like speech, which is what the
    mask estimators rely on. Activity is confined to ``span`` (fractions of
    the duration).
    """
    n = int(round(duration_s * sample_rate))
    out = np.zeros(n)
    t = rng.uniform(0.0, 0.08)
    start, stop = span[0] * duration_s, span[1] * duration_s
    t = max(t, start)
    f0_base = rng.uniform(95, 230)
    while t < stop - 0.08:
        dur = min(rng.uniform(0.1, 0.3), stop - t)
        m = int(dur * sample_rate)
        tt = np.arange(m) / sample_rate
        f0 = f0_base * (1 + rng.uniform(-0.15, 0.15)) * (1 + rng.uniform(-0.1, 0.1) * tt / dur)
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate
        formants = rng.uniform([300, 900, 2200], [900, 2200, 3500])
        syllable = np.zeros(m)
        n_harm = int(4000 // f0_base)
        for h in range(1, n_harm + 1):
            fh = h * f0_base
            gain = sum(np.exp(-0.5 * ((fh - fc) / 150.0) ** 2) for fc in formants) + 0.05
            syllable += gain / np.sqrt(h) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        if rng.random() < 0.3:
            hiss = np.diff(rng.standard_normal(m + 1))
            syllable += 0.3 * hiss
        syllable *= np.hanning(m)
        i0 = int(t * sample_rate)
        out[i0 : i0 + m] += syllable[: n - i0]
        t += dur + rng.uniform(0.03, 0.15)
    peak = np.max(np.abs(out))
    return 0.3 * out / peak if peak > 0 else out


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) >= n:
        return x[:n]
    reps = int(np.ceil(n / len(x)))
    return np.tile(x, reps)[:n]


def scale_to_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """Return ``noise`` scaled so that 10 log10(E_clean / E_noise) == snr_db."""
    e_clean = float(np.dot(clean, clean))
    e_noise = float(np.dot(noise, noise))
    if e_clean <= 0 or e_noise <= 0:
        raise CannotSetSnr("clean and noise must both carry energy")
    return noise * np.sqrt(e_clean / (e_noise * 10 ** (snr_db / 10)))


@dataclass
class Mixture:
    mixture: MultiChannelWave
    clean_ref: np.ndarray
    direct_image: np.ndarray
    target_image: np.ndarray
    noise_image: np.ndarray
    interferer_images: np.ndarray
    scaled_noise: np.ndarray
    source_positions: np.ndarray
    noise_position: np.ndarray
    mic_positions: np.ndarray


def _place(room: Room, center, rng, r_lo, r_hi, avoid=()):
    dims = np.asarray(room.dims_m)
    for _ in range(200):
        r = rng.uniform(r_lo, r_hi)
        az = rng.uniform(0, np.pi)
        if any(abs(az - a) < np.deg2rad(30) for a in avoid):
            continue
        pos = np.asarray(center) + r * np.array([np.cos(az), np.sin(az), 0.0])
        pos[2] = rng.uniform(1.1, 1.5)
        if np.all(pos > 0.3) and np.all(pos < dims - 0.3):
            return pos, az
    raise GeometryError(f"cannot place a source {r_lo}-{r_hi} m from the array in {room.dims_m}")


def mix_dynamic(clean: np.ndarray, noise: np.ndarray, interferers, spec: MixSpec,
                sample_rate: int = CANONICAL_RATE) -> Mixture:
    """Simulate a 6-channel far-field recording of one target talker.

    Noise is scaled against the dry clean signal to exactly ``spec.snr_db``.
    The target, the noise (placed at the target's distance from the array)
    and every interferer (scaled to the target's energy) are reverberated
    from their own positions and summed.

    ``clean_ref`` is the dry target. ``direct_image`` is the same signal as
    it arrives at each microphone over the direct path only (delayed and
    attenuated, no reverberation), which is what the enhancement models are
    trained to recover.
    """
    clean = np.asarray(clean, dtype=float)
    n = len(clean)
    rng = np.random.default_rng(spec.seed)
    room = spec.room
    center = np.array([room.dims_m[0] / 2, min(1.0, room.dims_m[1] / 3), 0.8])
    mics = linear_array(center, spec.mic_count)

    noise = scale_to_snr(clean, _fit_length(np.asarray(noise, dtype=float), n), spec.snr_db)
    target_pos, az = _place(room, center, rng, 0.8, 1.2)
    rir = synth_rir(room, target_pos, mics, seed=int(rng.integers(2**31)), sample_rate=sample_rate)
    target_image = fftconvolve(clean[None], rir)[:, :n]
    direct_image = fftconvolve(clean[None], direct_path_rir(target_pos, mics, sample_rate))[:, :n]
    # the noise source sits at the target's distance but in its own direction
    r_target = float(np.linalg.norm((target_pos - center)[:2]))
    noise_pos, noise_az = _place(room, center, rng, r_target, r_target, [az])
    h_noise = synth_rir(room, noise_pos, mics, seed=int(rng.integers(2**31)), sample_rate=sample_rate)
    noise_image = fftconvolve(noise[None], h_noise)[:, :n]

    positions = [target_pos]
    avoid = [az, noise_az]
    images = []
    e_clean = np.dot(clean, clean)
    for src in list(interferers)[: spec.n_interferers]:
        src = _fit_length(np.asarray(src, dtype=float), n)
        e_src = np.dot(src, src)
        if e_src > 0:
            src = src * np.sqrt(e_clean / e_src)
        pos, a = _place(room, center, rng, 1.0, 2.0, avoid)
        avoid.append(a)
        positions.append(pos)
        h = synth_rir(room, pos, mics, seed=int(rng.integers(2**31)), sample_rate=sample_rate)
        images.append(fftconvolve(src[None], h)[:, :n])
    images = np.stack(images) if images else np.zeros((0, spec.mic_count, n))
    total = target_image + noise_image + images.sum(axis=0)
    return Mixture(
        mixture=MultiChannelWave(total, sample_rate),
        clean_ref=clean,
        direct_image=direct_image,
        target_image=target_image,
        noise_image=noise_image,
        interferer_images=images,
        scaled_noise=noise,
        source_positions=np.stack(positions),
        noise_position=noise_pos,
        mic_positions=mics,
    )


def oracle_segments(sources: dict, sample_rate: int = CANONICAL_RATE, cfg: StftConfig = StftConfig(),
                    threshold_db: float = -40.0) -> list[dict]:
    """Derive activity segments from dry source signals by frame energy."""
    hop = cfg.hop_length
    segments = []
    for sid, x in sources.items():
        n_frames = cfg.num_frames(len(x))
        padded = np.pad(x, (cfg.win_length // 2, cfg.win_length // 2))
        energy = np.array([np.mean(padded[t * hop : t * hop + cfg.win_length] ** 2) for t in range(n_frames)])
        ref = energy.max() if energy.max() > 0 else 1.0
        active = 10 * np.log10(energy / ref + 1e-30) > threshold_db
        edges = np.flatnonzero(np.diff(np.concatenate([[0], active.astype(int), [0]])))
        for a, b in zip(edges[::2], edges[1::2]):
            start = max(a * hop - hop / 2, 0) / sample_rate
            end = ((b - 1) * hop + hop / 2) / sample_rate
            segments.append({"source_id": sid, "start_s": round(start, 6), "end_s": round(end, 6)})
    return segments
