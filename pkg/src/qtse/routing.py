"""Audio-quality scoring and routing to one of three extraction strategies."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.ndimage import minimum_filter1d, uniform_filter1d

from .errors import InputTooShort, InvalidThreshold, ScorerUnavailable
from .signal import CANONICAL_RATE, MultiChannelWave, StftConfig, average_channels, stft

ANCHOR_SCORE = 1.5
DEFAULT_GAMMA = 0.3
GAMMA_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5)
FALLBACK_SCORE = 1.5
# mean/minimum ratio of the smoothed periodogram of stationary white noise
# under the tracker settings below (5-frame smoothing, 1 s window)
MINIMUM_BIAS = 5.1


class QualityClass(enum.IntEnum):
    """Ordered so that ``Low < Medium < High``."""

    Low = 0
    Medium = 1
    High = 2


class Strategy(str, enum.Enum):
    GssOnly = "GssOnly"
    GssFusionExtract = "GssFusionExtract"
    GssDrcnet = "GssDrcnet"


STRATEGY_FOR = {
    QualityClass.High: Strategy.GssOnly,
    QualityClass.Medium: Strategy.GssFusionExtract,
    QualityClass.Low: Strategy.GssDrcnet,
}


def classify(score: float, gamma: float = DEFAULT_GAMMA) -> QualityClass:
    """Partition scores around 1.5 with half-width ``gamma``.

    Scores exactly on ``1.5 +/- gamma`` are Medium.
    """
    if not gamma >= 0:
        raise InvalidThreshold(f"gamma must be non-negative, got {gamma}")
    if not math.isfinite(score):
        raise ValueError(f"score must be finite, got {score}")
    if score > ANCHOR_SCORE + gamma:
        return QualityClass.High
    if score < ANCHOR_SCORE - gamma:
        return QualityClass.Low
    return QualityClass.Medium


@dataclass(frozen=True)
class RoutingDecision:
    score: float
    gamma: float
    quality: QualityClass
    strategy: Strategy
    scorer_id: str

    def __post_init__(self):
        if classify(self.score, self.gamma) != self.quality:
            raise ValueError(f"class {self.quality.name} inconsistent with score {self.score}, gamma {self.gamma}")
        if STRATEGY_FOR[self.quality] != self.strategy:
            raise ValueError(f"strategy {self.strategy} does not belong to class {self.quality.name}")

    @classmethod
    def make(cls, score: float, gamma: float, scorer_id: str) -> "RoutingDecision":
        quality = classify(score, gamma)
        return cls(float(score), float(gamma), quality, STRATEGY_FOR[quality], scorer_id)

    def to_dict(self) -> dict:
        return {"score": self.score, "gamma": self.gamma, "class": self.quality.name,
                "strategy": self.strategy.value, "scorer_id": self.scorer_id}


def snr_to_score(snr_db: float) -> float:
    return float(np.clip(1.0 + 4.0 * (snr_db + 5.0) / 30.0, 1.0, 5.0))


def estimate_quality(wave: np.ndarray, sample_rate: int = CANONICAL_RATE, cfg: StftConfig = StftConfig(),
                     window_s: float = 1.0) -> float:
    """Non-intrusive quality proxy on a 1-5 scale.

    The noise floor of every frequency band is tracked as the minimum of the
    smoothed power over a sliding window, then scaled by the bias of the
    minimum for stationary noise. Frame SNRs are clipped to
    [-10, 35] dB, averaged, and mapped linearly so that -5 dB gives 1 and
    25 dB gives 5.
    """
    wave = np.asarray(wave, dtype=float)
    if wave.ndim != 1:
        raise ValueError("expected a mono wave")
    if len(wave) < sample_rate:
        raise InputTooShort(f"need at least 1 s of audio, got {len(wave) / sample_rate:.3f} s")
    power = np.abs(stft(wave, cfg)) ** 2
    smooth = uniform_filter1d(power, size=5, axis=0, mode="nearest")
    win = max(int(window_s * 1000 / cfg.hop_ms), 1)
    floor = MINIMUM_BIAS * np.maximum(minimum_filter1d(smooth, size=win, axis=0, mode="nearest"), 0.0)
    noise = floor.sum(axis=1) + 1e-12
    signal = np.maximum(power.sum(axis=1) - noise, 0.0)
    snr = np.clip(10 * np.log10(signal / noise + 1e-12), -10.0, 35.0)
    return snr_to_score(float(np.mean(snr)))


class QualityScorer(Protocol):
    scorer_id: str

    def __call__(self, wave: np.ndarray, sample_rate: int, utterance_id: str | None = None) -> float: ...


class HeuristicScorer:
    """SNR-proxy scorer; stateless, so safe to share across workers."""

    scorer_id = "heuristic"

    def __call__(self, wave, sample_rate, utterance_id=None):
        try:
            return estimate_quality(wave, sample_rate)
        except InputTooShort as exc:
            raise ScorerUnavailable(str(exc)) from exc


class SidecarScorer:
    """Looks up externally computed scores in a ``{utterance_id: score}`` JSON file."""

    scorer_id = "sidecar"

    def __init__(self, scores: dict[str, float] | str | Path):
        if not isinstance(scores, dict):
            scores = json.loads(Path(scores).read_text())
        self.scores = {str(k): float(v) for k, v in scores.items()}

    def __call__(self, wave, sample_rate, utterance_id=None):
        if utterance_id is None or utterance_id not in self.scores:
            raise ScorerUnavailable(f"no sidecar score for utterance {utterance_id!r}")
        return self.scores[utterance_id]


def make_scorer(kind: str, sidecar_path=None) -> QualityScorer:
    if kind == "heuristic":
        return HeuristicScorer()
    if kind == "sidecar":
        if sidecar_path is None:
            raise ValueError("the sidecar scorer needs a scores file")
        return SidecarScorer(sidecar_path)
    raise ValueError(f"unknown scorer {kind!r}")


def route(wave: MultiChannelWave, scorer: QualityScorer, gamma: float = DEFAULT_GAMMA,
          utterance_id: str | None = None) -> RoutingDecision:
    """Score the plain channel average and map the class to its strategy.

    Raises:
        ScorerUnavailable: if the scorer fails or returns a non-finite value.
        InvalidThreshold: if gamma lies outside [0, 4].
    """
    if not 0 <= gamma <= 4:
        raise InvalidThreshold(f"gamma must lie in [0, 4], got {gamma}")
    try:
        score = float(scorer(average_channels(wave), wave.sample_rate, utterance_id))
    except ScorerUnavailable:
        raise
    except Exception as exc:
        raise ScorerUnavailable(f"{getattr(scorer, 'scorer_id', scorer)} failed: {exc}") from exc
    if not math.isfinite(score):
        raise ScorerUnavailable(f"scorer returned {score}")
    return RoutingDecision.make(float(np.clip(score, 1.0, 5.0)), gamma, scorer.scorer_id)


def fallback_decision(gamma: float = DEFAULT_GAMMA) -> RoutingDecision:
    """Medium-quality decision used when no score can be obtained."""
    return RoutingDecision.make(FALLBACK_SCORE, gamma, "fallback")
