"""Stage-1 training for the fusion block and DRC-NET-lite, plus dataset plumbing."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .drcnet import DrcNetLite, DrcNetSpec, crm_loss
from .errors import NoData
from .fusion import FdLayerSpec, FdNet, FusionInput, assemble_channels
from .gss import ActivityGrid, GssConfig, gss_extract
from .nn.model import Model
from .nn.optim import AdamState, PlateauHalving, adam_step
from .nn.params import ModelParams
from .signal import MultiChannelWave, StftConfig, read_wav, stft
from .simulate import MixSpec, Mixture, _fit_length, mix_dynamic, oracle_segments, random_mixspec, synth_speech


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_halving_patience_epochs: int = 3
    batch: int = 1
    max_epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_halving_patience_epochs < 1:
            raise ValueError("patience must be >= 1")
        if self.batch < 1 or self.max_epochs < 1:
            raise ValueError("batch and max_epochs must be >= 1")


@dataclass
class FusionExample:
    """Precomputed features for one fusion training pair."""

    features: np.ndarray  # (8, T, F) normalized magnitudes
    avg_mag: np.ndarray  # (T, F) magnitude of the averaged far-field
    target_mag: np.ndarray  # (T, F) magnitude of the clean reference

    @classmethod
    def from_input(cls, inp: FusionInput, clean_ref: np.ndarray) -> "FusionExample":
        features, _ = assemble_channels(inp)
        return cls(features, np.abs(stft(inp.averaged, inp.stft)), np.abs(stft(clean_ref, inp.stft)))


@dataclass
class DrcExample:
    noisy_spec: np.ndarray  # (T, F) complex GSS output spectrum
    clean_spec: np.ndarray  # (T, F) complex clean reference spectrum

    @classmethod
    def from_waves(cls, gss_wave, clean_ref, cfg: StftConfig = StftConfig()) -> "DrcExample":
        return cls(stft(gss_wave, cfg), stft(clean_ref, cfg))


def fusion_loss(ex: FusionExample) -> Callable:
    """Magnitude-domain MSE of the masked average against the clean magnitude."""

    def fn(mask):
        err = mask * ex.avg_mag - ex.target_mag
        return float(np.mean(err**2)), 2.0 * err * ex.avg_mag / err.size

    return fn


def drcnet_loss(ex: DrcExample, alpha: float = 0.5) -> Callable:
    return crm_loss(ex.noisy_spec, ex.clean_spec, alpha)


def _inputs(ex):
    return ex.features if isinstance(ex, FusionExample) else ex.noisy_spec


def _mean_loss(model, tensors, examples, make_loss) -> float:
    return float(np.mean([make_loss(ex)(model.forward(tensors, _inputs(ex))[0])[0] for ex in examples]))


def fit(model: Model, train_set: Sequence, make_loss: Callable, cfg: TrainConfig,
        val_set: Sequence | None = None, params: ModelParams | None = None,
        on_epoch: Callable | None = None) -> tuple[ModelParams, list[dict]]:
    """Generic Adam loop with plateau halving.

    One epoch is one pass over ``train_set`` in shuffled mini-batches; the
    gradient of a batch is the mean of its per-example gradients. With no
    ``val_set`` the training set doubles as validation.

    Returns:
        Final parameters and per-epoch history rows
        ``{"epoch", "train_loss", "val_loss", "lr"}``; ``lr`` is the rate
        used during that epoch.
    """
    train_set = list(train_set)
    if not train_set:
        raise NoData("training set is empty")
    val_set = list(val_set) if val_set else train_set
    rng = np.random.default_rng(cfg.seed)
    params = params or model.init(cfg.seed)
    tensors = dict(params.tensors)
    state = AdamState()
    sched = PlateauHalving(cfg.lr, cfg.lr_halving_patience_epochs)
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch):
            batch = [train_set[i] for i in order[start : start + cfg.batch]]
            total = {}
            for ex in batch:
                loss, grads = model.value_and_grad(tensors, _inputs(ex), make_loss(ex))
                losses.append(loss)
                for k, g in grads.items():
                    total[k] = total.get(k, 0.0) + g / len(batch)
            tensors, state = adam_step(tensors, total, state, lr)
        val = _mean_loss(model, tensors, val_set, make_loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val, "lr": lr}
        history.append(row)
        if on_epoch:
            on_epoch(row)
        sched.step(val)
    return ModelParams(tensors, params.seed, model.arch()), history


def overfit(model: Model, example, make_loss: Callable, steps: int = 500, lr: float = 1e-3,
            seed: int = 0) -> tuple[ModelParams, list[float]]:
    """Plain Adam at a constant rate on one example; returns the loss before every step."""
    params = model.init(seed)
    tensors, state, losses = dict(params.tensors), AdamState(), []
    loss_fn = make_loss(example)
    for _ in range(steps):
        loss, grads = model.value_and_grad(tensors, _inputs(example), loss_fn)
        losses.append(loss)
        tensors, state = adam_step(tensors, grads, state, lr)
    losses.append(model.value_and_grad(tensors, _inputs(example), loss_fn)[0])
    return ModelParams(tensors, seed, model.arch()), losses


def train_fusion(dataset: Sequence[FusionExample], cfg: TrainConfig = TrainConfig(), val_set=None,
                 spec: FdLayerSpec | None = None, **kw) -> tuple[ModelParams, list[dict]]:
    if not dataset:
        raise NoData("fusion dataset is empty")
    spec = spec or FdLayerSpec(n_bins=dataset[0].features.shape[2])
    return fit(FdNet(spec), dataset, fusion_loss, cfg, val_set, **kw)


def train_drcnet(dataset: Sequence[DrcExample], cfg: TrainConfig = TrainConfig(), val_set=None,
                 spec: DrcNetSpec | None = None, alpha: float = 0.5, **kw) -> tuple[ModelParams, list[dict]]:
    if not dataset:
        raise NoData("DRC-NET dataset is empty")
    spec = spec or DrcNetSpec(n_bins=dataset[0].noisy_spec.shape[1])
    return fit(DrcNetLite(spec), dataset, lambda ex: drcnet_loss(ex, alpha), cfg, val_set, **kw)


def write_history(history: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "lr"])
        writer.writeheader()
        writer.writerows(history)
    return path


# --- dataset plumbing -------------------------------------------------------


@dataclass
class SimulatedUtterance:
    """A simulated 6-channel scene with the dry sources needed for guidance."""

    mixture: Mixture
    interferers: list[np.ndarray]
    activities: ActivityGrid
    spec: MixSpec

    @property
    def wave(self) -> MultiChannelWave:
        return self.mixture.mixture

    @property
    def clean(self) -> np.ndarray:
        return self.mixture.clean_ref

    def reference(self, channel: int | None = None) -> np.ndarray:
        """Direct-path target at one microphone, or averaged over the array."""
        img = self.mixture.direct_image
        return img.mean(axis=0) if channel is None else img[channel]


def activities_for(clean: np.ndarray, interferers: Sequence[np.ndarray], cfg: StftConfig = StftConfig(),
                   sample_rate: int = 16000) -> ActivityGrid:
    """Oracle activity grid with the target first and each interferer after it."""
    n = len(clean)
    sources = {"target": clean}
    for i, src in enumerate(interferers):
        sources[f"int{i}"] = _fit_length(np.asarray(src, dtype=float), n)
    segments = oracle_segments(sources, sample_rate, cfg)
    return ActivityGrid.from_segments(segments, cfg.num_frames(n), cfg, tuple(sources))


def simulate_utterance(spec: MixSpec, duration_s: float = 2.0, cfg: StftConfig = StftConfig(),
                       noise: np.ndarray | None = None) -> SimulatedUtterance:
    """Synthetic speech-like target, white noise and interferers mixed per ``spec``.

    The target talks through the whole utterance while each interferer is
    confined to a random sub-span, so the guided separation has frames to
    tell them apart.
    """
    rng = np.random.default_rng(spec.seed)
    sr = cfg.sample_rate
    clean = synth_speech(duration_s, rng, sr)
    n = len(clean)
    if noise is None:
        noise = rng.standard_normal(n)
    interferers = []
    for _ in range(spec.n_interferers):
        a = rng.uniform(0.0, 0.4)
        interferers.append(synth_speech(duration_s, rng, sr, span=(a, a + rng.uniform(0.35, 0.6))))
    mixture = mix_dynamic(clean, noise, interferers, spec, sr)
    # mix_dynamic rescales interferers; activity only needs their dry support
    acts = activities_for(clean, interferers, cfg, sr)
    return SimulatedUtterance(mixture, interferers, acts, spec)


def gss_output(utt: SimulatedUtterance, cfg: GssConfig = GssConfig()) -> np.ndarray:
    return gss_extract(utt.wave, utt.activities, cfg, target="target")


def build_examples(utt: SimulatedUtterance, cfg: GssConfig = GssConfig()) -> tuple[FusionExample, DrcExample]:
    """Both training pairs for one simulated utterance (GSS runs once).

    The fusion mask acts on the array average, so its target is the
    array-averaged direct-path image; the GSS output is referenced to
    ``cfg.ref_channel``, so the DRC-NET target is that microphone's image.
    """
    gss = gss_output(utt, cfg)
    fusion = FusionExample.from_input(FusionInput(utt.wave, gss, cfg.stft), utt.reference())
    return fusion, DrcExample.from_waves(gss, utt.reference(cfg.ref_channel), cfg.stft)


def simulate_dataset(n: int, seed: int = 0, duration_s: float = 2.0) -> list[SimulatedUtterance]:
    rng = np.random.default_rng(seed)
    return [simulate_utterance(random_mixspec(rng), duration_s) for _ in range(n)]


def load_manifest(path) -> list[dict]:
    """Read a JSON-lines dataset manifest, skipping blank lines.

    Each entry holds ``clean``, ``noise`` and ``interferers`` wav paths and a
    ``mix`` object with :class:`MixSpec` fields. Relative paths resolve
    against the manifest's directory.
    """
    path = Path(path)
    entries = []
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        entry = json.loads(line)
        missing = {"clean", "noise", "mix"} - entry.keys()
        if missing:
            raise ValueError(f"{path}:{line_no}: missing keys {sorted(missing)}")
        entries.append(entry)
    return entries


def utterance_from_entry(entry: dict, base: Path, cfg: StftConfig = StftConfig()) -> SimulatedUtterance:
    def load(p):
        p = Path(p)
        wave = read_wav(p if p.is_absolute() else base / p, cfg.sample_rate)
        return wave.samples[0]

    clean = load(entry["clean"])
    noise = load(entry["noise"])
    interferers = [load(p) for p in entry.get("interferers", [])]
    spec = MixSpec.from_dict(entry["mix"])
    mixture = mix_dynamic(clean, noise, interferers, spec, cfg.sample_rate)
    used = interferers[: spec.n_interferers]
    return SimulatedUtterance(mixture, used, activities_for(clean, used, cfg, cfg.sample_rate), spec)
