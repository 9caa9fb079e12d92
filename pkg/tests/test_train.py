"""Tests for the training loops and dataset plumbing."""

import json

import numpy as np
import pytest

from qtse.drcnet import DrcNetLite, DrcNetSpec
from qtse.errors import NoData
from qtse.fusion import FdLayerSpec, FdNet
from qtse.nn import Model, ModelParams
from qtse.signal import write_wav
from qtse.simulate import MixSpec, Room, synth_speech
from qtse.train import (
    DrcExample,
    FusionExample,
    TrainConfig,
    build_examples,
    drcnet_loss,
    fit,
    fusion_loss,
    load_manifest,
    overfit,
    simulate_utterance,
    train_drcnet,
    train_fusion,
    utterance_from_entry,
    write_history,
)


def fusion_example(seed, n_bins=17, n_frames=6):
    rng = np.random.default_rng(seed)
    avg = np.abs(rng.standard_normal((n_frames, n_bins)))
    return FusionExample(np.abs(rng.standard_normal((8, n_frames, n_bins))), avg, 0.7 * avg)


def drc_example(seed, n_bins=17, n_frames=6):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((n_frames, n_bins)) + 1j * rng.standard_normal((n_frames, n_bins))
    return DrcExample(y, 0.5 * y)


class Frozen(Model):
    """A model whose loss never moves, to exercise the schedule."""

    def arch(self):
        return {"name": "frozen"}

    def _init_tensors(self, rng):
        return {"w": np.zeros(1)}

    def forward(self, params, x):
        return x, None

    def backward(self, params, cache, g):
        return {"w": np.zeros(1)}


class TestConfig:
    @pytest.mark.parametrize("kw", [{"lr": 0}, {"lr_halving_patience_epochs": 0}, {"batch": 0}, {"max_epochs": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestLosses:
    def test_fusion_loss_zero_when_mask_hits_target(self):
        ex = fusion_example(0)
        loss, grad = fusion_loss(ex)(np.full_like(ex.avg_mag, 0.7))
        assert loss == pytest.approx(0.0, abs=1e-28) and np.allclose(grad, 0)

    def test_drcnet_loss_zero_at_exact_mask(self):
        ex = drc_example(0)
        loss, _ = drcnet_loss(ex)(np.full(ex.noisy_spec.shape, 0.5 + 0j))
        assert loss == 0.0


class TestFit:
    def test_first_loss_is_half_mask_baseline(self):
        ex = fusion_example(1)
        _, losses = overfit(FdNet(FdLayerSpec(n_bins=17, width=4)), ex, fusion_loss, steps=1)
        assert losses[0] == pytest.approx(np.mean((0.5 * ex.avg_mag - ex.target_mag) ** 2), rel=1e-12)

    def test_deterministic(self):
        data = [fusion_example(i) for i in range(3)]
        cfg = TrainConfig(max_epochs=2, batch=2, seed=4)
        a, ha = train_fusion(data, cfg, spec=FdLayerSpec(n_bins=17, width=4))
        b, hb = train_fusion(data, cfg, spec=FdLayerSpec(n_bins=17, width=4))
        assert ha == hb
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_loss_decreases(self):
        data = [drc_example(i) for i in range(2)]
        spec = DrcNetSpec(n_bins=17, channels=(2, 4, 4, 8), rnn_hidden=8)
        _, hist = train_drcnet(data, TrainConfig(max_epochs=15, lr=3e-3), spec=spec)
        assert hist[-1]["val_loss"] < hist[0]["val_loss"]

    def test_lr_halves_after_three_flat_epochs(self):
        _, hist = fit(Frozen(), [drc_example(0)], lambda ex: (lambda out: (1.0, np.zeros_like(out))), TrainConfig(max_epochs=9))
        assert [r["lr"] for r in hist] == [1e-3] * 4 + [5e-4] * 3 + [2.5e-4] * 2

    def test_empty(self):
        with pytest.raises(NoData):
            train_fusion([])
        with pytest.raises(NoData):
            train_drcnet([])
        with pytest.raises(NoData):
            fit(Frozen(), [], None, TrainConfig())

    def test_history_csv(self, tmp_path):
        _, hist = train_fusion([fusion_example(0)], TrainConfig(max_epochs=2), spec=FdLayerSpec(n_bins=17, width=4))
        text = write_history(hist, tmp_path / "h.csv").read_text().splitlines()
        assert text[0] == "epoch,train_loss,val_loss,lr" and len(text) == 3

    def test_resulting_params_carry_arch(self):
        params, _ = train_fusion([fusion_example(0)], TrainConfig(max_epochs=1), spec=FdLayerSpec(n_bins=17, width=4))
        assert isinstance(params, ModelParams) and params.arch["width"] == 4

    def test_overfit_reports_every_step(self):
        model = DrcNetLite(DrcNetSpec(n_bins=17, channels=(2, 4, 4, 8), rnn_hidden=8))
        _, losses = overfit(model, drc_example(2), drcnet_loss, steps=5)
        assert len(losses) == 6


class TestDatasets:
    def test_simulated_utterance(self):
        utt = simulate_utterance(MixSpec(5.0, n_interferers=1, room=Room(rt60_s=0.2), seed=3), 1.0)
        assert utt.wave.channels == 6 and utt.wave.length == 16000
        assert utt.activities.source_ids == ("target", "int0")
        assert utt.reference().shape == (16000,)
        np.testing.assert_allclose(utt.reference(2), utt.mixture.direct_image[2])

    def test_build_examples_shapes(self):
        utt = simulate_utterance(MixSpec(0.0, seed=1), 1.0)
        fusion, drc = build_examples(utt)
        assert fusion.features.shape == (8, 101, 257)
        assert drc.noisy_spec.shape == drc.clean_spec.shape == (101, 257)

    def test_manifest_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        write_wav(tmp_path / "c.wav", synth_speech(1.0, rng))
        write_wav(tmp_path / "n.wav", 0.1 * rng.standard_normal(16000))
        write_wav(tmp_path / "i.wav", synth_speech(1.0, rng))
        entry = {"clean": "c.wav", "noise": "n.wav", "interferers": ["i.wav"], "mix": MixSpec(3.0, seed=2).to_dict()}
        (tmp_path / "m.jsonl").write_text(json.dumps(entry) + "\n\n")
        entries = load_manifest(tmp_path / "m.jsonl")
        utt = utterance_from_entry(entries[0], tmp_path)
        assert len(entries) == 1 and utt.wave.channels == 6

    def test_manifest_missing_keys(self, tmp_path):
        (tmp_path / "m.jsonl").write_text(json.dumps({"clean": "x.wav"}) + "\n")
        with pytest.raises(ValueError):
            load_manifest(tmp_path / "m.jsonl")
