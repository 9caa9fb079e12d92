"""Tests for per-utterance routing, batch evaluation and reports."""

import json

import numpy as np
import pytest

from qtse.drcnet import DrcNetLite, DrcNetSpec
from qtse.errors import StrategyUnavailable
from qtse.fusion import FdLayerSpec, FdNet
from qtse.gss import gss_extract
from qtse.nn import save_checkpoint
from qtse.pipeline import (
    STAGES,
    BatchItem,
    ModelStore,
    PipelineConfig,
    load_batch_manifest,
    process_utterance,
    run_batch,
    sweep_gamma,
    validate_report,
)
from qtse.routing import SidecarScorer, Strategy
from qtse.signal import write_wav
from qtse.simulate import MixSpec, Room
from qtse.train import simulate_utterance

FAST_GSS = {"iterations": 3}


@pytest.fixture(scope="module")
def utterance():
    return simulate_utterance(MixSpec(5.0, n_interferers=1, room=Room(rt60_s=0.2), seed=11), 1.0)


@pytest.fixture(scope="module")
def models():
    fusion = FdNet(FdLayerSpec(width=4))
    drc = DrcNetLite(DrcNetSpec(channels=(2, 4, 4, 8), rnn_hidden=4))
    return {"fusion": (fusion, fusion.init(0)), "drcnet": (drc, drc.init(0))}


def config(**kw):
    return PipelineConfig.from_dict({"scorer": "sidecar", "gss": FAST_GSS, **kw})


def loaded_store(cfg, models):
    store = ModelStore(cfg)
    for kind, (model, params) in models.items():
        store.put(kind, model, params)
    return store


def run_one(utt, cfg, models, score, **kw):
    return process_utterance(utt.wave, utt.activities, cfg, "u", "target", utt.reference(0),
                             store=loaded_store(cfg, models), scorer=SidecarScorer({"u": score}), **kw)


class TestProcessUtterance:
    @pytest.mark.parametrize("score, strategy", [(2.0, Strategy.GssOnly), (1.4, Strategy.GssFusionExtract),
                                                 (1.15, Strategy.GssDrcnet)])
    def test_stages_follow_decision(self, utterance, models, score, strategy):
        out, report = run_one(utterance, config(), models, score)
        assert report.decision["strategy"] == strategy.value == report.executed_strategy
        assert report.stage_names == STAGES[strategy]
        assert out.shape == (utterance.wave.length,)
        validate_report(report.to_dict())

    def test_high_route_is_plain_gss(self, utterance, models):
        cfg = config()
        out, _ = run_one(utterance, cfg, models, 3.0)
        expected = gss_extract(utterance.wave, utterance.activities, cfg.gss, "target")
        assert np.array_equal(out, expected)

    def test_timings_recorded(self, utterance, models):
        _, report = run_one(utterance, config(), models, 1.5)
        assert {"score", "gss", "fusion"} <= set(report.timings_ms)
        assert all(s["ms"] >= 0 for s in report.stages)

    def test_metrics(self, utterance, models):
        _, report = run_one(utterance, config(), models, 2.0)
        assert report.metrics["si_sdr_db"] is not None and report.metrics["input_si_sdr_db"] is not None
        assert 1.0 <= report.metrics["proxy_quality_score"] <= 5.0

    def test_missing_checkpoint_falls_back_to_gss(self, utterance):
        cfg = config()
        _, report = process_utterance(utterance.wave, utterance.activities, cfg, "u", "target",
                                      scorer=SidecarScorer({"u": 1.0}))
        assert report.decision["strategy"] == "GssDrcnet"
        assert report.executed_strategy == "GssOnly" and report.stage_names == ("gss",)
        assert any("StrategyUnavailable" in w for w in report.warnings)

    def test_scorer_failure_routes_medium(self, utterance, models):
        cfg = config()
        _, report = process_utterance(utterance.wave, utterance.activities, cfg, "other", "target",
                                      store=loaded_store(cfg, models), scorer=SidecarScorer({}))
        assert report.decision["class"] == "Medium" and report.decision["scorer_id"] == "fallback"
        assert any("ScorerUnavailable" in w for w in report.warnings)

    def test_extractor_and_visual_forwarded(self, utterance, models):
        seen = {}

        def extractor(wave, sr, visual=None):
            seen["visual"] = visual
            return wave

        emb = np.zeros((4, 2))
        run_one(utterance, config(), models, 1.5, extractor=extractor, visual=emb)
        assert seen["visual"] is emb


class TestModelStore:
    def test_checkpoint_loaded_once(self, tmp_path, models):
        model, params = models["fusion"]
        path = save_checkpoint(params, tmp_path / "f.npz")
        store = ModelStore(config(fusion_checkpoint=str(path)))
        a = store.fusion()
        assert store.fusion() is a and a[0].arch() == model.arch()

    def test_wrong_kind_rejected(self, tmp_path, models):
        path = save_checkpoint(models["drcnet"][1], tmp_path / "d.npz")
        with pytest.raises(StrategyUnavailable):
            ModelStore(config(fusion_checkpoint=str(path))).fusion()


class TestBatch:
    def _items(self, utterance):
        return [BatchItem(uid, utterance.wave, utterance.activities, "target", utterance.reference(0))
                for uid in ("a", "b", "c")]

    def test_class_counts(self, utterance, models):
        cfg = config()
        result = run_batch(self._items(utterance), cfg, store=loaded_store(cfg, models),
                           scorer=SidecarScorer({"a": 1.0, "b": 1.5, "c": 2.0}))
        assert result.summary["class_counts"] == {"Low": 1, "Medium": 1, "High": 1}
        assert [r.utterance_id for r in result.reports] == ["a", "b", "c"]
        assert set(result.summary["mean_si_sdr_db"]) == {"GssOnly", "GssFusionExtract", "GssDrcnet"}

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("\n")
        result = run_batch(load_batch_manifest(tmp_path / "m.jsonl"), config())
        assert result.summary["n_utterances"] == 0 and result.summary["mean_output_si_sdr_db"] is None

    def test_bad_file_isolated(self, tmp_path, utterance, models):
        write_wav(tmp_path / "good.wav", utterance.wave)
        (tmp_path / "bad.wav").write_bytes(b"RIFF garbage")
        segments = [{"source_id": "target", "start_s": 0.0, "end_s": 1.0}]
        (tmp_path / "act.json").write_text(json.dumps(segments))
        lines = [{"id": "good", "wav": "good.wav", "activity": "act.json", "target": "target"},
                 {"id": "bad", "wav": "bad.wav", "activity": "act.json", "target": "target"}]
        (tmp_path / "m.jsonl").write_text("".join(json.dumps(x) + "\n" for x in lines))
        cfg = config(output_dir=str(tmp_path / "out"))
        result = run_batch(load_batch_manifest(tmp_path / "m.jsonl"), cfg, jobs=2,
                           store=loaded_store(cfg, models), scorer=SidecarScorer({"good": 2.0, "bad": 2.0}))
        by_id = {r.utterance_id: r for r in result.reports}
        assert by_id["bad"].error is not None and by_id["good"].error is None
        assert result.summary["n_failed"] == 1
        assert (tmp_path / "out" / "good.wav").exists()
        written = json.loads((tmp_path / "out" / "reports.json").read_text())
        for d in written:
            validate_report(d)
        assert (tmp_path / "out" / "reports.csv").read_text().startswith("utterance_id,")

    def test_gamma_sweep(self, utterance, models):
        cfg = config()
        summaries = sweep_gamma(self._items(utterance)[:1], cfg, [0.1, 0.5], store=loaded_store(cfg, models),
                                scorer=SidecarScorer({"a": 1.65}))
        assert set(summaries) == {0.1, 0.5}
        assert all(s["gamma"] == g for g, s in summaries.items())
        assert summaries[0.1]["class_counts"]["High"] == 1 and summaries[0.5]["class_counts"]["Medium"] == 1


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = config(gamma=0.2)
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        back = PipelineConfig.from_json(path)
        assert back.gamma == 0.2 and back.gss.iterations == 3

    @pytest.mark.parametrize("kw", [{"gamma": -1}, {"scorer": "oracle"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PipelineConfig(**kw)

    def test_report_schema_rejects_extra_keys(self):
        with pytest.raises(ValueError):
            validate_report({"utterance_id": "x"})
