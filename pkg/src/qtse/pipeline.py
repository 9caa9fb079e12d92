"""Per-utterance orchestration and batch evaluation.

Every utterance is scored, routed, separated with GSS and, depending on the
route, refined by the fusion block or DRC-NET-lite. Reports record the
decision, the stages that actually ran with their timings, and SI-SDR
against a reference when one is available.
"""
from __future__ import annotations

import csv
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .drcnet import DrcNetLite, drcnet_enhance
from .errors import CheckpointError, InputTooShort, InvalidThreshold, ScorerUnavailable, StrategyUnavailable
from .fusion import Extractor, FdNet, FusionInput, fusion_extract, load_visual_embedding
from .gss import ActivityGrid, GssConfig, gss_extract, load_activity_json
from .nn.params import ModelParams, load_checkpoint
from .routing import (
    DEFAULT_GAMMA,
    GAMMA_SWEEP,
    QualityClass,
    QualityScorer,
    RoutingDecision,
    Strategy,
    estimate_quality,
    fallback_decision,
    make_scorer,
    route,
)
from .signal import MultiChannelWave, StftConfig, average_channels, read_wav, si_sdr, write_wav

log = logging.getLogger(__name__)

STAGES = {
    Strategy.GssOnly: ("gss",),
    Strategy.GssFusionExtract: ("gss", "fusion"),
    Strategy.GssDrcnet: ("gss", "drcnet"),
}


@dataclass
class PipelineConfig:
    gamma: float = DEFAULT_GAMMA
    scorer: str = "heuristic"
    sidecar_path: str | None = None
    stft: StftConfig = field(default_factory=StftConfig)
    gss: GssConfig = field(default_factory=GssConfig)
    fusion_checkpoint: str | None = None
    drcnet_checkpoint: str | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if not 0 <= self.gamma <= 4:
            raise InvalidThreshold(f"gamma must lie in [0, 4], got {self.gamma}")
        if self.scorer not in ("heuristic", "sidecar"):
            raise ValueError(f"unknown scorer {self.scorer!r}")
        self.gss = replace(self.gss, stft=self.stft)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        stft = StftConfig(**d.pop("stft", {}))
        gss = GssConfig(stft=stft, **d.pop("gss", {}))
        return cls(stft=stft, gss=gss, **d)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gss"].pop("stft")
        return d

    def make_scorer(self) -> QualityScorer:
        return make_scorer(self.scorer, self.sidecar_path)


class ModelStore:
    """Loads each checkpoint at most once; parameters are shared read-only."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self._lock = threading.Lock()
        self._cache: dict[str, tuple] = {}

    def _load(self, kind: str, path, model_cls):
        with self._lock:
            if kind not in self._cache:
                if not path:
                    self._cache[kind] = (None, f"no {kind} checkpoint configured")
                else:
                    try:
                        params = load_checkpoint(path)
                        if params.arch.get("name") != model_cls.arch_name:
                            raise CheckpointError(f"{path} holds a {params.arch.get('name')!r} model")
                        model = model_cls.from_arch(params.arch)
                        params = model.load(path)
                        self._cache[kind] = ((model, params), None)
                    except (OSError, CheckpointError, KeyError, ValueError) as exc:
                        self._cache[kind] = (None, f"cannot load {kind} checkpoint {path}: {exc}")
            value, error = self._cache[kind]
        if value is None:
            raise StrategyUnavailable(error)
        return value

    def fusion(self) -> tuple[FdNet, ModelParams]:
        return self._load("fusion", self.cfg.fusion_checkpoint, FdNet)

    def drcnet(self) -> tuple[DrcNetLite, ModelParams]:
        return self._load("drcnet", self.cfg.drcnet_checkpoint, DrcNetLite)

    def put(self, kind: str, model, params: ModelParams):
        """Register in-memory parameters (used by tests and freshly trained runs)."""
        with self._lock:
            self._cache[kind] = ((model, params), None)


@dataclass
class UtteranceReport:
    utterance_id: str
    decision: dict | None = None
    executed_strategy: str | None = None
    stages: list[dict] = field(default_factory=list)
    timings_ms: dict[str, float] = field(default_factory=dict)
    metrics: dict[str, float | None] = field(default_factory=dict)
    output_path: str | None = None
    warnings: list[str] = field(default_factory=list)
    error: str | None = None

    @property
    def stage_names(self) -> tuple[str, ...]:
        return tuple(s["name"] for s in self.stages)

    def to_dict(self) -> dict:
        return asdict(self)


REPORT_SCHEMA = {
    "utterance_id": str,
    "decision": (dict, type(None)),
    "executed_strategy": (str, type(None)),
    "stages": list,
    "timings_ms": dict,
    "metrics": dict,
    "output_path": (str, type(None)),
    "warnings": list,
    "error": (str, type(None)),
}


def validate_report(d: dict) -> None:
    """Raise ValueError unless ``d`` has exactly the documented report fields."""
    if set(d) != set(REPORT_SCHEMA):
        raise ValueError(f"report keys {sorted(d)} differ from schema {sorted(REPORT_SCHEMA)}")
    for key, typ in REPORT_SCHEMA.items():
        if not isinstance(d[key], typ):
            raise ValueError(f"report field {key!r} has type {type(d[key]).__name__}")
    for stage in d["stages"]:
        if set(stage) != {"name", "ms"}:
            raise ValueError(f"malformed stage entry {stage}")
    if d["error"] is None and d["executed_strategy"] is not None:
        if tuple(s["name"] for s in d["stages"]) != STAGES[Strategy(d["executed_strategy"])]:
            raise ValueError("stage log does not match the executed strategy")


class _Timer:
    def __init__(self, report: UtteranceReport, name: str, stage: bool = True):
        self.report, self.name, self.stage = report, name, stage

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        ms = 1000 * (time.perf_counter() - self.t0)
        if exc_type is None and self.stage:
            self.report.stages.append({"name": self.name, "ms": ms})
        self.report.timings_ms[self.name] = ms
        return False


def _decide(wave, cfg, scorer, utterance_id, report) -> RoutingDecision:
    try:
        return route(wave, scorer, cfg.gamma, utterance_id)
    except ScorerUnavailable as exc:
        report.warnings.append(f"ScorerUnavailable: {exc}; routed as Medium")
        return fallback_decision(cfg.gamma)


def process_utterance(
    wave: MultiChannelWave,
    activities: ActivityGrid,
    cfg: PipelineConfig,
    utterance_id: str = "utt",
    target: int | str = 0,
    reference: np.ndarray | None = None,
    visual: np.ndarray | None = None,
    store: ModelStore | None = None,
    scorer: QualityScorer | None = None,
    extractor: Extractor | None = None,
) -> tuple[np.ndarray, UtteranceReport]:
    """Route one utterance and run its strategy.

    A strategy whose checkpoint cannot be loaded falls back to GSS only and
    leaves a warning in the report.

    Returns:
        The enhanced mono wave and its report.
    """
    store = store or ModelStore(cfg)
    scorer = scorer or cfg.make_scorer()
    report = UtteranceReport(utterance_id)

    with _Timer(report, "score", stage=False):
        decision = _decide(wave, cfg, scorer, utterance_id, report)
    report.decision = decision.to_dict()

    strategy = decision.strategy
    models = None
    try:
        if strategy is Strategy.GssFusionExtract:
            models = store.fusion()
        elif strategy is Strategy.GssDrcnet:
            models = store.drcnet()
    except StrategyUnavailable as exc:
        report.warnings.append(f"StrategyUnavailable: {exc}; fell back to GssOnly")
        strategy = Strategy.GssOnly
    report.executed_strategy = strategy.value

    with _Timer(report, "gss"):
        enhanced = gss_extract(wave, activities, cfg.gss, target)
    if strategy is Strategy.GssFusionExtract:
        model, params = models
        with _Timer(report, "fusion"):
            enhanced = fusion_extract(FusionInput(wave, enhanced, cfg.stft), params, model, extractor, visual)
    elif strategy is Strategy.GssDrcnet:
        model, params = models
        with _Timer(report, "drcnet"):
            enhanced = drcnet_enhance(enhanced, params, cfg.stft, model)

    report.metrics = _metrics(wave, enhanced, reference)
    return enhanced, report


def _metrics(wave: MultiChannelWave, enhanced: np.ndarray, reference) -> dict:
    metrics: dict[str, float | None] = {"si_sdr_db": None, "input_si_sdr_db": None, "proxy_quality_score": None}
    try:
        metrics["proxy_quality_score"] = estimate_quality(enhanced, wave.sample_rate)
    except InputTooShort:
        pass
    if reference is not None:
        metrics["si_sdr_db"] = si_sdr(enhanced, reference)
        metrics["input_si_sdr_db"] = si_sdr(average_channels(wave), reference)
    return metrics


# --- batches ----------------------------------------------------------------


@dataclass
class BatchItem:
    """One utterance held in memory."""

    utterance_id: str
    wave: MultiChannelWave
    activities: ActivityGrid
    target: int | str = 0
    reference: np.ndarray | None = None
    visual: np.ndarray | None = None


def load_batch_manifest(path) -> list[dict]:
    """JSON-lines manifest of ``{"id", "wav", "activity", ["target"], ["reference"], ["visual"]}``.

    Paths are resolved against the manifest's directory. Files are only read
    when the entry is processed, so one bad file cannot stop the batch.
    """
    path = Path(path)
    entries = []
    for line in path.read_text().splitlines():
        if line.strip():
            entry = json.loads(line)
            for key in ("wav", "activity", "reference", "visual"):
                if entry.get(key):
                    p = Path(entry[key])
                    entry[key] = str(p if p.is_absolute() else path.parent / p)
            entries.append(entry)
    return entries


def _resolve(entry, cfg: PipelineConfig) -> BatchItem:
    if isinstance(entry, BatchItem):
        return entry
    wave = read_wav(entry["wav"], cfg.stft.sample_rate)
    activities = load_activity_json(entry["activity"], cfg.stft.num_frames(wave.length), cfg.stft)
    reference = read_wav(entry["reference"], cfg.stft.sample_rate).samples[0] if entry.get("reference") else None
    visual = load_visual_embedding(entry["visual"]) if entry.get("visual") else None
    return BatchItem(str(entry["id"]), wave, activities, entry.get("target", 0), reference, visual)


def _entry_id(entry) -> str:
    return entry.utterance_id if isinstance(entry, BatchItem) else str(entry.get("id", "?"))


@dataclass
class BatchResult:
    reports: list[UtteranceReport]
    summary: dict
    outputs: dict[str, np.ndarray] = field(default_factory=dict)


def summarize(reports: Sequence[UtteranceReport], gamma: float) -> dict:
    counts = {q.name: 0 for q in QualityClass}
    per_strategy: dict[str, list[float]] = {}
    inputs, outputs = [], []
    for r in reports:
        if r.error is not None:
            continue
        counts[r.decision["class"]] += 1
        if r.metrics.get("si_sdr_db") is not None:
            per_strategy.setdefault(r.executed_strategy, []).append(r.metrics["si_sdr_db"])
            outputs.append(r.metrics["si_sdr_db"])
            inputs.append(r.metrics["input_si_sdr_db"])
    return {
        "gamma": gamma,
        "n_utterances": len(reports),
        "n_failed": sum(r.error is not None for r in reports),
        "class_counts": counts,
        "mean_si_sdr_db": {k: float(np.mean(v)) for k, v in sorted(per_strategy.items())},
        "mean_output_si_sdr_db": float(np.mean(outputs)) if outputs else None,
        "mean_input_si_sdr_db": float(np.mean(inputs)) if inputs else None,
    }


def run_batch(entries: Sequence, cfg: PipelineConfig, jobs: int = 1, store: ModelStore | None = None,
              scorer: QualityScorer | None = None, keep_outputs: bool = False) -> BatchResult:
    """Process every entry, isolating failures, and write reports when
    ``cfg.output_dir`` is set.

    Entries are :class:`BatchItem` objects or manifest dicts. Reports are
    sorted by utterance id whatever the completion order.
    """
    store = store or ModelStore(cfg)
    try:
        scorer = scorer or cfg.make_scorer()
    except (OSError, ValueError) as exc:
        log.warning("scorer unavailable (%s); every utterance will be routed as Medium", exc)
        scorer = _BrokenScorer(str(exc))
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    def work(entry):
        uid = _entry_id(entry)
        try:
            item = _resolve(entry, cfg)
            enhanced, report = process_utterance(
                item.wave, item.activities, cfg, item.utterance_id, item.target, item.reference,
                item.visual, store, scorer,
            )
            if out_dir:
                report.output_path = str(write_wav(out_dir / f"{uid}.wav", enhanced, item.wave.sample_rate))
            return report, enhanced
        except Exception as exc:  # one bad utterance must not stop the batch
            log.warning("utterance %s failed: %s", uid, exc)
            return UtteranceReport(uid, error=f"{type(exc).__name__}: {exc}"), None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, entries))
    else:
        results = [work(e) for e in entries]
    results.sort(key=lambda r: r[0].utterance_id)
    reports = [r for r, _ in results]
    summary = summarize(reports, cfg.gamma)
    outputs = {r.utterance_id: y for r, y in results if keep_outputs and y is not None}
    if out_dir:
        write_reports(reports, summary, out_dir)
    return BatchResult(reports, summary, outputs)


class _BrokenScorer:
    scorer_id = "unavailable"

    def __init__(self, reason):
        self.reason = reason

    def __call__(self, wave, sample_rate, utterance_id=None):
        raise ScorerUnavailable(self.reason)


CSV_FIELDS = ["utterance_id", "score", "class", "strategy", "executed_strategy", "scorer_id", "stages",
              "si_sdr_db", "input_si_sdr_db", "proxy_quality_score", "output_path", "warnings", "error"]


def write_reports(reports: Sequence[UtteranceReport], summary: dict, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / "reports.json", "csv": out_dir / "reports.csv", "summary": out_dir / "summary.json"}
    paths["json"].write_text(json.dumps([r.to_dict() for r in reports], indent=2))
    paths["summary"].write_text(json.dumps(summary, indent=2))
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for r in reports:
            d = r.decision or {}
            writer.writerow({
                "utterance_id": r.utterance_id,
                "score": d.get("score"),
                "class": d.get("class"),
                "strategy": d.get("strategy"),
                "executed_strategy": r.executed_strategy,
                "scorer_id": d.get("scorer_id"),
                "stages": "+".join(r.stage_names),
                "si_sdr_db": r.metrics.get("si_sdr_db"),
                "input_si_sdr_db": r.metrics.get("input_si_sdr_db"),
                "proxy_quality_score": r.metrics.get("proxy_quality_score"),
                "output_path": r.output_path,
                "warnings": " | ".join(r.warnings),
                "error": r.error,
            })
    return paths


class _CachedScorer:
    """Scores each utterance once across a gamma sweep."""

    def __init__(self, inner: QualityScorer):
        self.inner = inner
        self.scorer_id = inner.scorer_id
        self._scores: dict = {}
        self._lock = threading.Lock()

    def __call__(self, wave, sample_rate, utterance_id=None):
        with self._lock:
            if utterance_id is not None and utterance_id in self._scores:
                return self._scores[utterance_id]
        score = self.inner(wave, sample_rate, utterance_id)
        with self._lock:
            self._scores[utterance_id] = score
        return score


def sweep_gamma(entries: Sequence, cfg: PipelineConfig, gammas: Sequence[float] = GAMMA_SWEEP,
                jobs: int = 1, store: ModelStore | None = None,
                scorer: QualityScorer | None = None) -> dict[float, dict]:
    """Run the batch once per gamma and return one summary per value."""
    store = store or ModelStore(cfg)
    scorer = _CachedScorer(scorer or cfg.make_scorer())
    summaries = {}
    for gamma in gammas:
        sub = replace(cfg, gamma=gamma)
        if cfg.output_dir:
            sub.output_dir = str(Path(cfg.output_dir) / f"gamma_{gamma:g}")
        summaries[gamma] = run_batch(entries, sub, jobs, store, scorer).summary
    return summaries
