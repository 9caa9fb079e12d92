"""Command-line entry point: ``qtse <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import QtseError
from .gss import load_activity_json
from .nn.params import save_checkpoint
from .pipeline import PipelineConfig, load_batch_manifest, process_utterance, run_batch, sweep_gamma
from .routing import GAMMA_SWEEP, route
from .signal import read_wav, write_wav
from .simulate import random_mixspec
from .train import (
    TrainConfig,
    build_examples,
    load_manifest,
    simulate_utterance,
    train_drcnet,
    train_fusion,
    utterance_from_entry,
    write_history,
)

log = logging.getLogger("qtse")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {}
    for key in ("gamma", "scorer", "sidecar_path", "fusion_checkpoint", "drcnet_checkpoint", "output_dir"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return replace(cfg, **overrides) if overrides else cfg


def cmd_simulate(args):
    """Write sources, rendered mixtures, activities and both manifests."""
    out = Path(args.out)
    (out / "sources").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    dataset, batch = [], []
    for i in range(args.n):
        uid = f"utt{i:04d}"
        spec = random_mixspec(rng)
        utt = simulate_utterance(spec, args.duration)
        mix = utt.mixture
        src = {"clean": write_wav(out / "sources" / f"{uid}_clean.wav", mix.clean_ref),
               "noise": write_wav(out / "sources" / f"{uid}_noise.wav", mix.scaled_noise)}
        ints = [write_wav(out / "sources" / f"{uid}_int{j}.wav", x) for j, x in enumerate(utt.interferers)]
        dataset.append({"clean": str(src["clean"].relative_to(out)), "noise": str(src["noise"].relative_to(out)),
                        "interferers": [str(p.relative_to(out)) for p in ints], "mix": spec.to_dict()})
        write_wav(out / f"{uid}.wav", mix.mixture)
        write_wav(out / f"{uid}.ref.wav", utt.reference(0))
        segments = [{"source_id": sid, "start_s": s, "end_s": e} for sid, s, e in _segments(utt)]
        (out / f"{uid}.activity.json").write_text(json.dumps(segments, indent=1))
        batch.append({"id": uid, "wav": f"{uid}.wav", "activity": f"{uid}.activity.json",
                      "target": "target", "reference": f"{uid}.ref.wav"})
    (out / "dataset.jsonl").write_text("".join(json.dumps(d) + "\n" for d in dataset))
    (out / "batch.jsonl").write_text("".join(json.dumps(d) + "\n" for d in batch))
    print(f"wrote {args.n} utterances to {out}")
    return 0


def _segments(utt):
    from .simulate import oracle_segments

    sources = {"target": utt.clean}
    sources.update({f"int{i}": x for i, x in enumerate(utt.interferers)})
    return [(s["source_id"], s["start_s"], s["end_s"]) for s in oracle_segments(sources)]


def cmd_score(args):
    cfg = _config(args)
    wave = read_wav(args.wav, cfg.stft.sample_rate)
    uid = args.id or Path(args.wav).stem
    score = cfg.make_scorer()(wave.samples.mean(axis=0), wave.sample_rate, uid)
    print(json.dumps({"utterance_id": uid, "score": score}))
    return 0


def cmd_route(args):
    cfg = _config(args)
    wave = read_wav(args.wav, cfg.stft.sample_rate)
    uid = args.id or Path(args.wav).stem
    decision = route(wave, cfg.make_scorer(), cfg.gamma, uid)
    print(json.dumps({"utterance_id": uid, **decision.to_dict()}))
    return 0


def cmd_enhance(args):
    cfg = _config(args)
    wave = read_wav(args.wav, cfg.stft.sample_rate)
    acts = load_activity_json(args.activity, cfg.stft.num_frames(wave.length), cfg.stft)
    reference = read_wav(args.reference, cfg.stft.sample_rate).samples[0] if args.reference else None
    uid = args.id or Path(args.wav).stem
    enhanced, report = process_utterance(wave, acts, cfg, uid, args.target, reference)
    report.output_path = str(write_wav(args.out, enhanced, wave.sample_rate))
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def _training_pairs(args):
    if args.manifest:
        base = Path(args.manifest).parent
        utts = [utterance_from_entry(e, base) for e in load_manifest(args.manifest)]
    else:
        rng = np.random.default_rng(args.seed)
        utts = [simulate_utterance(random_mixspec(rng), args.duration) for _ in range(args.simulate)]
    pairs = [build_examples(u) for u in utts]
    n_val = int(round(len(pairs) * args.val_fraction))
    return pairs[n_val:] or pairs, pairs[:n_val] or None


def _train(args, which):
    cfg = TrainConfig(lr=args.lr, batch=args.batch, max_epochs=args.epochs, seed=args.seed)
    train, val = _training_pairs(args)
    idx = 0 if which == "fusion" else 1
    train_set = [p[idx] for p in train]
    val_set = [p[idx] for p in val] if val else None

    def show(row):
        log.info("epoch %d train %.5g val %.5g lr %.3g", row["epoch"], row["train_loss"], row["val_loss"], row["lr"])

    fn = train_fusion if which == "fusion" else train_drcnet
    params, history = fn(train_set, cfg, val_set, on_epoch=show)
    path = save_checkpoint(params, args.out)
    if args.history:
        write_history(history, args.history)
    print(json.dumps({"checkpoint": str(path), "epochs": len(history), "final": history[-1]}))
    return 0


def cmd_train_fusion(args):
    return _train(args, "fusion")


def cmd_train_drcnet(args):
    return _train(args, "drcnet")


def cmd_evaluate(args):
    cfg = _config(args)
    result = run_batch(load_batch_manifest(args.manifest), cfg, args.jobs)
    print(json.dumps(result.summary, indent=2))
    return 0 if result.summary["n_failed"] == 0 else 3


def cmd_sweep_gamma(args):
    cfg = _config(args)
    gammas = args.gammas or list(GAMMA_SWEEP)
    summaries = sweep_gamma(load_batch_manifest(args.manifest), cfg, gammas, args.jobs)
    print(json.dumps({f"{g:g}": s for g, s in summaries.items()}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline configuration JSON")
    common.add_argument("--gamma", type=float, help="half-width of the Medium band around 1.5")
    common.add_argument("--scorer", choices=["sidecar", "heuristic"])
    common.add_argument("--sidecar", dest="sidecar_path", help="JSON file of {utterance_id: score}")
    common.add_argument("--fusion-checkpoint")
    common.add_argument("--drcnet-checkpoint")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="qtse", description="Quality-routed target speech extraction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--duration", type=float, default=2.0)
    p.set_defaults(func=cmd_simulate)

    for name, func, text in [("score", cmd_score, "print the quality score of a wav"),
                             ("route", cmd_route, "print the routing decision for a wav")]:
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("wav")
        p.add_argument("--id", help="utterance id (default: file stem)")
        p.set_defaults(func=func)

    p = sub.add_parser("enhance", parents=[common], help="enhance one 6-channel wav")
    p.add_argument("wav")
    p.add_argument("--activity", required=True, help="activity segments JSON")
    p.add_argument("--target", default="target", help="source id of the target speaker")
    p.add_argument("--reference", help="optional clean reference wav for SI-SDR")
    p.add_argument("--id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enhance)

    for name, func in [("train-fusion", cmd_train_fusion), ("train-drcnet", cmd_train_drcnet)]:
        p = sub.add_parser(name, parents=[common], help=f"stage-1 training ({name[6:]})")
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--manifest", help="dataset manifest (JSON lines)")
        src.add_argument("--simulate", type=int, help="simulate this many utterances instead")
        p.add_argument("--duration", type=float, default=1.0)
        p.add_argument("--epochs", type=int, default=20)
        p.add_argument("--batch", type=int, default=4)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--val-fraction", type=float, default=0.2)
        p.add_argument("--history", help="write per-epoch history CSV here")
        p.add_argument("--out", required=True, help="checkpoint path (.npz)")
        p.set_defaults(func=func)

    for name, func in [("evaluate", cmd_evaluate), ("sweep-gamma", cmd_sweep_gamma)]:
        p = sub.add_parser(name, parents=[common], help=f"{name} over a batch manifest")
        p.add_argument("manifest")
        p.add_argument("--output-dir")
        if name == "sweep-gamma":
            p.add_argument("--gammas", type=float, nargs="+")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (QtseError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
