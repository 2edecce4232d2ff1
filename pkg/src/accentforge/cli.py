"""Command-line interface."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="accentforge",
        description="Accent-transfer distillation pipeline on forged corpora")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="render a corpus from a profile")
    p.add_argument("--profile", help="profile JSON; omit for the built-in default")
    p.add_argument("--composition", choices=["core", "news"], default="core")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ingest", help="validate a manifest file")
    p.add_argument("manifest")

    p = sub.add_parser("balance", help="upsample non-dominant speakers")
    p.add_argument("manifest")
    p.add_argument("--dominant-accent", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="stratified train/validation/test split")
    p.add_argument("manifest")
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("features", help="precompute mel features for a manifest")
    p.add_argument("manifest")
    p.add_argument("--cache", required=True)

    p = sub.add_parser("train-teacher", help="train the transfer teacher")
    p.add_argument("--train", required=True)
    p.add_argument("--validation", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="TeacherConfig overrides as JSON")

    p = sub.add_parser("synth-mel", help="teacher inference for one utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True, help="space-separated tokens")
    p.add_argument("--speaker", required=True)
    p.add_argument("--accent", required=True)
    p.add_argument("--out", required=True, help="output .npy mel path")

    p = sub.add_parser("invert", help="mel to waveform via phase reconstruction")
    p.add_argument("--mel", required=True, help=".npy log-mel (T x 80)")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=60)

    p = sub.add_parser("train-prosody", help="train a per-accent prosody student")
    p.add_argument("--train", required=True)
    p.add_argument("--accent", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="StudentConfig overrides as JSON")

    p = sub.add_parser("predict-prosody", help="prosody inference for one utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--style", required=True)

    p = sub.add_parser("train-synth", help="train a per-accent waveform synthesizer")
    p.add_argument("--synthetic", required=True)
    p.add_argument("--natural", help="natural manifest of the accent anchor")
    p.add_argument("--accent", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="SynthConfig overrides as JSON")

    p = sub.add_parser("synthesize", help="full student synthesis to WAV")
    p.add_argument("--prosody-checkpoint", required=True)
    p.add_argument("--synth-checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--style", default="neutral")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="run or resume the full experiment")
    p.add_argument("--config", help="ExperimentConfig JSON; omit for desk defaults")
    p.add_argument("--root", help="experiment root (with default config)")
    p.add_argument("--stage", help="run stages up to and including this one")
    p.add_argument("--sweep", action="store_true", help="also run the volume sweep")

    p = sub.add_parser("evaluate", help="rerun the evaluation stage")
    p.add_argument("--root", required=True)

    p = sub.add_parser("report", help="regenerate report files from cached metrics")
    p.add_argument("--root", required=True)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    return _dispatch(args)


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "forge":
        from .forge import (ForgeProfile, default_core_composition,
                            default_news_composition, default_profile, forge_corpus)
        profile = ForgeProfile.load(args.profile) if args.profile else default_profile(args.seed)
        comp = default_core_composition() if args.composition == "core" \
            else default_news_composition()
        manifest = forge_corpus(profile, comp, args.out, seed=args.seed,
                                corpus_name=args.composition)
        print(f"forged {len(manifest)} utterances -> {args.out}/manifest.jsonl")
        return 0

    if cmd == "ingest":
        from .data import load_manifest
        m = load_manifest(args.manifest)
        print(f"ok: {len(m)} utterances, {len(m.speaker_table)} speakers, "
              f"accents {sorted(m.accents)}, styles {sorted(m.styles)}")
        return 0

    if cmd == "balance":
        from .data import balance_by_upsampling, load_manifest
        m = load_manifest(args.manifest)
        out = balance_by_upsampling(m, args.dominant_accent)
        out.save(args.out)
        print(f"balanced {len(m)} -> {len(out)} records")
        return 0

    if cmd == "split":
        from .data import load_manifest, split
        fractions = tuple(float(x) for x in args.fractions.split(","))
        m = load_manifest(args.manifest)
        names = ("train", "validation", "test")
        for name, part in zip(names, split(m, fractions, args.seed)):
            part.save(f"{args.out_prefix}.{name}.jsonl")
            print(f"{name}: {len(part)} records")
        return 0

    if cmd == "features":
        from .data import load_manifest
        from .features import FeatureCache
        m = load_manifest(args.manifest)
        cache = FeatureCache(args.cache)
        for u in m:
            cache.mel(u.id, lambda u=u: u.load_wave(m.root))
        print(f"cached mel features for {len(m)} utterances")
        return 0

    if cmd == "train-teacher":
        from .data import load_manifest
        from .features import FeatureCache
        from .models.teacher import TeacherConfig, train_teacher
        cfg = TeacherConfig(**json.loads(args.config)) if args.config else TeacherConfig()
        ck = train_teacher(load_manifest(args.train), load_manifest(args.validation),
                           cfg, seed=args.seed, workdir=args.out,
                           cache=FeatureCache(args.cache))
        print(f"teacher checkpoint at {ck.directory} (step {ck.step})")
        return 0

    if cmd == "synth-mel":
        from .models.teacher import TeacherCheckpoint, synthesize_mel
        ck = TeacherCheckpoint.load(args.checkpoint)
        syn = synthesize_mel(ck, args.text.split(), args.speaker, args.accent)
        np.save(args.out, syn.mel)
        print(f"mel {syn.mel.shape} -> {args.out} "
              f"(stop step {syn.stop_step}, runaway {syn.runaway})")
        return 0

    if cmd == "invert":
        from .audio import write_wav
        from .features import MelSpectrogram
        from .melinvert import invert_mel
        mel = MelSpectrogram(np.load(args.mel))
        wave = invert_mel(mel, iterations=args.iterations)
        write_wav(args.out, wave)
        print(f"wrote {len(wave)} samples -> {args.out}")
        return 0

    if cmd == "train-prosody":
        from .data import load_manifest
        from .models.prosody import StudentConfig, train_student
        overrides = json.loads(args.config) if args.config else {}
        cfg = StudentConfig(accent_id=args.accent, **overrides)
        ck = train_student(load_manifest(args.train), cfg, seed=args.seed,
                           workdir=args.out)
        print(f"prosody checkpoint at {ck.directory} (step {ck.step})")
        return 0

    if cmd == "predict-prosody":
        from .features import linguistic_features
        from .models.prosody import StudentCheckpoint, predict_prosody
        ck = StudentCheckpoint.load(args.checkpoint)
        feats = linguistic_features(args.text.split(), style_id=args.style,
                                    speaker_id=args.speaker)
        track = predict_prosody(ck, feats, args.speaker, args.style)
        print(json.dumps({"durations": track.durations.tolist(),
                          "f0": [round(float(v), 1) for v in track.f0]}))
        return 0

    if cmd == "train-synth":
        from .data import load_manifest, CorpusManifest
        from .models.wavegru import SynthConfig, assemble_synth_trainset, train_synth
        synthetic = load_manifest(args.synthetic)
        if args.natural:
            trainset = assemble_synth_trainset(synthetic, load_manifest(args.natural),
                                               args.accent)
        else:
            trainset = synthetic
        overrides = json.loads(args.config) if args.config else {}
        cfg = SynthConfig(accent_id=args.accent, **overrides)
        ck = train_synth(trainset, cfg, seed=args.seed, workdir=args.out)
        print(f"synthesizer checkpoint at {ck.directory} "
              f"(NLL {ck.final_nll:.3f} vs baseline {ck.baseline_nll:.3f})")
        return 0

    if cmd == "synthesize":
        from .audio import write_wav
        from .features import linguistic_features
        from .models.prosody import StudentCheckpoint, predict_prosody
        from .models.wavegru import SynthCheckpoint, generate_waveform
        pck = StudentCheckpoint.load(args.prosody_checkpoint)
        sck = SynthCheckpoint.load(args.synth_checkpoint)
        feats = linguistic_features(args.text.split(), style_id=args.style,
                                    speaker_id=args.speaker)
        track = predict_prosody(pck, feats, args.speaker, args.style)
        wave = generate_waveform(sck, feats, track, seed=args.seed,
                                 temperature=args.temperature)
        write_wav(args.out, wave)
        print(f"wrote {len(wave)} samples -> {args.out}")
        return 0

    if cmd == "run":
        from .pipeline import ExperimentConfig, desk_config, run_pipeline, run_sweep
        if args.config:
            cfg = ExperimentConfig.load(args.config)
        elif args.root:
            cfg = desk_config(args.root)
        else:
            print("run: provide --config or --root", file=sys.stderr)
            return 2
        all_stages = ("corpora", "teacher", "generate", "students", "evaluate", "report")
        stages = all_stages
        if args.stage:
            if args.stage not in all_stages:
                print(f"unknown stage {args.stage}", file=sys.stderr)
                return 2
            stages = all_stages[:all_stages.index(args.stage) + 1]
        artifacts = run_pipeline(cfg, stages=stages)
        if args.sweep:
            run_sweep(cfg)
            artifacts = run_pipeline(cfg, stages=all_stages)
        if "report" in artifacts:
            print(Path(artifacts["report"]["txt"]).read_text(encoding="utf-8"))
        return 0

    if cmd == "evaluate":
        from .pipeline import ExperimentConfig, run_pipeline
        cfg = ExperimentConfig.load(Path(args.root) / "config.json")
        run_pipeline(cfg, stages=("corpora", "teacher", "generate", "students", "evaluate"))
        print("evaluation metrics refreshed")
        return 0

    if cmd == "report":
        from .evaluate import emit_report
        csv_path, txt_path = emit_report(args.root)
        print(Path(txt_path).read_text(encoding="utf-8"))
        return 0

    raise AssertionError(f"unhandled command {cmd}")


if __name__ == "__main__":
    sys.exit(main())
