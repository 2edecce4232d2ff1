"""End-to-end experiment orchestration.

Stages: forge corpora, feature precomputation, teacher training, synthetic
data generation per target accent, per-accent student training (prosody
model + waveform synthesizer), objective evaluation, report emission. Each
stage commits a fingerprint of its inputs and is skipped on rerun when the
fingerprint matches, so deleting a late artifact never retrains models.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .audio import HOP, WINDOW, write_wav
from .data import (CorpusManifest, ManifestError, balance_by_upsampling,
                   load_manifest, split)
from .features import (FeatureCache, MelSpectrogram, ProsodyTrack,
                       AlignmentFailedError, durations_from_attention, extract_f0,
                       linguistic_features, save_prosody)
from .forge import (ForgeProfile, NEWS_HEAVY_SPEAKERS, default_core_composition,
                    default_news_composition, default_profile, expected_frames,
                    forge_corpus, make_sentence, neutral_variant, news_variant,
                    sentence_batch, stress_batch)
from .melinvert import DEFAULT_ITERATIONS, invert_mel_batch
from .models.prosody import StudentConfig, StudentCheckpoint, predict_prosody, train_student
from .models.teacher import TeacherCheckpoint, TeacherConfig, synthesize_mel_batch, train_teacher
from .models.wavegru import (COMPONENT_ID, SynthCheckpoint, SynthConfig,
                             assemble_synth_trainset, generate_waveform_batch,
                             train_synth)
from .evaluate import (MeasurementError, accent_classify, attention_diagnostics,
                       detrended_f0_spread, duration_diagnostics, emit_report,
                       measure_accent, mcd, phone_seconds, speaker_score, style_shift)
from .util import fingerprint, read_json, stable_seed, write_json

log = logging.getLogger("accentforge.pipeline")

DATA_VOCODER_ID = "phase-recon"
TAIL = WINDOW - HOP            # silent tail that completes the frame grid


class PipelineError(RuntimeError):
    pass


@dataclass
class Roles:
    primary_high: str            # dominant-accent lead, high voice class
    primary_low: str             # dominant-accent lead, low voice class
    anchors: dict                # accent -> largest native speaker

    def transfer_speakers(self, selected) -> list:
        return list(selected) + [self.primary_high, self.primary_low]


@dataclass
class GenerationPlan:
    target_accent: str
    jobs: list                   # (speaker_id, tokens tuple, style_id, source)

    def job_count(self) -> int:
        return len(self.jobs)

    def style_histogram(self) -> dict:
        out: dict[str, int] = {}
        for _, _, style_id, _ in self.jobs:
            out[style_id] = out.get(style_id, 0) + 1
        return out


@dataclass
class ExperimentConfig:
    root: str = "experiment"
    dominant_accent: str = "A0"
    target_accents: tuple = ("A1", "A2", "A3")
    selected_speakers: tuple = NEWS_HEAVY_SPEAKERS
    utterances_per_speaker: int = 240
    seed: int = 1234
    torch_threads: int = 2
    data_vocoder: str = DATA_VOCODER_ID
    final_vocoder: str = COMPONENT_ID
    invert_iterations: int = DEFAULT_ITERATIONS
    teacher: dict = field(default_factory=dict)      # TeacherConfig overrides
    prosody: dict = field(default_factory=dict)      # StudentConfig overrides
    synth: dict = field(default_factory=dict)        # SynthConfig overrides
    eval_core_texts: int = 8
    eval_style_pairs: int = 4
    eval_stress_texts: int = 50
    eval_temperature: float = 1.0
    sweep_accent: str = "A1"
    sweep_speakers: int = 4
    sweep_base_utterances: int = 48
    sweep_volumes: tuple = (0.25, 0.5, 1.0, 2.0)
    core_composition: tuple | None = None      # (speaker, style, count) rows;
    news_composition: tuple | None = None      # None selects the full defaults

    def validate(self):
        if self.data_vocoder == self.final_vocoder:
            raise PipelineError(
                "the data-generation vocoder and the trained synthesizer must be "
                f"different components, both are {self.final_vocoder!r}")
        if self.utterances_per_speaker <= 0:
            raise PipelineError("utterances_per_speaker must be > 0")

    def seed_for(self, *tags) -> int:
        return stable_seed(self.seed, *tags)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        doc = read_json(path)
        cfg = cls(**doc)
        cfg.target_accents = tuple(cfg.target_accents)
        cfg.selected_speakers = tuple(cfg.selected_speakers)
        cfg.sweep_volumes = tuple(cfg.sweep_volumes)
        return cfg

    def save(self, path) -> None:
        write_json(path, asdict(self))


def desk_config(root, **overrides) -> ExperimentConfig:
    """Default desk-scale experiment: CPU-sized model dims and step counts."""
    fields = {
        "root": str(root),
        "teacher": {"steps": 3500, "batch_size": 16, "max_decoder_steps": 300},
        "prosody": {"steps": 700, "batch_size": 16},
        "synth": {"hidden_dim": 128, "steps": 500, "batch_size": 12, "crop_frames": 6},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(fields.get(key), dict):
            fields[key] = {**fields[key], **value}
        else:
            fields[key] = value
    return ExperimentConfig(**fields)


# ---------------------------------------------------------------------------
# stage plumbing

def _stage_done(stage_dir: Path, fp: str) -> bool:
    marker = stage_dir / "fingerprint.json"
    if not marker.exists():
        return False
    try:
        return read_json(marker)["fingerprint"] == fp
    except Exception:
        return False


def _commit_stage(stage_dir: Path, fp: str, extra: dict | None = None) -> None:
    doc = {"fingerprint": fp}
    if extra:
        doc.update(extra)
    write_json(stage_dir / "fingerprint.json", doc)


def _rebase(manifest: CorpusManifest, new_root: Path) -> CorpusManifest:
    """Re-anchor relative paths onto a common root directory."""
    new_root = Path(new_root)
    utts = []
    for u in manifest:
        utts.append(dataclasses.replace(
            u,
            audio_path=os.path.relpath(manifest.root / u.audio_path, new_root),
            prosody_path=(os.path.relpath(manifest.root / u.prosody_path, new_root)
                          if u.prosody_path else None)))
    return CorpusManifest(utts, manifest.speaker_table, new_root)


def _merge(manifests, root: Path) -> CorpusManifest:
    utts, table = [], {}
    for m in manifests:
        rebased = _rebase(m, root)
        utts.extend(rebased.utterances)
        table.update(rebased.speaker_table)
    return CorpusManifest(utts, table, root)


# ---------------------------------------------------------------------------
# roles and generation plans

def resolve_roles(core: CorpusManifest, config: ExperimentConfig) -> Roles:
    """Deterministic role bindings: most utterances wins, ties go to the
    lexicographically smaller speaker id."""
    counts = core.per_speaker_counts()

    def largest(candidates):
        pool = [(-counts.get(s, 0), s) for s in candidates if counts.get(s, 0) > 0]
        if not pool:
            return None
        return min(pool)[1]

    dom = config.dominant_accent
    highs = [s for s, e in core.speaker_table.items()
             if e.native_accent == dom and e.voice_class == "high"]
    lows = [s for s, e in core.speaker_table.items()
            if e.native_accent == dom and e.voice_class == "low"]
    primary_high = largest(highs)
    primary_low = largest(lows)
    if primary_high is None or primary_low is None:
        raise PipelineError(f"no usable speaker in a required voice class for {dom}")
    anchors = {}
    for accent in config.target_accents:
        natives = [s for s, e in core.speaker_table.items() if e.native_accent == accent]
        anchor = largest(natives)
        if anchor is None:
            raise PipelineError(f"no native speaker with data for target accent {accent}")
        anchors[accent] = anchor
    return Roles(primary_high=primary_high, primary_low=primary_low, anchors=anchors)


def build_generation_plan(config: ExperimentConfig, roles: Roles, accent: str,
                          news: CorpusManifest, core: CorpusManifest,
                          profile: ForgeProfile,
                          utterances_per_speaker: int | None = None,
                          speakers: list | None = None) -> GenerationPlan:
    """Cross product of transfer speakers and the two transcript pools.

    Style labels come from the transcript source alone: news-corpus
    transcripts are labeled news, accent-anchor transcripts neutral. The
    per-speaker budget is met by cycling the pools and topping up with
    fresh generator sentences shaped like their source.
    """
    cap = utterances_per_speaker if utterances_per_speaker is not None \
        else config.utterances_per_speaker
    if cap <= 0:
        raise PipelineError("generation plan would be empty (utterances_per_speaker <= 0)")
    news_pool = [u.text for u in news if u.speaker_id in config.selected_speakers]
    anchor = roles.anchors[accent]
    anchor_pool = [u.text for u in core if u.speaker_id == anchor]
    if not news_pool or not anchor_pool:
        raise PipelineError("empty transcript pool for the generation plan")

    jobs = []
    speakers = speakers if speakers is not None else roles.transfer_speakers(config.selected_speakers)
    for speaker in speakers:
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed_for("plan", accent), stable_seed(speaker)]))
        order_news = [news_pool[i] for i in rng.permutation(len(news_pool))]
        order_anchor = [anchor_pool[i] for i in rng.permutation(len(anchor_pool))]
        budget = {"news": (cap + 1) // 2, "neutral": cap // 2}
        for style_id, pool, source in (("news", order_news, "news-corpus"),
                                       ("neutral", order_anchor, "accent-anchor")):
            take = min(budget[style_id], len(pool))
            for t in pool[:take]:
                jobs.append((speaker, tuple(t), style_id, source))
            for _ in range(budget[style_id] - take):
                fresh = make_sentence(rng, profile, style_id)
                jobs.append((speaker, tuple(fresh), style_id, source + "+fresh"))
    return GenerationPlan(target_accent=accent, jobs=jobs)


# ---------------------------------------------------------------------------
# stages

def stage_corpora(config: ExperimentConfig, profile: ForgeProfile) -> dict:
    root = Path(config.root)
    stage = root / "corpora"
    core_comp = [tuple(r) for r in (config.core_composition or default_core_composition())]
    news_comp = [tuple(r) for r in (config.news_composition or default_news_composition())]
    fp = fingerprint({"profile": [asdict(a) for a in profile.accents.values()],
                      "speakers": [asdict(s) for s in profile.speakers.values()],
                      "styles": [asdict(s) for s in profile.styles.values()],
                      "core": core_comp,
                      "news": news_comp,
                      "seed": config.seed_for("forge")})
    if not _stage_done(stage, fp):
        log.info("stage corpora: forging")
        forge_corpus(profile, core_comp, stage / "core",
                     seed=config.seed_for("forge", "core"), corpus_name="core")
        forge_corpus(profile, news_comp, stage / "news",
                     seed=config.seed_for("forge", "news"), corpus_name="news")
        profile.save(stage / "profile.json")
        _commit_stage(stage, fp)
    return {"fingerprint": fp,
            "core": stage / "core" / "manifest.jsonl",
            "news": stage / "news" / "manifest.jsonl"}


def stage_teacher(config: ExperimentConfig, corpora: dict) -> dict:
    root = Path(config.root)
    stage = root / "teacher"
    tcfg = TeacherConfig(**config.teacher)
    fp = fingerprint({"corpora": corpora["fingerprint"], "config": asdict(tcfg),
                      "seed": config.seed_for("teacher")})
    if not _stage_done(stage, fp):
        log.info("stage teacher: training")
        core = load_manifest(corpora["core"])
        news = load_manifest(corpora["news"])
        combined = _merge([core, news], root)
        balanced = balance_by_upsampling(combined, config.dominant_accent)
        train_m, val_m, _ = split(balanced, (0.97, 0.03, 0.0),
                                  seed=config.seed_for("split"))
        cache = FeatureCache(root / "cache")
        torch.set_num_threads(config.torch_threads)
        train_teacher(train_m, val_m, tcfg, seed=config.seed_for("teacher"),
                      workdir=stage / "checkpoint", cache=cache,
                      corpus_fingerprint=corpora["fingerprint"])
        _commit_stage(stage, fp)
    return {"fingerprint": fp, "checkpoint": stage / "checkpoint"}


def _write_synthetic(out_dir: Path, accent: str, plan: GenerationPlan,
                     teacher: TeacherCheckpoint, config: ExperimentConfig,
                     speaker_table) -> CorpusManifest:
    from .data import SpeakerEntry, Utterance
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    reduction = teacher.config.reduction
    utts = []
    dropped = {"runaway": 0, "alignment": 0}
    batch = 24
    for start in range(0, len(plan.jobs), batch):
        chunk = plan.jobs[start:start + batch]
        syntheses = synthesize_mel_batch(
            teacher, [(list(t), spk, accent) for spk, t, _, _ in chunk])
        keep = []
        for j, (job, syn) in enumerate(zip(chunk, syntheses)):
            if syn.runaway:
                dropped["runaway"] += 1
                continue
            try:
                durations = durations_from_attention(
                    syn.attention, len(job[1]), syn.num_frames, frames_per_step=reduction)
            except AlignmentFailedError:
                dropped["alignment"] += 1
                continue
            keep.append((job, syn, durations))
        waves = invert_mel_batch([MelSpectrogram(syn.mel) for _, syn, _ in keep],
                                 iterations=config.invert_iterations)
        for (job, syn, durations), wave in zip(keep, waves):
            speaker, tokens, style_id, _ = job
            idx = start + chunk.index(job)
            utt_id = f"{accent}-{speaker}-{style_id}-{idx:05d}"
            wave = np.concatenate([np.clip(wave, -1, 1), np.zeros(TAIL)])
            f0, voicing = extract_f0(wave)
            track = ProsodyTrack(f0=np.where(voicing, f0, 0.0), voicing=voicing,
                                 durations=durations)
            wav_rel = f"audio/{utt_id}.wav"
            pros_rel = f"audio/{utt_id}.prosody.jsonl"
            write_wav(out_dir / wav_rel, wave)
            save_prosody(out_dir / pros_rel, track, tokens=list(tokens))
            utts.append(Utterance(
                id=utt_id, text=tokens, speaker_id=speaker, accent_id=accent,
                style_id=style_id, audio_path=wav_rel, provenance="synthetic",
                prosody_path=pros_rel))
    table = {sid: speaker_table[sid] for sid in {u.speaker_id for u in utts}}
    manifest = CorpusManifest(utts, table, out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    write_json(out_dir / "generation_stats.json",
               {"planned": plan.job_count(), "kept": len(utts), **dropped,
                "styles": plan.style_histogram()})
    if dropped["runaway"] or dropped["alignment"]:
        log.warning("generation %s: dropped %s", accent, dropped)
    return manifest


def stage_generate(config: ExperimentConfig, corpora: dict, teacher_stage: dict,
                   profile: ForgeProfile) -> dict:
    root = Path(config.root)
    stage = root / "synthetic"
    fp = fingerprint({"teacher": teacher_stage["fingerprint"],
                      "volume": config.utterances_per_speaker,
                      "accents": list(config.target_accents),
                      "speakers": list(config.selected_speakers),
                      "iterations": config.invert_iterations,
                      "seed": config.seed_for("plan")})
    manifests = {a: stage / a / "manifest.jsonl" for a in config.target_accents}
    if not _stage_done(stage, fp):
        core = load_manifest(corpora["core"])
        news = load_manifest(corpora["news"])
        roles = resolve_roles(core, config)
        teacher = TeacherCheckpoint.load(teacher_stage["checkpoint"])
        torch.set_num_threads(config.torch_threads)
        for accent in config.target_accents:
            plan = build_generation_plan(config, roles, accent, news, core, profile)
            log.info("stage generate: %s, %d jobs", accent, plan.job_count())
            _write_synthetic(stage / accent, accent, plan, teacher, config,
                             {**core.speaker_table, **news.speaker_table})
        write_json(stage / "roles.json", asdict(roles))
        _commit_stage(stage, fp)
    return {"fingerprint": fp, "manifests": manifests, "roles": stage / "roles.json"}


def stage_students(config: ExperimentConfig, corpora: dict, generate: dict) -> dict:
    root = Path(config.root)
    stage = root / "students"
    pcfg_base = dict(config.prosody)
    scfg_base = dict(config.synth)
    fp = fingerprint({"generate": generate["fingerprint"], "prosody": pcfg_base,
                      "synth": scfg_base, "seed": config.seed_for("students")})
    out = {"fingerprint": fp, "accents": {}}
    for accent in config.target_accents:
        out["accents"][accent] = {"prosody": stage / accent / "prosody",
                                  "synth": stage / accent / "synth"}
    if not _stage_done(stage, fp):
        core = load_manifest(corpora["core"])
        roles = Roles(**read_json(generate["roles"]))
        torch.set_num_threads(config.torch_threads)
        for accent in config.target_accents:
            synthetic = load_manifest(generate["manifests"][accent])
            log.info("stage students: %s on %d synthetic records", accent, len(synthetic))
            pcfg = StudentConfig(accent_id=accent, **pcfg_base)
            train_student(synthetic, pcfg, seed=config.seed_for("prosody", accent),
                          workdir=stage / accent / "prosody",
                          corpus_fingerprint=generate["fingerprint"])
            anchor = roles.anchors[accent]
            natural = core.subset(lambda u: u.speaker_id == anchor)
            trainset = assemble_synth_trainset(
                _rebase(synthetic, root), _rebase(natural, root), accent)
            scfg = SynthConfig(accent_id=accent, **scfg_base)
            train_synth(trainset, scfg, seed=config.seed_for("synth", accent),
                        workdir=stage / accent / "synth",
                        corpus_fingerprint=generate["fingerprint"])
        _commit_stage(stage, fp)
    return out


# ---------------------------------------------------------------------------
# evaluation

def _oracle_render(profile, tokens, speaker_id, accent_id, style_id, seed):
    from .forge.render import render_utterance
    return render_utterance(list(tokens), profile.speakers[speaker_id],
                            profile.accents[accent_id], profile.styles[style_id],
                            profile, seed=seed)


def _measure_system(wave, tokens, durations, profile, speaker, accents):
    from .features import extract_f0 as _f0
    f0, voicing = _f0(wave)
    m = measure_accent(wave, f0, voicing, list(tokens), durations, profile)
    cls, margin = accent_classify(m, accents)
    score = speaker_score(m.f0_intercept, m.formant_scale, speaker)
    spread = detrended_f0_spread(f0, voicing, list(tokens), durations, profile)
    return {"measurement": m, "classified": cls, "margin": margin,
            "speaker_score": score, "spread": spread,
            "seconds": phone_seconds(list(tokens), durations)}


class _FinalSystem:
    """Prosody student + waveform synthesizer for one accent."""

    def __init__(self, accent, students, temperature):
        self.accent = accent
        self.prosody = StudentCheckpoint.load(students["accents"][accent]["prosody"])
        self.synth = SynthCheckpoint.load(students["accents"][accent]["synth"])
        self.temperature = temperature

    def render_batch(self, jobs, seed_tag):
        """jobs: (tokens, speaker_id, style_id) -> (wave, durations) list."""
        feats_list, prosody_list = [], []
        for tokens, speaker_id, style_id in jobs:
            feats = linguistic_features(list(tokens), style_id=style_id,
                                        speaker_id=speaker_id)
            track = predict_prosody(self.prosody, feats, speaker_id, style_id)
            feats_list.append(feats)
            prosody_list.append(track)
        gen_jobs = [(f, p, stable_seed(seed_tag, self.accent, i))
                    for i, (f, p) in enumerate(zip(feats_list, prosody_list))]
        waves = generate_waveform_batch(self.synth, gen_jobs, temperature=self.temperature)
        out = []
        for wave, track in zip(waves, prosody_list):
            wave = np.concatenate([np.clip(wave, -1, 1), np.zeros(TAIL)])
            out.append((wave, np.asarray(track.durations)))
        return out


def stage_evaluate(config: ExperimentConfig, corpora: dict, teacher_stage: dict,
                   generate: dict, students: dict, profile: ForgeProfile) -> dict:
    root = Path(config.root)
    stage = root / "evaluation"
    fp = fingerprint({"students": students["fingerprint"],
                      "eval": [config.eval_core_texts, config.eval_style_pairs,
                               config.eval_stress_texts, config.eval_temperature],
                      "seed": config.seed_for("eval")})
    if _stage_done(stage, fp):
        return {"fingerprint": fp, "metrics": stage / "metrics.json"}
    stage.mkdir(parents=True, exist_ok=True)

    core = load_manifest(corpora["core"])
    news = load_manifest(corpora["news"])
    roles = Roles(**read_json(generate["roles"]))
    teacher = TeacherCheckpoint.load(teacher_stage["checkpoint"])
    torch.set_num_threads(config.torch_threads)
    reduction = teacher.config.reduction

    eval_seed = config.seed_for("eval")
    core_texts = sentence_batch(eval_seed, profile, "neutral", config.eval_core_texts,
                                tag="eval-core")
    style_bases = sentence_batch(eval_seed, profile, "neutral", config.eval_style_pairs,
                                 tag="eval-style")
    stress_texts = stress_batch(eval_seed, profile, config.eval_stress_texts)

    speakers = roles.transfer_speakers(config.selected_speakers)
    pairs = [(s, a) for a in config.target_accents for s in speakers]
    finals = {a: _FinalSystem(a, students, config.eval_temperature)
              for a in config.target_accents}

    rows = []
    stress_stats = {"teacher": [], "final": []}
    coverage_all = []

    for speaker_id, accent in pairs:
        speaker = profile.speakers[speaker_id]
        accent_params = profile.accents[accent]
        per_system: dict[str, dict] = {}

        oracle_mels = []
        for k, tokens in enumerate(core_texts):
            r = _oracle_render(profile, tokens, speaker_id, accent, "neutral",
                               seed=stable_seed(eval_seed, "oracle", speaker_id, accent, k))
            oracle_mels.append(compute_mel_cached(r.wave))

        # intermediate: teacher mel through deterministic inversion
        syntheses = synthesize_mel_batch(
            teacher, [(list(t), speaker_id, accent) for t in core_texts])
        waves = invert_mel_batch([MelSpectrogram(s.mel) for s in syntheses],
                                 iterations=config.invert_iterations)
        inter_results = []
        for k, (tokens, syn, wave) in enumerate(zip(core_texts, syntheses, waves)):
            wave = np.concatenate([np.clip(wave, -1, 1), np.zeros(TAIL)])
            expected = expected_frames(list(tokens), accent_params,
                                       profile.styles["neutral"], profile)
            flags = attention_diagnostics(
                syn.attention, syn.stop_step, expected,
                non_pause_mask=np.array([t not in (".", ",") for t in tokens]),
                frames_per_step=reduction)
            coverage_all.append(flags.coverage)
            entry = {"flags": flags}
            try:
                durations = durations_from_attention(syn.attention, len(tokens),
                                                     syn.num_frames, frames_per_step=reduction)
                entry.update(_measure_system(wave, tokens, durations, profile,
                                             speaker, profile.accents))
                entry["mcd"] = mcd(compute_mel_cached(wave), oracle_mels[k], use_dtw=True)
            except (MeasurementError, AlignmentFailedError) as e:
                entry["failed"] = str(e)
            inter_results.append(entry)
        per_system["intermediate"] = _aggregate(inter_results, accent)

        final = finals[accent]
        rendered = final.render_batch([(t, speaker_id, "neutral") for t in core_texts],
                                      seed_tag=("eval", speaker_id))
        fin_results = []
        for k, (tokens, (wave, durations)) in enumerate(zip(core_texts, rendered)):
            expected = expected_frames(list(tokens), accent_params,
                                       profile.styles["neutral"], profile)
            entry = {"flags": duration_diagnostics(durations, expected)}
            try:
                entry.update(_measure_system(wave, tokens, durations, profile,
                                             speaker, profile.accents))
                entry["mcd"] = mcd(compute_mel_cached(wave), oracle_mels[k], use_dtw=True)
            except (MeasurementError, AlignmentFailedError) as e:
                entry["failed"] = str(e)
            fin_results.append(entry)
        per_system["final"] = _aggregate(fin_results, accent)

        # style pairs on matched texts: news variant carries the comma marker
        style_scores = _style_eval(config, profile, teacher, final, speaker_id,
                                   accent, style_bases, reduction)
        for system in ("intermediate", "final"):
            per_system[system]["style_score"] = style_scores[system]["score"]
            per_system[system]["style_rate_sign_ok"] = style_scores[system]["rate_signs"]
            rows.append({"accent": accent, "speaker": speaker_id, "system": system,
                         **per_system[system]})

    # stress set: stability comparison on long unusual texts, round-robin pairs
    for k, tokens in enumerate(stress_texts):
        speaker_id, accent = pairs[k % len(pairs)]
        accent_params = profile.accents[accent]
        expected = expected_frames(list(tokens), accent_params,
                                   profile.styles["neutral"], profile)
        syn = synthesize_mel_batch(teacher, [(list(tokens), speaker_id, accent)])[0]
        flags = attention_diagnostics(
            syn.attention, syn.stop_step, expected,
            non_pause_mask=np.array([t not in (".", ",") for t in tokens]),
            frames_per_step=reduction)
        stress_stats["teacher"].append(flags)
        (wave, durations) = finals[accent].render_batch(
            [(tokens, speaker_id, "neutral")], seed_tag=("stress", k))[0]
        stress_stats["final"].append(duration_diagnostics(durations, expected))

    stability = {}
    for system, flag_list in stress_stats.items():
        stability[system] = {
            "early_stop": float(np.mean([f.early_stop for f in flag_list])),
            "skip": float(np.mean([f.skip for f in flag_list])),
            "repeat": float(np.mean([f.repeat for f in flag_list])),
            "babble": float(np.mean([f.babble for f in flag_list])),
            "count": len(flag_list),
        }

    metrics = {"pairs": rows, "stability": stability,
               "teacher_attention_coverage": float(np.mean(coverage_all))}
    sweep_path = root / "sweep" / "sweep.json"
    if sweep_path.exists():
        metrics["saturation"] = read_json(sweep_path)["points"]
    write_json(stage / "metrics.json", metrics)
    _commit_stage(stage, fp)
    return {"fingerprint": fp, "metrics": stage / "metrics.json"}


_mel_memo_limit = 4


def compute_mel_cached(wave):
    from .features import compute_mel
    return compute_mel(np.clip(wave, -1.0, 1.0))


def _aggregate(results, target_accent) -> dict:
    ok = [r for r in results if "failed" not in r]
    n_cls = len(ok)
    flags = [r["flags"] for r in results]
    agg = {
        "accent_rate": (sum(r["classified"] == target_accent for r in ok) / n_cls)
        if n_cls else None,
        "accent_margin": float(np.mean([r["margin"] for r in ok])) if n_cls else None,
        "speaker_score": float(np.mean([r["speaker_score"] for r in ok])) if n_cls else None,
        "mcd_to_oracle": float(np.mean([r["mcd"] for r in ok])) if n_cls else None,
        "early_stop_rate": float(np.mean([f.early_stop for f in flags])),
        "skip_rate": float(np.mean([f.skip for f in flags])),
        "repeat_rate": float(np.mean([f.repeat for f in flags])),
        "babble_rate": float(np.mean([f.babble for f in flags])),
        "n_texts": len(results),
        "n_measured": n_cls,
    }
    return agg


def _style_eval(config, profile, teacher, final, speaker_id, accent, style_bases,
                reduction) -> dict:
    out = {}
    styles = profile.styles
    for system in ("intermediate", "final"):
        shifts = []
        for k, base in enumerate(style_bases):
            neutral_tokens = neutral_variant(base)
            news_tokens = news_variant(base)
            try:
                if system == "intermediate":
                    rend = {}
                    for style_id, toks in (("neutral", neutral_tokens), ("news", news_tokens)):
                        syn = synthesize_mel_batch(
                            teacher, [(list(toks), speaker_id, accent)])[0]
                        if syn.runaway:
                            raise MeasurementError("runaway during style eval")
                        wave = invert_mel_batch([MelSpectrogram(syn.mel)],
                                                iterations=config.invert_iterations)[0]
                        wave = np.concatenate([np.clip(wave, -1, 1), np.zeros(TAIL)])
                        durations = durations_from_attention(
                            syn.attention, len(toks), syn.num_frames,
                            frames_per_step=reduction)
                        rend[style_id] = _style_measures(wave, toks, durations, profile)
                else:
                    pair = final.render_batch(
                        [(neutral_tokens, speaker_id, "neutral"),
                         (news_tokens, speaker_id, "news")],
                        seed_tag=("style", speaker_id, k))
                    rend = {"neutral": _style_measures(pair[0][0], neutral_tokens,
                                                       pair[0][1], profile),
                            "news": _style_measures(pair[1][0], news_tokens,
                                                    pair[1][1], profile)}
                shifts.append(style_shift(rend["news"], rend["neutral"], styles))
            except (MeasurementError, AlignmentFailedError):
                continue
        if shifts:
            out[system] = {"score": float(np.mean([s.score() for s in shifts])),
                           "rate_signs": [bool(s.rate_sign_ok) for s in shifts]}
        else:
            out[system] = {"score": None, "rate_signs": []}
    return out


def _style_measures(wave, tokens, durations, profile) -> dict:
    from .features import extract_f0 as _f0
    f0, voicing = _f0(wave)
    return {"seconds": phone_seconds(list(tokens), durations),
            "spread": detrended_f0_spread(f0, voicing, list(tokens), durations, profile)}


# ---------------------------------------------------------------------------
# sweep mode

def run_sweep(config: ExperimentConfig, profile: ForgeProfile | None = None) -> Path:
    """Synthetic-volume sweep for one accent: retrain students per volume and
    measure the final system's accent classification rate."""
    profile = profile or default_profile(config.seed_for("profile"))
    config.validate()
    root = Path(config.root)
    corpora = stage_corpora(config, profile)
    teacher_stage = stage_teacher(config, corpora)
    core = load_manifest(corpora["core"])
    news = load_manifest(corpora["news"])
    roles = resolve_roles(core, config)
    teacher = TeacherCheckpoint.load(teacher_stage["checkpoint"])
    torch.set_num_threads(config.torch_threads)

    accent = config.sweep_accent
    speakers = roles.transfer_speakers(config.selected_speakers)[:config.sweep_speakers]
    sweep_root = root / "sweep"
    eval_texts = sentence_batch(config.seed_for("sweep-eval"), profile, "neutral", 8,
                                tag="sweep-eval")
    points = []
    for volume in config.sweep_volumes:
        per_speaker = max(2, int(round(config.sweep_base_utterances * volume)))
        vdir = sweep_root / f"vol{volume:g}"
        stats_path = vdir / "point.json"
        if stats_path.exists():
            points.append(read_json(stats_path))
            continue
        plan = build_generation_plan(config, roles, accent, news, core, profile,
                                     utterances_per_speaker=per_speaker,
                                     speakers=speakers)
        log.info("sweep volume %.2f: %d jobs", volume, plan.job_count())
        synthetic = _write_synthetic(vdir / "synthetic", accent, plan, teacher, config,
                                     {**core.speaker_table, **news.speaker_table})
        pcfg = StudentConfig(accent_id=accent, **config.prosody)
        prosody_ck = train_student(synthetic, pcfg,
                                   seed=config.seed_for("sweep-prosody", volume),
                                   workdir=vdir / "prosody")
        natural = core.subset(lambda u: u.speaker_id == roles.anchors[accent])
        trainset = assemble_synth_trainset(_rebase(synthetic, root),
                                           _rebase(natural, root), accent)
        scfg = SynthConfig(accent_id=accent, **config.synth)
        synth_ck = train_synth(trainset, scfg, seed=config.seed_for("sweep-synth", volume),
                               workdir=vdir / "synth")

        correct = measured = 0
        for speaker_id in speakers:
            feats_jobs = [(t, speaker_id, "neutral") for t in eval_texts]
            system = _FinalSystem.__new__(_FinalSystem)
            system.accent = accent
            system.prosody = prosody_ck
            system.synth = synth_ck
            system.temperature = config.eval_temperature
            rendered = system.render_batch(feats_jobs, seed_tag=("sweep", volume, speaker_id))
            for tokens, (wave, durations) in zip(eval_texts, rendered):
                try:
                    res = _measure_system(wave, tokens, durations, profile,
                                          profile.speakers[speaker_id], profile.accents)
                except MeasurementError:
                    continue
                measured += 1
                correct += (res["classified"] == accent)
        point = {"volume": volume, "utterances": len(synthetic),
                 "accent_rate": correct / measured if measured else 0.0,
                 "measured": measured}
        write_json(stats_path, point)
        points.append(point)
    write_json(sweep_root / "sweep.json", {"accent": accent, "points": points})
    # refresh the metrics/report saturation section on the next evaluate run
    return sweep_root / "sweep.json"


# ---------------------------------------------------------------------------
# entry point

def run_pipeline(config: ExperimentConfig, profile: ForgeProfile | None = None,
                 stages: tuple = ("corpora", "teacher", "generate", "students",
                                  "evaluate", "report")) -> dict:
    """Run (or resume) the experiment; returns stage artifact paths."""
    config.validate()
    profile = profile or default_profile(config.seed_for("profile"))
    root = Path(config.root)
    root.mkdir(parents=True, exist_ok=True)
    config.save(root / "config.json")

    artifacts = {}
    corpora = stage_corpora(config, profile)
    artifacts["corpora"] = corpora
    if "teacher" not in stages:
        return artifacts
    teacher_stage = stage_teacher(config, corpora)
    artifacts["teacher"] = teacher_stage
    if "generate" not in stages:
        return artifacts
    generate = stage_generate(config, corpora, teacher_stage, profile)
    artifacts["generate"] = generate
    if "students" not in stages:
        return artifacts
    students = stage_students(config, corpora, generate)
    artifacts["students"] = students
    if "evaluate" not in stages:
        return artifacts
    evaluation = stage_evaluate(config, corpora, teacher_stage, generate, students, profile)
    artifacts["evaluate"] = evaluation
    if "report" in stages:
        csv_path, txt_path = emit_report(root)
        artifacts["report"] = {"csv": csv_path, "txt": txt_path}
    return artifacts
