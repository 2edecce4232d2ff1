import json
from pathlib import Path

import numpy as np
import pytest

from accentforge.data import CorpusManifest, SpeakerEntry, Utterance, load_manifest
from accentforge.forge import default_profile
from accentforge.pipeline import (ExperimentConfig, GenerationPlan, PipelineError,
                                  Roles, build_generation_plan, desk_config,
                                  resolve_roles, run_pipeline)


def manifest_with_counts(counts, voice_classes, accents=None):
    accents = accents or {}
    table = {s: SpeakerEntry(s, accents.get(s, "A0"), voice_classes[s]) for s in counts}
    utts = []
    for s, n in counts.items():
        for k in range(n):
            utts.append(Utterance(id=f"{s}-{k:04d}", text=("t", "a", "."),
                                  speaker_id=s, accent_id=accents.get(s, "A0"),
                                  style_id="neutral", audio_path="x.wav",
                                  provenance="natural"))
    return CorpusManifest(utts, table)


class TestRoles:
    def test_largest_per_voice_class(self):
        m = manifest_with_counts(
            {"f1": 300, "f2": 120, "m1": 300, "a1": 50},
            {"f1": "high", "f2": "high", "m1": "low", "a1": "low"},
            accents={"a1": "A1"})
        cfg = ExperimentConfig(target_accents=("A1",))
        roles = resolve_roles(m, cfg)
        assert roles.primary_high == "f1"
        assert roles.primary_low == "m1"
        assert roles.anchors == {"A1": "a1"}

    def test_tie_breaks_lexicographic(self):
        m = manifest_with_counts(
            {"fb": 300, "fa": 300, "m1": 10, "a1": 5},
            {"fb": "high", "fa": "high", "m1": "low", "a1": "low"},
            accents={"a1": "A1"})
        cfg = ExperimentConfig(target_accents=("A1",))
        assert resolve_roles(m, cfg).primary_high == "fa"

    def test_missing_class_rejected(self):
        m = manifest_with_counts({"f1": 10}, {"f1": "high"})
        cfg = ExperimentConfig(target_accents=())
        with pytest.raises(PipelineError, match="voice class"):
            resolve_roles(m, cfg)


class TestPlan:
    def build(self, cap, n_news=120, n_anchor=120):
        profile = default_profile()
        news_speakers = tuple(f"nw{i}" for i in range(8))
        news_counts = {s: n_news // 8 for s in news_speakers}
        news = manifest_with_counts(news_counts, {s: "high" for s in news_speakers})
        anchor_counts = {"anchor1": n_anchor, "lead_h": 5, "lead_l": 5}
        core = manifest_with_counts(
            anchor_counts, {"anchor1": "low", "lead_h": "high", "lead_l": "low"},
            accents={"anchor1": "A1"})
        cfg = ExperimentConfig(target_accents=("A1",), selected_speakers=news_speakers,
                               utterances_per_speaker=cap)
        roles = Roles(primary_high="lead_h", primary_low="lead_l",
                      anchors={"A1": "anchor1"})
        return build_generation_plan(cfg, roles, "A1", news, core, profile)

    def test_job_count_full_pool(self):
        # 10 speakers x (120 news + 120 anchor transcripts), budget matches pool
        plan = self.build(cap=240)
        assert plan.job_count() == 10 * 240 == 2400

    def test_style_label_follows_source(self):
        plan = self.build(cap=40)
        for _, _, style_id, source in plan.jobs:
            if style_id == "news":
                assert source.startswith("news-corpus")
            else:
                assert source.startswith("accent-anchor")

    def test_extension_uses_fresh_sentences(self):
        plan = self.build(cap=60, n_news=16, n_anchor=8)
        fresh = [j for j in plan.jobs if j[3].endswith("+fresh")]
        assert fresh
        assert plan.job_count() == 10 * 60

    def test_zero_budget_rejected(self):
        with pytest.raises(PipelineError, match="empty"):
            self.build(cap=0)


def test_same_component_for_both_vocoders_rejected(tmp_path):
    cfg = ExperimentConfig(root=str(tmp_path), final_vocoder="phase-recon")
    with pytest.raises(PipelineError, match="different components"):
        cfg.validate()


def test_config_roundtrip(tmp_path):
    cfg = desk_config(tmp_path / "exp", utterances_per_speaker=12)
    cfg.save(tmp_path / "cfg.json")
    again = ExperimentConfig.load(tmp_path / "cfg.json")
    assert again == cfg


MICRO = dict(
    target_accents=("A1",),
    selected_speakers=("nwx01", "nwx02"),
    utterances_per_speaker=6,
    core_composition=(("a0x01", "neutral", 8), ("a0x07", "neutral", 8),
                      ("a1x01", "neutral", 6), ("a1x03", "neutral", 4)),
    news_composition=(("nwx01", "news", 5), ("nwx01", "neutral", 2),
                      ("nwx02", "news", 5), ("nwx02", "neutral", 2)),
    teacher={"steps": 40, "batch_size": 8, "max_decoder_steps": 300,
             "encoder_dim": 32, "decoder_dim": 64, "attention_dim": 32,
             "prenet_dim": 32},
    prosody={"steps": 30, "batch_size": 8, "encoder_dim": 32},
    synth={"hidden_dim": 32, "head_dim": 16, "steps": 25, "batch_size": 4,
           "crop_frames": 4},
    eval_core_texts=2,
    eval_style_pairs=1,
    eval_stress_texts=2,
)


@pytest.fixture(scope="module")
def micro_experiment(tmp_path_factory):
    """A full pipeline run at toy scale; models are untrained-quality."""
    root = tmp_path_factory.mktemp("micro_exp")
    cfg = desk_config(root / "exp", **MICRO)
    artifacts = run_pipeline(cfg)
    return cfg, artifacts


@pytest.mark.slow
class TestMicroPipeline:
    def test_artifacts_exist(self, micro_experiment):
        cfg, artifacts = micro_experiment
        root = Path(cfg.root)
        assert (root / "report" / "report.csv").exists()
        assert (root / "report" / "report.txt").exists()
        assert (root / "evaluation" / "metrics.json").exists()

    def test_stage_isolation(self, micro_experiment):
        cfg, artifacts = micro_experiment
        synthetic = load_manifest(artifacts["generate"]["manifests"]["A1"])
        assert all(u.provenance == "synthetic" for u in synthetic)
        roles = Roles(**json.loads(Path(artifacts["generate"]["roles"]).read_text()))
        # the synthesizer trainset mixes in natural data for the anchor only
        ck_doc = json.loads((Path(cfg.root) / "students" / "A1" / "synth"
                             / "config.json").read_text())
        assert roles.anchors["A1"] in ck_doc["vocab"]["speakers"]

    def test_report_rows_cover_pairs(self, micro_experiment):
        cfg, artifacts = micro_experiment
        metrics = json.loads((Path(cfg.root) / "evaluation" / "metrics.json").read_text())
        speakers = set(cfg.selected_speakers) | {"a0x07", "a0x01"}
        got = {(r["accent"], r["speaker"], r["system"]) for r in metrics["pairs"]}
        for s in speakers:
            assert ("A1", s, "intermediate") in got
            assert ("A1", s, "final") in got

    def test_rerun_hits_caches(self, micro_experiment):
        cfg, artifacts = micro_experiment
        root = Path(cfg.root)
        report = root / "report" / "report.csv"
        before = report.read_bytes()
        params = root / "teacher" / "checkpoint" / "params.pt"
        mtime = params.stat().st_mtime_ns
        report.unlink()
        run_pipeline(cfg)
        assert report.read_bytes() == before
        assert params.stat().st_mtime_ns == mtime

    def test_final_system_stability_zero_structural(self, micro_experiment):
        cfg, artifacts = micro_experiment
        metrics = json.loads((Path(cfg.root) / "evaluation" / "metrics.json").read_text())
        final = metrics["stability"]["final"]
        # early stopping, skipping and repetition cannot occur by construction;
        # babble depends on trained duration quality, so it is not asserted here
        assert final["early_stop"] == 0.0
        assert final["skip"] == 0.0
        assert final["repeat"] == 0.0


@pytest.mark.slow
def test_micro_pipeline_deterministic(tmp_path):
    reports = []
    for run in ("r1", "r2"):
        cfg = desk_config(tmp_path / run, **MICRO)
        run_pipeline(cfg)
        reports.append((Path(cfg.root) / "report" / "report.csv").read_text())
    a, b = (r.splitlines() for r in reports)
    assert len(a) == len(b)
    for la, lb in zip(a[1:], b[1:]):
        fa = la.split(",")
        fb = lb.split(",")
        assert fa[:3] == fb[:3]
        for va, vb in zip(fa[3:], fb[3:]):
            if va == "--" or vb == "--":
                assert va == vb
            else:
                assert abs(float(va) - float(vb)) <= 1e-6
