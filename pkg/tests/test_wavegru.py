import json
import logging
from dataclasses import replace

import numpy as np
import pytest

from accentforge.audio import HOP
from accentforge.data import CorpusManifest, ManifestError
from accentforge.features import linguistic_features
from accentforge.forge import forge_corpus
from accentforge.models.wavegru import (SynthCheckpoint, SynthConfig,
                                        assemble_synth_trainset,
                                        generate_waveform, train_synth,
                                        single_logistic_baseline_nll)


def as_synthetic(manifest, accent="A1"):
    utts = [replace(u, provenance="synthetic", accent_id=accent) for u in manifest]
    return CorpusManifest(utts, manifest.speaker_table, manifest.root)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory, profile):
    tmp = tmp_path_factory.mktemp("wavegru_data")
    manifest = forge_corpus(profile, [("a1x01", "neutral", 2)], tmp, seed=23,
                            corpus_name="syn")
    return as_synthetic(manifest)


@pytest.fixture(scope="module")
def tiny_checkpoint(tiny_data, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("wavegru_ck")
    cfg = SynthConfig(accent_id="A1", hidden_dim=48, head_dim=24, steps=40,
                      batch_size=4, crop_frames=4)
    return train_synth(tiny_data, cfg, seed=5, workdir=tmp / "ck"), tiny_data


class TestAssemble:
    def test_counts_and_provenance(self, tmp_path, profile):
        syn = as_synthetic(forge_corpus(profile, [("nwx01", "neutral", 5)],
                                        tmp_path / "s", seed=1))
        nat = forge_corpus(profile, [("a1x01", "neutral", 2)], tmp_path / "n", seed=2)
        merged = assemble_synth_trainset(syn, nat, "A1")
        assert len(merged) == 7
        by_prov = {}
        for u in merged:
            by_prov[u.provenance] = by_prov.get(u.provenance, 0) + 1
        assert by_prov == {"synthetic": 5, "natural": 2}

    def test_foreign_natural_rejected(self, tmp_path, profile):
        syn = as_synthetic(forge_corpus(profile, [("nwx01", "neutral", 1)],
                                        tmp_path / "s", seed=1))
        nat = forge_corpus(profile, [("a2x01", "neutral", 1)], tmp_path / "n", seed=2)
        with pytest.raises(ManifestError, match="native"):
            assemble_synth_trainset(syn, nat, "A1")

    def test_empty_natural_warns(self, tmp_path, profile, caplog):
        syn = as_synthetic(forge_corpus(profile, [("nwx01", "neutral", 2)],
                                        tmp_path / "s", seed=1))
        empty = CorpusManifest([], {}, root=tmp_path)
        with caplog.at_level(logging.WARNING):
            merged = assemble_synth_trainset(syn, empty, "A1")
        assert len(merged) == 2
        assert any("fidelity" in rec.message for rec in caplog.records)


class TestTraining:
    def test_loss_logged_with_baseline(self, tiny_checkpoint):
        ck, _ = tiny_checkpoint
        log = json.loads((ck.directory / "training_log.json").read_text())
        assert log["losses"]
        assert np.isfinite(ck.final_nll)
        assert np.isfinite(ck.baseline_nll)

    def test_single_utterance_plateau(self, tmp_path, profile):
        data = as_synthetic(forge_corpus(profile, [("a1x01", "neutral", 1)],
                                         tmp_path / "d", seed=31))
        cfg = SynthConfig(accent_id="A1", hidden_dim=48, head_dim=24, steps=400,
                          batch_size=4, crop_frames=4, log_every=5,
                          learning_rate=2e-3)
        ck = train_synth(data, cfg, seed=6, workdir=tmp_path / "ck")
        log = json.loads((tmp_path / "ck" / "training_log.json").read_text())
        nlls = np.array([row["nll"] for row in log["losses"]])
        # final-10%-of-steps window vs the best window anywhere: single-batch
        # NLL jitters, window means isolate the trend
        w = max(len(nlls) // 10, 2)
        windows = np.array([nlls[i:i + w].mean() for i in range(0, len(nlls) - w + 1)])
        span = nlls.max() - windows.min()
        assert span > 0
        assert windows[-1] - windows.min() <= 0.05 * span

    def test_accent_id_required(self):
        with pytest.raises(ValueError, match="accent_id"):
            SynthConfig().validate()


class TestGeneration:
    def job(self, data):
        u = data.utterances[0]
        track = u.load_ground_truth(data.root)
        feats = linguistic_features(list(u.text), style_id=u.style_id,
                                    speaker_id=u.speaker_id)
        return feats, track

    def test_exact_length(self, tiny_checkpoint):
        ck, data = tiny_checkpoint
        feats, track = self.job(data)
        wave = generate_waveform(ck, feats, track, seed=9)
        assert len(wave) == int(track.durations.sum()) * HOP
        assert np.max(np.abs(wave)) <= 1.0

    def test_zero_temperature_deterministic(self, tiny_checkpoint):
        ck, data = tiny_checkpoint
        feats, track = self.job(data)
        a = generate_waveform(ck, feats, track, seed=1, temperature=0.0)
        b = generate_waveform(ck, feats, track, seed=2, temperature=0.0)
        assert np.array_equal(a, b)

    def test_same_seed_same_audio(self, tiny_checkpoint):
        ck, data = tiny_checkpoint
        feats, track = self.job(data)
        a = generate_waveform(ck, feats, track, seed=11)
        b = generate_waveform(ck, feats, track, seed=11)
        assert np.array_equal(a, b)

    def test_length_mismatch_rejected(self, tiny_checkpoint):
        ck, data = tiny_checkpoint
        feats, track = self.job(data)
        u = data.utterances[0]
        bad = linguistic_features(list(u.text)[:-2], style_id=u.style_id,
                                  speaker_id=u.speaker_id)
        with pytest.raises(ManifestError, match="durations"):
            generate_waveform(ck, bad, track, seed=1)

    def test_checkpoint_roundtrip(self, tiny_checkpoint):
        ck, data = tiny_checkpoint
        feats, track = self.job(data)
        again = SynthCheckpoint.load(ck.directory)
        a = generate_waveform(ck, feats, track, seed=3)
        b = generate_waveform(again, feats, track, seed=3)
        assert np.array_equal(a, b)


def test_baseline_formula():
    rng = np.random.default_rng(0)
    samples = rng.logistic(0.0, 0.05, size=20000).astype(np.float32)
    nll = single_logistic_baseline_nll(samples)
    # analytic NLL of a logistic at the true parameters: log s + 2
    assert abs(nll - (np.log(0.05) + 2.0)) < 0.05
