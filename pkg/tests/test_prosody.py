import json
from dataclasses import replace

import numpy as np
import pytest

from accentforge.data import CorpusManifest
from accentforge.features import linguistic_features
from accentforge.forge import forge_corpus
from accentforge.models.common import CheckpointError
from accentforge.models.prosody import (StudentCheckpoint, StudentConfig,
                                        predict_prosody, train_student)


def synthetic_manifest(tmp_path, profile, rows, accent="A1"):
    """Forged audio relabeled synthetic, standing in for teacher output."""
    manifest = forge_corpus(profile, rows, tmp_path, seed=17, corpus_name="syn")
    utts = [replace(u, provenance="synthetic", accent_id=accent) for u in manifest]
    return CorpusManifest(utts, manifest.speaker_table, manifest.root)


@pytest.fixture(scope="module")
def tiny_synthetic(tmp_path_factory, profile):
    tmp = tmp_path_factory.mktemp("prosody_data")
    return synthetic_manifest(tmp, profile, [("a1x01", "neutral", 1)])


def test_natural_provenance_rejected(tmp_path, profile):
    manifest = forge_corpus(profile, [("a1x01", "neutral", 1)], tmp_path, seed=1)
    cfg = StudentConfig(accent_id="A1", steps=1)
    with pytest.raises(CheckpointError, match="all-synthetic"):
        train_student(manifest, cfg, seed=1, workdir=tmp_path / "ck")


def test_foreign_accent_rejected(tmp_path, profile):
    m = synthetic_manifest(tmp_path, profile, [("a1x01", "neutral", 1)], accent="A2")
    cfg = StudentConfig(accent_id="A1", steps=1)
    with pytest.raises(CheckpointError, match="accents other"):
        train_student(m, cfg, seed=1, workdir=tmp_path / "ck")


def test_memorizes_durations(tiny_synthetic, tmp_path):
    cfg = StudentConfig(accent_id="A1", steps=500, batch_size=1, learning_rate=3e-3)
    ck = train_student(tiny_synthetic, cfg, seed=2, workdir=tmp_path / "ck")
    u = tiny_synthetic.utterances[0]
    track = u.load_ground_truth(tiny_synthetic.root)
    feats = linguistic_features(list(u.text), style_id=u.style_id, speaker_id=u.speaker_id)
    pred = predict_prosody(ck, feats, u.speaker_id, u.style_id)
    assert np.all(np.abs(pred.durations - track.durations) <= 1)


def test_structural_invariants(tiny_synthetic, tmp_path):
    cfg = StudentConfig(accent_id="A1", steps=5, batch_size=1)
    ck = train_student(tiny_synthetic, cfg, seed=3, workdir=tmp_path / "ck")
    u = tiny_synthetic.utterances[0]
    feats = linguistic_features(list(u.text), style_id=u.style_id, speaker_id=u.speaker_id)
    pred = predict_prosody(ck, feats, u.speaker_id, u.style_id)
    # one duration per token, each at least one frame, f0 grid matches exactly
    assert len(pred.durations) == len(u.text)
    assert np.all(pred.durations >= 1)
    assert int(pred.durations.sum()) == len(pred.f0)
    assert np.all((pred.f0 > 0) == pred.voicing)


def test_prediction_deterministic(tiny_synthetic, tmp_path):
    cfg = StudentConfig(accent_id="A1", steps=5, batch_size=1)
    ck = train_student(tiny_synthetic, cfg, seed=3, workdir=tmp_path / "ck")
    u = tiny_synthetic.utterances[0]
    feats = linguistic_features(list(u.text), style_id=u.style_id, speaker_id=u.speaker_id)
    a = predict_prosody(ck, feats, u.speaker_id, u.style_id)
    b = predict_prosody(ck, feats, u.speaker_id, u.style_id)
    assert np.array_equal(a.durations, b.durations)
    assert np.array_equal(a.f0, b.f0)


def test_unknown_ids_rejected(tiny_synthetic, tmp_path):
    cfg = StudentConfig(accent_id="A1", steps=2, batch_size=1)
    ck = train_student(tiny_synthetic, cfg, seed=3, workdir=tmp_path / "ck")
    u = tiny_synthetic.utterances[0]
    feats = linguistic_features(list(u.text), style_id=u.style_id, speaker_id=u.speaker_id)
    with pytest.raises(CheckpointError, match="speaker"):
        predict_prosody(ck, feats, "ghost", u.style_id)
    with pytest.raises(CheckpointError, match="style"):
        predict_prosody(ck, feats, u.speaker_id, "operatic")


def test_checkpoint_roundtrip(tiny_synthetic, tmp_path):
    cfg = StudentConfig(accent_id="A1", steps=3, batch_size=1)
    ck = train_student(tiny_synthetic, cfg, seed=4, workdir=tmp_path / "ck")
    again = StudentCheckpoint.load(tmp_path / "ck")
    u = tiny_synthetic.utterances[0]
    feats = linguistic_features(list(u.text), style_id=u.style_id, speaker_id=u.speaker_id)
    a = predict_prosody(ck, feats, u.speaker_id, u.style_id)
    b = predict_prosody(again, feats, u.speaker_id, u.style_id)
    assert np.array_equal(a.durations, b.durations)
    assert np.array_equal(a.f0, b.f0)


def test_accent_id_required():
    with pytest.raises(ValueError, match="accent_id"):
        StudentConfig().validate()
