import inspect
import json

import numpy as np
import pytest
import torch

from accentforge.features import FeatureCache
from accentforge.forge import forge_corpus
from accentforge.models.common import CheckpointError
from accentforge.models.teacher import (TeacherCheckpoint, TeacherConfig,
                                        TeacherModel, synthesize_mel,
                                        train_teacher)


@pytest.fixture(scope="module")
def one_utterance(tmp_path_factory, profile):
    out = tmp_path_factory.mktemp("teach_one")
    manifest = forge_corpus(profile, [("a0x04", "neutral", 1)], out, seed=3)
    return manifest, FeatureCache(out / "cache")


def overfit_config(**kw):
    base = dict(steps=200, batch_size=1, max_decoder_steps=300, learning_rate=6e-3,
                prenet_dropout=0.0, kl_weight=0.0, log_every=20)
    base.update(kw)
    return TeacherConfig(**base)


def test_memorizes_single_utterance(one_utterance, tmp_path):
    manifest, cache = one_utterance
    ck = train_teacher(manifest, manifest, overfit_config(), seed=1,
                       workdir=tmp_path / "ck", cache=cache)
    log = json.loads((tmp_path / "ck" / "training_log.json").read_text())
    losses = log["losses"]
    assert losses[-1]["mel_l1"] < 0.10 * losses[0]["mel_l1"]


def test_training_deterministic(one_utterance, tmp_path):
    manifest, cache = one_utterance
    logs = []
    for run in ("a", "b"):
        train_teacher(manifest, manifest, overfit_config(steps=30), seed=5,
                      workdir=tmp_path / run, cache=cache)
        logs.append(json.loads((tmp_path / run / "training_log.json").read_text()))
    assert logs[0]["losses"] == logs[1]["losses"]


def test_no_style_input_anywhere(one_utterance, tmp_path):
    manifest, cache = one_utterance
    ck = train_teacher(manifest, manifest, overfit_config(steps=2), seed=2,
                       workdir=tmp_path / "ck", cache=cache)
    assert not hasattr(ck.model, "style_embed")
    assert "style" not in inspect.signature(synthesize_mel).parameters
    assert all("style" not in name for name, _ in ck.model.named_parameters())


def test_max_steps_invariant(one_utterance, tmp_path):
    manifest, cache = one_utterance
    with pytest.raises(ValueError, match="max_decoder_steps"):
        train_teacher(manifest, manifest, overfit_config(max_decoder_steps=10),
                      seed=1, workdir=tmp_path / "ck", cache=cache)


def test_checkpoint_roundtrip_and_determinism(one_utterance, tmp_path):
    manifest, cache = one_utterance
    ck = train_teacher(manifest, manifest, overfit_config(steps=5), seed=4,
                       workdir=tmp_path / "ck", cache=cache)
    u = manifest.utterances[0]
    first = synthesize_mel(ck, list(u.text), u.speaker_id, u.accent_id)
    reloaded = TeacherCheckpoint.load(tmp_path / "ck")
    second = synthesize_mel(reloaded, list(u.text), u.speaker_id, u.accent_id)
    assert np.array_equal(first.mel, second.mel)
    assert np.array_equal(first.attention, second.attention)
    assert first.stop_step == second.stop_step


def test_schema_mismatch_rejected(one_utterance, tmp_path):
    manifest, cache = one_utterance
    train_teacher(manifest, manifest, overfit_config(steps=2), seed=4,
                  workdir=tmp_path / "ck", cache=cache)
    cfg_path = tmp_path / "ck" / "config.json"
    doc = json.loads(cfg_path.read_text())
    doc["schema_version"] = 999
    cfg_path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="schema"):
        TeacherCheckpoint.load(tmp_path / "ck")


def test_runaway_flagged(one_utterance, tmp_path):
    manifest, cache = one_utterance
    ck = train_teacher(manifest, manifest, overfit_config(steps=2), seed=4,
                       workdir=tmp_path / "ck", cache=cache)
    u = manifest.utterances[0]
    syn = synthesize_mel(ck, list(u.text), u.speaker_id, u.accent_id, max_steps=3)
    assert syn.runaway and syn.stop_step is None
    assert syn.num_frames == 3 * ck.config.reduction


def test_unseen_speaker_rejected(one_utterance, tmp_path):
    manifest, cache = one_utterance
    ck = train_teacher(manifest, manifest, overfit_config(steps=2), seed=4,
                       workdir=tmp_path / "ck", cache=cache)
    with pytest.raises(CheckpointError, match="speaker"):
        synthesize_mel(ck, ["t", "a", "."], "ghost", "A0")
