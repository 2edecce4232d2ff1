import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from accentforge.audio import FRAME_MS, read_wav
from accentforge.features import extract_f0
from accentforge.forge import (AccentParams, default_core_composition,
                               default_news_composition, default_profile,
                               expected_frames, forge_corpus, make_sentence,
                               neutral_variant, news_variant, render_utterance,
                               sentence_batch, stress_batch)
from accentforge.forge.render import RenderError


def test_flat_contour_median_f0(profile):
    flat = AccentParams("FLAT", 1.0, 0.0, 1.0, 1.0)
    res = render_utterance(["t", "a", "."], profile.speakers["a0x04"], flat,
                           profile.styles["neutral"], profile, seed=1)
    f0, voiced = extract_f0(res.wave)
    assert voiced.any()
    assert 117.0 <= float(np.median(f0[voiced])) <= 123.0


def test_empty_text_rejected(profile):
    with pytest.raises(RenderError, match="empty text"):
        render_utterance([], profile.speakers["a0x04"], profile.accents["A0"],
                         profile.styles["neutral"], profile, seed=1)


def test_unknown_phone_names_position(profile):
    with pytest.raises(RenderError, match="position 1"):
        render_utterance(["t", "x", "."], profile.speakers["a0x04"],
                         profile.accents["A0"], profile.styles["neutral"],
                         profile, seed=1)


def test_vowel_duration_arithmetic(profile):
    # 120 ms base vowel, duration mult 1.25, rate 0.92 -> 138 ms within a frame
    accent = AccentParams("D", 1.25, -10.0, 1.0, 1.0)
    res = render_utterance(["t", "o", "t", "a", "."], profile.speakers["a0x04"],
                           accent, profile.styles["news"], profile, seed=2)
    vowel_ms = res.prosody.durations[1] * FRAME_MS
    assert abs(vowel_ms - 120 * 1.25 * 0.92) <= FRAME_MS


def test_ground_truth_durations_cover_frames(profile, small_corpus):
    for utt in small_corpus:
        track = utt.load_ground_truth(small_corpus.root)
        from accentforge.features import compute_mel
        mel = compute_mel(utt.load_wave(small_corpus.root))
        assert int(track.durations.sum()) == mel.num_frames


def test_default_composition_dominant_majority():
    core = default_core_composition()
    by_accent = {}
    for speaker, _, count in core:
        accent = "A0" if speaker.startswith("a0") else speaker[:2].upper()
        by_accent[accent] = by_accent.get(accent, 0) + count
    assert all(by_accent["A0"] > v for k, v in by_accent.items() if k != "A0")


def test_empty_composition(tmp_path, profile):
    manifest = forge_corpus(profile, [], tmp_path, seed=1)
    assert len(manifest) == 0


def test_forge_determinism(tmp_path, profile):
    comp = [("a0x04", "neutral", 2), ("a1x01", "neutral", 1)]
    m1 = forge_corpus(profile, comp, tmp_path / "one", seed=5)
    m2 = forge_corpus(profile, comp, tmp_path / "two", seed=5)

    def digest(root):
        h = hashlib.sha256()
        for p in sorted(Path(root).rglob("*")):
            if p.is_file():
                h.update(p.name.encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    assert digest(tmp_path / "one") == digest(tmp_path / "two")
    assert [u.id for u in m1] == [u.id for u in m2]


def test_no_cross_accent_speakers(small_corpus):
    seen = {}
    for u in small_corpus:
        seen.setdefault(u.speaker_id, set()).add(u.accent_id)
    assert all(len(accents) == 1 for accents in seen.values())


def test_unknown_speaker_rejected(tmp_path, profile):
    from accentforge.data import ManifestError
    with pytest.raises(ManifestError, match="unknown speaker"):
        forge_corpus(profile, [("nobody", "neutral", 1)], tmp_path, seed=1)


def test_sentence_shapes(profile):
    rng = np.random.default_rng(0)
    neutral = make_sentence(rng, profile, "neutral")
    news = make_sentence(rng, profile, "news")
    assert "," not in neutral and neutral[-1] == "."
    assert "," in news and news[-1] == "."
    assert any(t == "e" for t in neutral)


def test_style_variants_roundtrip(profile):
    base = sentence_batch(3, profile, "neutral", 1)[0]
    news = news_variant(base)
    assert "," in news
    assert neutral_variant(news) == base


def test_stress_sentences_long(profile):
    for tokens in stress_batch(5, profile, 5):
        assert len([t for t in tokens if t not in (".", ",")]) >= 28


def test_expected_frames_matches_render_scale(profile):
    tokens = sentence_batch(4, profile, "news", 1)[0]
    accent = profile.accents["A1"]
    style = profile.styles["news"]
    expected = expected_frames(tokens, accent, style, profile)
    rendered = [render_utterance(tokens, profile.speakers["a0x04"], accent, style,
                                 profile, seed=s).prosody.durations.sum()
                for s in range(5)]
    assert 0.8 * expected <= float(np.mean(rendered)) <= 1.2 * expected


def test_oracle_f0_and_slope_consistency(profile):
    # spot check; the 200-utterance suite lives in the acceptance tests
    spk = profile.speakers["a1x02"]
    accent = profile.accents["A1"]
    tokens = sentence_batch(8, profile, "neutral", 1, tag="oracle")[0]
    res = render_utterance(tokens, spk, accent, profile.styles["neutral"], profile, seed=3)
    f0, voiced = extract_f0(res.wave)
    gt = res.prosody
    assert abs(float(np.median(f0[voiced])) - float(np.median(gt.f0[gt.voicing]))) <= 3.0
