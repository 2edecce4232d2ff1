import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accentforge.data import (CorpusManifest, ManifestError, SpeakerEntry,
                              Utterance, balance_by_upsampling, load_manifest,
                              split)


def make_manifest(counts, accents=None, tmp=None):
    """counts: {speaker: n}; accents: {speaker: accent}."""
    accents = accents or {}
    table = {s: SpeakerEntry(s, accents.get(s, "A0"), "low") for s in counts}
    utts = []
    for s, n in counts.items():
        for k in range(n):
            utts.append(Utterance(
                id=f"{s}-{k:03d}", text=("t", "a", "."), speaker_id=s,
                accent_id=accents.get(s, "A0"), style_id="neutral",
                audio_path=f"audio/{s}-{k:03d}.wav", provenance="natural"))
    return CorpusManifest(utts, table, root=tmp)


def test_manifest_roundtrip(small_corpus, tmp_path):
    path = small_corpus.root / "manifest.jsonl"
    loaded = load_manifest(path)
    assert len(loaded) == len(small_corpus)
    out = tmp_path / "again.jsonl"
    loaded.save(out)
    assert out.read_bytes() == path.read_bytes()


def test_duplicate_id_named(tmp_path):
    m = make_manifest({"s1": 2})
    lines = [json.dumps({"kind": "speaker", "speaker_id": "s1",
                         "native_accent": "A0", "voice_class": "low"})]
    rec = {"kind": "utterance", "id": "dup", "text": ["a"], "speaker_id": "s1",
           "accent_id": "A0", "style_id": "neutral", "audio_path": "x.wav",
           "sample_rate": 16000, "provenance": "natural", "prosody_path": None}
    lines += [json.dumps(rec), json.dumps(rec)]
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines))
    with pytest.raises(ManifestError, match="dup"):
        load_manifest(path, check_audio=False)


def test_unknown_speaker_rejected():
    with pytest.raises(ManifestError, match="unknown speaker"):
        CorpusManifest([Utterance(id="u1", text=("a",), speaker_id="ghost",
                                  accent_id="A0", style_id="neutral",
                                  audio_path="x.wav", provenance="natural")], {})


def test_missing_audio_rejected(tmp_path):
    m = make_manifest({"s1": 1})
    path = tmp_path / "m.jsonl"
    m.save(path)
    with pytest.raises(ManifestError, match="unreadable audio"):
        load_manifest(path)


def test_balance_counts():
    m = make_manifest({"s1": 10, "s2": 4}, accents={"s1": "A0", "s2": "A1"})
    out = balance_by_upsampling(m, "A0")
    counts = out.per_speaker_counts()
    assert counts == {"s1": 10, "s2": 10}
    s2 = [u for u in out if u.speaker_id == "s2"]
    originals = [u for u in s2 if "#r" not in u.id]
    copies = [u.id for u in s2 if "#r" in u.id]
    assert len(originals) == 4 and len(copies) == 6
    # two full repeats, then a prefix, original order preserved
    assert copies == [f"s2-{k:03d}#r1" for k in range(4)] + ["s2-000#r2", "s2-001#r2"]


def test_balance_fixed_point():
    m = make_manifest({"s1": 5, "s2": 5}, accents={"s1": "A0", "s2": "A1"})
    out = balance_by_upsampling(m, "A0")
    assert [u.id for u in out] == [u.id for u in m]


def test_balance_empty_rejected():
    m = make_manifest({})
    with pytest.raises(ManifestError):
        balance_by_upsampling(m, "A0")


def test_balance_invariant_core_shape():
    counts = {f"a0_{i}": 30 for i in range(3)}
    counts.update({f"a1_{i}": 12 for i in range(2)})
    accents = {s: ("A0" if s.startswith("a0") else "A1") for s in counts}
    out = balance_by_upsampling(make_manifest(counts, accents), "A0")
    got = out.per_speaker_counts()
    dominant_max = max(got[s] for s in counts if s.startswith("a0"))
    non_dominant_min = min(got[s] for s in counts if s.startswith("a1"))
    assert non_dominant_min == dominant_max == 30


@given(st.dictionaries(st.sampled_from(["p", "q", "r"]),
                       st.integers(min_value=1, max_value=17), min_size=2))
@settings(max_examples=25, deadline=None)
def test_balance_preserves_text_multiplicity_ratio(counts):
    speakers = sorted(counts)
    accents = {s: ("A0" if i == 0 else "A1") for i, s in enumerate(speakers)}
    m = make_manifest(counts, accents)
    out = balance_by_upsampling(m, "A0")
    for s in speakers[1:]:
        originals = [u.id.split("#")[0] for u in out if u.speaker_id == s]
        base = {u.id for u in m if u.speaker_id == s}
        # every copy points back at an original record of the same speaker
        assert set(originals) <= base


def test_split_all_train():
    m = make_manifest({"s1": 7, "s2": 5})
    train, val, test = split(m, (1.0, 0.0, 0.0), seed=3)
    assert len(train) == 12 and len(val) == 0 and len(test) == 0


def test_split_deterministic():
    m = make_manifest({"s1": 20, "s2": 20})
    a = split(m, (0.8, 0.1, 0.1), seed=7)
    b = split(m, (0.8, 0.1, 0.1), seed=7)
    for pa, pb in zip(a, b):
        assert [u.id for u in pa] == [u.id for u in pb]


def test_split_exact_sizes_when_divisible():
    m = make_manifest({"s1": 50, "s2": 50})
    train, val, test = split(m, (0.8, 0.1, 0.1), seed=1)
    assert (len(train), len(val), len(test)) == (80, 10, 10)


def test_split_partitions():
    m = make_manifest({"s1": 13, "s2": 9, "s3": 4})
    train, val, test = split(m, (0.6, 0.2, 0.2), seed=11)
    ids = [u.id for part in (train, val, test) for u in part]
    assert len(ids) == len(set(ids))
    assert set(ids) <= {u.id for u in m}


def test_split_small_stratum_warns_to_train(caplog):
    m = make_manifest({"s1": 2})
    with caplog.at_level("WARNING"):
        train, val, test = split(m, (0.5, 0.25, 0.25), seed=5)
    assert len(train) == 2 and len(val) == 0 and len(test) == 0
    assert any("too small" in rec.message for rec in caplog.records)
