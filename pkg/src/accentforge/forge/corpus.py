"""Corpus generation: render a composition of (speaker, style, count) rows
into WAV files, ground-truth prosody records, and a manifest."""
from __future__ import annotations

import logging
from pathlib import Path

from ..audio import write_wav
from ..data import CorpusManifest, ManifestError, SpeakerEntry, Utterance
from ..features import save_prosody
from ..util import stable_seed
from .profile import ForgeProfile
from .render import render_utterance
from .texts import make_sentence

import numpy as np

log = logging.getLogger("accentforge.forge")


def forge_corpus(profile: ForgeProfile, composition, out_dir, seed: int,
                 corpus_name: str = "corpus") -> CorpusManifest:
    """Render one corpus and write it under out_dir.

    composition: iterable of (speaker_id, style_id, count). Every speaker is
    rendered only in their native accent. Deterministic: the same profile,
    composition, and seed produce byte-identical output.
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)

    speaker_table = {}
    utterances = []
    for speaker_id, style_id, count in composition:
        if speaker_id not in profile.speakers:
            raise ManifestError(f"composition references unknown speaker {speaker_id!r}")
        if style_id not in profile.styles:
            raise ManifestError(f"composition references unknown style {style_id!r}")
        if count < 0:
            raise ManifestError("composition counts must be >= 0")
        spk = profile.speakers[speaker_id]
        accent = profile.accents[spk.native_accent]
        style = profile.styles[style_id]
        speaker_table[speaker_id] = SpeakerEntry(speaker_id, spk.native_accent, spk.voice_class)

        text_rng = np.random.default_rng(
            np.random.SeedSequence([seed, stable_seed(corpus_name, speaker_id, style_id)]))
        for k in range(count):
            tokens = make_sentence(text_rng, profile, style_id)
            utt_id = f"{speaker_id}-{style_id}-{k:04d}"
            utt_seed = stable_seed(seed, corpus_name, utt_id)
            result = render_utterance(tokens, spk, accent, style, profile, seed=utt_seed)
            wav_rel = f"audio/{utt_id}.wav"
            prosody_rel = f"audio/{utt_id}.prosody.jsonl"
            write_wav(out_dir / wav_rel, result.wave)
            save_prosody(out_dir / prosody_rel, result.prosody, tokens=tokens)
            utterances.append(Utterance(
                id=utt_id, text=tuple(tokens), speaker_id=speaker_id,
                accent_id=spk.native_accent, style_id=style_id,
                audio_path=wav_rel, provenance="natural",
                prosody_path=prosody_rel))

    manifest = CorpusManifest(utterances, speaker_table, root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    log.info("forged %d utterances into %s", len(manifest), out_dir)
    return manifest
