"""Corpus manifests: loading, validation, balancing, and splits.

A manifest is a line-delimited UTF-8 file of JSON records: speaker rows
first (the speaker table), then one row per utterance in corpus order.
Audio and prosody paths are stored relative to the manifest's directory.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, read_wav
from .features import ProsodyTrack, load_prosody
from .util import stable_seed

log = logging.getLogger("accentforge.data")

PROVENANCES = ("natural", "synthetic")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerEntry:
    speaker_id: str
    native_accent: str
    voice_class: str


@dataclass(frozen=True)
class Utterance:
    id: str
    text: tuple[str, ...]
    speaker_id: str
    accent_id: str
    style_id: str
    audio_path: str                  # relative to the manifest directory
    provenance: str
    sample_rate: int = SAMPLE_RATE
    prosody_path: str | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ManifestError(f"utterance {self.id}: bad provenance {self.provenance!r}")
        if self.sample_rate != SAMPLE_RATE:
            raise ManifestError(f"utterance {self.id}: sample_rate must be {SAMPLE_RATE}")

    def load_wave(self, root: Path) -> np.ndarray:
        return read_wav(Path(root) / self.audio_path)

    def load_ground_truth(self, root: Path) -> ProsodyTrack | None:
        if self.prosody_path is None:
            return None
        track, _ = load_prosody(Path(root) / self.prosody_path)
        return track


class CorpusManifest:
    """Immutable-by-convention container passed between pipeline stages."""

    def __init__(self, utterances, speaker_table, root: Path | None = None):
        self.utterances: list[Utterance] = list(utterances)
        self.speaker_table: dict[str, SpeakerEntry] = dict(speaker_table)
        self.root = Path(root) if root is not None else None
        self._validate()

    def _validate(self):
        seen = set()
        for u in self.utterances:
            if u.id in seen:
                raise ManifestError(f"duplicate utterance id {u.id!r}")
            seen.add(u.id)
            if u.speaker_id not in self.speaker_table:
                raise ManifestError(f"utterance {u.id!r}: unknown speaker {u.speaker_id!r}")

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def accents(self) -> set[str]:
        return {u.accent_id for u in self.utterances}

    @property
    def styles(self) -> set[str]:
        return {u.style_id for u in self.utterances}

    def counts(self, speaker_id=None, accent_id=None, style_id=None) -> int:
        n = 0
        for u in self.utterances:
            if speaker_id is not None and u.speaker_id != speaker_id:
                continue
            if accent_id is not None and u.accent_id != accent_id:
                continue
            if style_id is not None and u.style_id != style_id:
                continue
            n += 1
        return n

    def per_speaker_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for u in self.utterances:
            out[u.speaker_id] = out.get(u.speaker_id, 0) + 1
        return out

    def subset(self, keep) -> "CorpusManifest":
        return CorpusManifest([u for u in self.utterances if keep(u)],
                              self.speaker_table, self.root)

    def save(self, path) -> Path:
        """Canonical serialization: sorted speaker rows, utterances in order."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = []
        for sid in sorted(self.speaker_table):
            e = self.speaker_table[sid]
            lines.append(json.dumps({"kind": "speaker", "speaker_id": e.speaker_id,
                                     "native_accent": e.native_accent,
                                     "voice_class": e.voice_class}, sort_keys=True))
        for u in self.utterances:
            rec = {"kind": "utterance", "id": u.id, "text": list(u.text),
                   "speaker_id": u.speaker_id, "accent_id": u.accent_id,
                   "style_id": u.style_id, "audio_path": u.audio_path,
                   "sample_rate": u.sample_rate, "provenance": u.provenance,
                   "prosody_path": u.prosody_path}
            lines.append(json.dumps(rec, sort_keys=True))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def load_manifest(path, check_audio: bool = True) -> CorpusManifest:
    """Parse and validate a manifest file."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    speakers: dict[str, SpeakerEntry] = {}
    utterances: list[Utterance] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{lineno}: bad record: {e}") from e
        kind = rec.pop("kind", None)
        if kind == "speaker":
            e = SpeakerEntry(**rec)
            speakers[e.speaker_id] = e
        elif kind == "utterance":
            rec["text"] = tuple(rec["text"])
            utterances.append(Utterance(**rec))
        else:
            raise ManifestError(f"{path}:{lineno}: unknown record kind {kind!r}")
    manifest = CorpusManifest(utterances, speakers, root=path.parent)
    if check_audio:
        for u in manifest:
            if not (manifest.root / u.audio_path).exists():
                raise ManifestError(f"utterance {u.id!r}: unreadable audio {u.audio_path}")
    return manifest


def balance_by_upsampling(manifest: CorpusManifest, dominant_accent: str) -> CorpusManifest:
    """Repeat records of non-dominant-accent speakers until each matches the
    largest dominant-accent speaker.

    Whole-list repeats first, then a prefix, preserving record order; copies
    get a #r<n> id suffix so ids stay unique. Audio is shared, not copied.
    """
    if len(manifest) == 0:
        raise ManifestError("cannot balance an empty manifest")
    counts = manifest.per_speaker_counts()
    dominant = [sid for sid, e in manifest.speaker_table.items()
                if e.native_accent == dominant_accent and counts.get(sid, 0) > 0]
    if not dominant:
        raise ManifestError(f"no utterances for dominant accent {dominant_accent!r}")
    target = max(counts[sid] for sid in dominant)

    out: list[Utterance] = []
    by_speaker: dict[str, list[Utterance]] = {}
    for u in manifest:
        by_speaker.setdefault(u.speaker_id, []).append(u)
    for u in manifest:
        out.append(u)
    for sid, records in by_speaker.items():
        if manifest.speaker_table[sid].native_accent == dominant_accent:
            continue
        have = len(records)
        if have >= target:
            continue
        need = target - have
        for k in range(need):
            src = records[k % have]
            out.append(replace(src, id=f"{src.id}#r{k // have + 1}"))
    return CorpusManifest(out, manifest.speaker_table, manifest.root)


def split(manifest: CorpusManifest, fractions, seed: int):
    """Deterministic (train, validation, test) split, stratified per
    (speaker, style).

    Strata too small to populate the validation/test shares go entirely to
    train with a warning.
    """
    f_train, f_val, f_test = fractions
    if min(f_train, f_val, f_test) < 0 or f_train + f_val + f_test > 1 + 1e-9:
        raise ManifestError("fractions must be nonnegative and sum to at most 1")
    strata: dict[tuple, list[Utterance]] = {}
    for u in manifest:
        strata.setdefault((u.speaker_id, u.style_id), []).append(u)

    parts: tuple[list[Utterance], ...] = ([], [], [])
    for key in sorted(strata):
        records = strata[key]
        order = np.random.default_rng(
            np.random.SeedSequence([seed, stable_seed(*key)])).permutation(len(records))
        n = len(records)
        n_val = int(f_val * n)
        n_test = int(f_test * n)
        exhaustive = abs(f_train + f_val + f_test - 1.0) < 1e-9
        n_train = n - n_val - n_test if exhaustive else int(f_train * n)
        if n_val == 0 and n_test == 0 and (f_val > 0 or f_test > 0):
            log.warning("stratum %s too small to split (%d records); assigning to train", key, n)
            n_train, n_val, n_test = n, 0, 0
        for rank, idx in enumerate(order):
            if rank < n_train:
                parts[0].append(records[idx])
            elif rank < n_train + n_val:
                parts[1].append(records[idx])
            elif rank < n_train + n_val + n_test:
                parts[2].append(records[idx])

    id_order = {u.id: i for i, u in enumerate(manifest)}
    return tuple(CorpusManifest(sorted(p, key=lambda u: id_order[u.id]),
                                manifest.speaker_table, manifest.root)
                 for p in parts)
