"""Forge profiles: the latent parameter tables behind generated corpora.

A profile pins down every accent, speaker, style, and phone parameter used
by the renderer, so any quantity measured from forged audio can be checked
against the value that generated it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

VOWEL = "vowel"
FRICATIVE = "fricative"
STOP = "stop"
NASAL = "nasal"
PAUSE = "pause"

PUNCTUATION = (".", ",")

# Voice-class boundary between the two coarse speaker groups (Hz).
VOICE_CLASS_SPLIT_HZ = 145.0


@dataclass(frozen=True)
class AccentParams:
    accent_id: str
    vowel_duration_mult: float
    f0_slope: float              # Hz per second, declination
    f2_shift: float              # multiplier on vowel F2
    final_lengthening: float     # multiplier on the utterance-final vowel

    def validate(self) -> None:
        if self.vowel_duration_mult <= 0 or self.f2_shift <= 0 or self.final_lengthening <= 0:
            raise ValueError(f"accent {self.accent_id}: factors must be > 0")
        if not (abs(self.f0_slope) < 1e6):
            raise ValueError(f"accent {self.accent_id}: f0_slope must be finite")


@dataclass(frozen=True)
class SpeakerParams:
    speaker_id: str
    base_f0: float               # Hz
    formant_scale: float
    spectral_tilt: float         # dB per octave, typically negative
    native_accent: str

    def validate(self) -> None:
        if not 60.0 <= self.base_f0 <= 400.0:
            raise ValueError(f"speaker {self.speaker_id}: base_f0 outside [60, 400]")
        if not 0.8 <= self.formant_scale <= 1.25:
            raise ValueError(f"speaker {self.speaker_id}: formant_scale outside [0.8, 1.25]")

    @property
    def voice_class(self) -> str:
        return "high" if self.base_f0 >= VOICE_CLASS_SPLIT_HZ else "low"


@dataclass(frozen=True)
class StyleParams:
    style_id: str
    rate_mult: float
    f0_range_mult: float
    pause_prob: float

    def validate(self) -> None:
        if self.rate_mult <= 0:
            raise ValueError(f"style {self.style_id}: rate_mult must be > 0")
        if not 0.0 <= self.pause_prob <= 1.0:
            raise ValueError(f"style {self.style_id}: pause_prob outside [0, 1]")


@dataclass(frozen=True)
class Phone:
    symbol: str
    kind: str                    # vowel | fricative | stop | nasal | pause
    base_ms: float
    f1: float = 0.0              # vowels and nasals
    f2: float = 0.0
    noise_hz: float = 0.0        # fricative center / stop burst center
    amplitude: float = 1.0


@dataclass
class ForgeProfile:
    accents: dict[str, AccentParams]
    speakers: dict[str, SpeakerParams]
    styles: dict[str, StyleParams]
    phones: dict[str, Phone]
    seed: int = 0

    def validate(self) -> None:
        for a in self.accents.values():
            a.validate()
        for s in self.speakers.values():
            s.validate()
            if s.native_accent not in self.accents:
                raise ValueError(f"speaker {s.speaker_id}: unknown accent {s.native_accent}")
        for st in self.styles.values():
            st.validate()
        kinds = [p.kind for p in self.phones.values()]
        if kinds.count(VOWEL) < 5:
            raise ValueError("phone inventory needs at least 5 vowels")
        if sum(kinds.count(k) for k in (FRICATIVE, STOP, NASAL)) < 5:
            raise ValueError("phone inventory needs at least 5 consonants")
        if kinds.count(PAUSE) != 1:
            raise ValueError("phone inventory needs exactly one pause symbol")

    def vowels(self) -> list[str]:
        return [p.symbol for p in self.phones.values() if p.kind == VOWEL]

    def consonants(self) -> list[str]:
        return [p.symbol for p in self.phones.values() if p.kind in (FRICATIVE, STOP, NASAL)]

    def pause_symbol(self) -> str:
        return next(p.symbol for p in self.phones.values() if p.kind == PAUSE)

    def is_voiced(self, symbol: str) -> bool:
        return self.phones[symbol].kind in (VOWEL, NASAL)

    def token_table(self) -> list[str]:
        """Stable token id table: phones then punctuation, sorted."""
        return sorted(self.phones.keys()) + list(PUNCTUATION)

    def save(self, path) -> None:
        doc = {
            "seed": self.seed,
            "accents": [asdict(a) for a in self.accents.values()],
            "speakers": [asdict(s) for s in self.speakers.values()],
            "styles": [asdict(s) for s in self.styles.values()],
            "phones": [asdict(p) for p in self.phones.values()],
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ForgeProfile":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        prof = cls(
            accents={a["accent_id"]: AccentParams(**a) for a in doc["accents"]},
            speakers={s["speaker_id"]: SpeakerParams(**s) for s in doc["speakers"]},
            styles={s["style_id"]: StyleParams(**s) for s in doc["styles"]},
            phones={p["symbol"]: Phone(**p) for p in doc["phones"]},
            seed=int(doc.get("seed", 0)),
        )
        prof.validate()
        return prof


def default_phones() -> dict[str, Phone]:
    phones = [
        Phone("a", VOWEL, 125.0, f1=700.0, f2=1220.0),
        Phone("e", VOWEL, 115.0, f1=530.0, f2=1840.0),
        Phone("i", VOWEL, 105.0, f1=300.0, f2=2290.0),
        Phone("o", VOWEL, 120.0, f1=450.0, f2=800.0),
        Phone("u", VOWEL, 110.0, f1=325.0, f2=700.0),
        Phone("t", STOP, 70.0, noise_hz=4000.0, amplitude=0.6),
        Phone("k", STOP, 75.0, noise_hz=1800.0, amplitude=0.6),
        Phone("s", FRICATIVE, 95.0, noise_hz=5200.0, amplitude=0.35),
        Phone("f", FRICATIVE, 90.0, noise_hz=3100.0, amplitude=0.3),
        Phone("n", NASAL, 85.0, f1=250.0, f2=1000.0, amplitude=0.5),
        Phone("_", PAUSE, 180.0),
    ]
    return {p.symbol: p for p in phones}


def default_accents() -> dict[str, AccentParams]:
    table = [
        AccentParams("A0", 1.00, -10.0, 1.00, 1.00),
        AccentParams("A1", 1.25, -20.0, 1.08, 1.12),
        AccentParams("A2", 0.85, -5.0, 0.94, 1.05),
        AccentParams("A3", 1.10, -15.0, 1.12, 1.08),
    ]
    return {a.accent_id: a for a in table}


def default_styles() -> dict[str, StyleParams]:
    table = [
        StyleParams("neutral", 1.00, 1.0, 0.6),
        StyleParams("news", 0.92, 1.3, 0.9),
    ]
    return {s.style_id: s for s in table}


def default_speakers() -> dict[str, SpeakerParams]:
    """Desk-scale speaker roster.

    Base F0 grids are matched across accents (each accent mixes low and high
    voice classes) so no accent is identifiable from voice level alone.
    """
    rows = [
        # core corpus, dominant accent
        ("a0x01", 98.0, 0.96, -6.0, "A0"), ("a0x02", 104.0, 1.10, -4.0, "A0"),
        ("a0x03", 112.0, 0.88, -8.0, "A0"), ("a0x04", 120.0, 1.04, -5.0, "A0"),
        ("a0x05", 128.0, 0.92, -7.0, "A0"), ("a0x06", 136.0, 1.16, -3.0, "A0"),
        ("a0x07", 150.0, 1.00, -6.0, "A0"), ("a0x08", 156.0, 0.86, -4.0, "A0"),
        ("a0x09", 164.0, 1.12, -7.0, "A0"), ("a0x10", 172.0, 0.94, -5.0, "A0"),
        ("a0x11", 178.0, 1.06, -8.0, "A0"), ("a0x12", 186.0, 1.20, -3.0, "A0"),
        # core corpus, transfer-source accents
        ("a1x01", 100.0, 0.98, -5.0, "A1"), ("a1x02", 126.0, 1.08, -7.0, "A1"),
        ("a1x03", 154.0, 0.90, -4.0, "A1"), ("a1x04", 180.0, 1.14, -6.0, "A1"),
        ("a2x01", 106.0, 1.02, -6.0, "A2"), ("a2x02", 130.0, 0.88, -4.0, "A2"),
        ("a2x03", 158.0, 1.10, -7.0, "A2"), ("a2x04", 184.0, 0.96, -5.0, "A2"),
        ("a3x01", 102.0, 0.94, -7.0, "A3"), ("a3x02", 124.0, 1.12, -5.0, "A3"),
        ("a3x03", 152.0, 1.04, -6.0, "A3"), ("a3x04", 176.0, 0.86, -4.0, "A3"),
        # news corpus, dominant accent
        ("nwx01", 99.0, 1.00, -5.0, "A0"), ("nwx02", 109.0, 1.08, -6.0, "A0"),
        ("nwx03", 121.0, 0.92, -4.0, "A0"), ("nwx04", 133.0, 1.14, -7.0, "A0"),
        ("nwx05", 137.0, 0.88, -5.0, "A0"), ("nwx06", 151.0, 1.02, -6.0, "A0"),
        ("nwx07", 159.0, 1.10, -3.0, "A0"), ("nwx08", 167.0, 0.90, -7.0, "A0"),
        ("nwx09", 175.0, 1.06, -5.0, "A0"), ("nwx10", 183.0, 0.98, -6.0, "A0"),
    ]
    return {r[0]: SpeakerParams(*r) for r in rows}


def default_profile(seed: int = 0) -> ForgeProfile:
    prof = ForgeProfile(
        accents=default_accents(),
        speakers=default_speakers(),
        styles=default_styles(),
        phones=default_phones(),
        seed=seed,
    )
    prof.validate()
    return prof


# Speakers whose corpus entries skew toward the news style; the default
# transfer-target list in the pipeline.
NEWS_HEAVY_SPEAKERS = tuple(f"nwx{i:02d}" for i in range(1, 9))


def default_core_composition() -> list[tuple[str, str, int]]:
    """(speaker, style, count) rows for the multi-accent core corpus."""
    rows = []
    for sid in (f"a0x{i:02d}" for i in range(1, 13)):
        rows.append((sid, "neutral", 300))
    for acc in ("a1", "a2", "a3"):
        for i in range(1, 5):
            rows.append((f"{acc}x{i:02d}", "neutral", 120))
    return rows


def default_news_composition() -> list[tuple[str, str, int]]:
    """(speaker, style, count) rows for the news-style corpus."""
    rows = []
    for sid in (f"nwx{i:02d}" for i in range(1, 11)):
        if sid in NEWS_HEAVY_SPEAKERS:
            rows.append((sid, "news", 96))
            rows.append((sid, "neutral", 24))
        else:
            rows.append((sid, "news", 24))
            rows.append((sid, "neutral", 96))
    return rows
