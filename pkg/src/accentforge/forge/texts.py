"""Seeded phrase generation over the forge phone inventory.

Sentences are consonant-vowel syllable strings with sentence-final
punctuation. News-style sentences carry a mid-sentence comma (a two-clause
shape); neutral sentences are a single clause. Every sentence contains at
least one front vowel so formant measurements are always possible.
"""
from __future__ import annotations

import numpy as np

from .profile import ForgeProfile

# Vowels with resonances clean enough to measure F1 (mid-height front, where
# several harmonics sample the resonance) and F2 (front/open vowels).
F1_MEASURABLE_VOWELS = ("e",)
F2_MEASURABLE_VOWELS = ("a", "e", "i")


def make_sentence(rng: np.random.Generator, profile: ForgeProfile, style_id: str,
                  n_syllables: int | None = None) -> list[str]:
    vowels = sorted(profile.vowels())
    consonants = sorted(profile.consonants())
    if n_syllables is None:
        n_syllables = int(rng.integers(6, 11))
    syllables = []
    for _ in range(n_syllables):
        c = consonants[int(rng.integers(len(consonants)))]
        v = vowels[int(rng.integers(len(vowels)))]
        syllables.append([c, v])
    if not any(s[1] in F1_MEASURABLE_VOWELS for s in syllables):
        k = int(rng.integers(n_syllables))
        syllables[k][1] = F1_MEASURABLE_VOWELS[0]
    tokens: list[str] = []
    comma_after = n_syllables // 2 if style_id == "news" else -1
    for i, syl in enumerate(syllables):
        tokens.extend(syl)
        if i + 1 == comma_after:
            tokens.append(",")
    tokens.append(".")
    return tokens


def sentence_batch(seed: int, profile: ForgeProfile, style_id: str, count: int,
                   tag: str = "") -> list[list[str]]:
    """Deterministic batch of sentences, independent of any other batch."""
    rng = np.random.default_rng([seed, _tag_seed(style_id), _tag_seed(tag)])
    return [make_sentence(rng, profile, style_id) for _ in range(count)]


def make_stress_sentence(rng: np.random.Generator, profile: ForgeProfile) -> list[str]:
    """Long, repetitive, comma-heavy sentences used to probe decoder stability."""
    vowels = sorted(profile.vowels())
    consonants = sorted(profile.consonants())
    n_syllables = int(rng.integers(14, 25))
    tokens: list[str] = []
    i = 0
    while i < n_syllables:
        c = consonants[int(rng.integers(len(consonants)))]
        v = vowels[int(rng.integers(len(vowels)))]
        run = 1
        if rng.random() < 0.35:
            run = int(rng.integers(3, 7))   # stuttered same-syllable runs
        for _ in range(min(run, n_syllables - i)):
            tokens.extend((c, v))
            i += 1
        if i < n_syllables and rng.random() < 0.3:
            tokens.append(",")
    if not any(t in F1_MEASURABLE_VOWELS for t in tokens):
        tokens[1] = F1_MEASURABLE_VOWELS[0]
    tokens.append(".")
    return tokens


def stress_batch(seed: int, profile: ForgeProfile, count: int) -> list[list[str]]:
    rng = np.random.default_rng([seed, _tag_seed("stress")])
    return [make_stress_sentence(rng, profile) for _ in range(count)]


def neutral_variant(tokens: list[str]) -> list[str]:
    """Strip mid-sentence commas: the neutral-shaped twin of a news sentence."""
    return [t for i, t in enumerate(tokens) if t != "," or i == len(tokens) - 1]


def news_variant(tokens: list[str]) -> list[str]:
    """Insert a mid-sentence comma: the news-shaped twin of a neutral sentence."""
    base = neutral_variant(tokens)
    body, final = base[:-1], base[-1:]
    # comma lands after the middle syllable boundary (even phone index)
    mid = (len(body) // 2) // 2 * 2
    if mid <= 0 or mid >= len(body):
        return base[:-1] + [","] + final
    return body[:mid] + [","] + body[mid:] + final


def _tag_seed(tag: str) -> int:
    return int.from_bytes(tag.encode("utf-8"), "little") % (2**31) if tag else 0
