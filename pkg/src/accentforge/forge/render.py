"""Deterministic parametric text-to-audio rendering.

Classical source-filter synthesis at 16 kHz: an impulse-train source for
voiced phones and a noise source for unvoiced ones, driven through a
two-resonator formant filter per phone. Accent, speaker, and style
parameters enter the signal in ways the feature extractors can measure
back out (F0 declination, duration multipliers, formant scaling).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from ..audio import FRAME_MS, HOP, SAMPLE_RATE, WINDOW
from ..features import ProsodyTrack
from .profile import (FRICATIVE, NASAL, PAUSE, PUNCTUATION, STOP, VOWEL,
                      AccentParams, ForgeProfile, SpeakerParams, StyleParams)

SHORT_GAP_MS = 25.0          # punctuation rendered without a drawn pause
VOWEL_SWING = 0.04           # relative F0 rise-fall per vowel
F1_BANDWIDTH = 90.0
F2_BANDWIDTH = 120.0
BURST_BANDWIDTH = 500.0
FRICATIVE_BANDWIDTH = 700.0
EDGE_RAMP = 64               # samples of cosine ramp at phone edges
PEAK_LEVEL = 0.9


class RenderError(ValueError):
    pass


@dataclass
class RenderResult:
    wave: np.ndarray
    prosody: ProsodyTrack
    sample_rate: int = SAMPLE_RATE


def _resonator(freq: float, bandwidth: float):
    theta = 2.0 * np.pi * freq / SAMPLE_RATE
    r = np.exp(-np.pi * bandwidth / SAMPLE_RATE)
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    gain = (1.0 - r) * abs(1.0 - r * np.exp(-2j * theta))
    return np.array([gain]), a


def token_durations_ms(tokens: list[str], accent: AccentParams, style: StyleParams,
                       profile: ForgeProfile, pause_draws: np.ndarray) -> np.ndarray:
    """Per-token durations in milliseconds before frame quantization."""
    pause_base = profile.phones[profile.pause_symbol()].base_ms
    final_vowel = _final_vowel_index(tokens, profile)
    out = np.zeros(len(tokens))
    for i, tok in enumerate(tokens):
        if tok in PUNCTUATION:
            drawn = bool(pause_draws[i])
            out[i] = (pause_base if drawn else SHORT_GAP_MS) * style.rate_mult
            continue
        ph = profile.phones[tok]
        ms = ph.base_ms * style.rate_mult
        if ph.kind == VOWEL:
            ms *= accent.vowel_duration_mult
            if i == final_vowel:
                ms *= accent.final_lengthening
        out[i] = ms
    return out


def expected_frames(tokens: list[str], accent: AccentParams, style: StyleParams,
                    profile: ForgeProfile) -> float:
    """Expected rendered length in frames, pause draws taken in expectation."""
    draws = np.ones(len(tokens), dtype=bool)
    with_pause = token_durations_ms(tokens, accent, style, profile, draws)
    without = token_durations_ms(tokens, accent, style, profile, ~draws)
    p = style.pause_prob
    total = 0.0
    for i, tok in enumerate(tokens):
        if tok in PUNCTUATION:
            total += p * _ms_to_frames(with_pause[i]) + (1 - p) * _ms_to_frames(without[i])
        else:
            total += _ms_to_frames(with_pause[i])
    return total


def _ms_to_frames(ms: float) -> int:
    return max(1, int(round(ms / FRAME_MS)))


def _final_vowel_index(tokens: list[str], profile: ForgeProfile) -> int:
    for i in range(len(tokens) - 1, -1, -1):
        tok = tokens[i]
        if tok not in PUNCTUATION and profile.phones[tok].kind == VOWEL:
            return i
    return -1


def render_utterance(tokens: list[str], speaker: SpeakerParams, accent: AccentParams,
                     style: StyleParams, profile: ForgeProfile, seed: int) -> RenderResult:
    """Render a token sequence to audio plus ground-truth prosody.

    Deterministic for a given (tokens, parameters, seed). Raises RenderError
    for empty text or tokens outside the inventory.
    """
    if len(tokens) == 0:
        raise RenderError("empty text")
    for i, tok in enumerate(tokens):
        if tok not in PUNCTUATION and tok not in profile.phones:
            raise RenderError(f"unknown phone {tok!r} at position {i}")

    rng = np.random.default_rng(np.random.SeedSequence([abs(int(seed)), 0x5EED]))
    pause_draws = rng.random(len(tokens)) < style.pause_prob

    ms = token_durations_ms(tokens, accent, style, profile, pause_draws)
    frames = np.array([_ms_to_frames(v) for v in ms], dtype=np.int64)
    samples = frames * HOP
    bounds = np.concatenate([[0], np.cumsum(samples)])
    total = int(bounds[-1])

    f0_curve = _f0_contour(tokens, bounds, speaker, accent, style, profile, pause_draws)
    voiced_tok = np.array([tok not in PUNCTUATION and profile.is_voiced(tok)
                           for tok in tokens])
    voiced_mask = np.zeros(total, dtype=bool)
    for i in range(len(tokens)):
        if voiced_tok[i]:
            voiced_mask[bounds[i]:bounds[i + 1]] = True

    pulses = _impulse_train(f0_curve, voiced_mask)
    noise = rng.standard_normal(total) * 0.25

    wave = np.zeros(total)
    state = {"zi1": np.zeros(2), "zi2": np.zeros(2)}
    for i, tok in enumerate(tokens):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        if tok in PUNCTUATION:
            state["zi1"][:] = 0.0
            state["zi2"][:] = 0.0
            continue
        seg = _render_phone(tok, profile, speaker, accent, pulses[lo:hi],
                            noise[lo:hi], state)
        wave[lo:hi] = _edge_ramp(seg)

    wave = _apply_tilt(wave, speaker.spectral_tilt)
    peak = np.max(np.abs(wave))
    if peak > 0:
        wave *= PEAK_LEVEL / peak
    # silent tail so the frame-count formula covers every token exactly
    wave = np.concatenate([wave, np.zeros(WINDOW - HOP)])

    centers = (np.arange(int(frames.sum())) * HOP + HOP // 2).astype(np.int64)
    frame_voiced = voiced_mask[np.minimum(centers, total - 1)]
    gt_f0 = np.where(frame_voiced, f0_curve[np.minimum(centers, total - 1)], 0.0)
    prosody = ProsodyTrack(f0=gt_f0.astype(np.float32), voicing=frame_voiced,
                           durations=frames)
    return RenderResult(wave=wave.astype(np.float64), prosody=prosody)


def _f0_contour(tokens, bounds, speaker, accent, style, profile, pause_draws) -> np.ndarray:
    """Declination with phrase resets: the contour restarts at base_f0 after
    every rendered pause, so long utterances stay inside the trackable range."""
    total = int(bounds[-1])
    t = np.arange(total) / SAMPLE_RATE
    phrase_start = np.zeros(total)
    start = 0.0
    for i, tok in enumerate(tokens):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        phrase_start[lo:hi] = start
        if _is_rendered_pause(tok, profile, bool(pause_draws[i])):
            start = hi / SAMPLE_RATE
    f0 = speaker.base_f0 + accent.f0_slope * (t - phrase_start)
    swing = VOWEL_SWING * speaker.base_f0 * style.f0_range_mult
    for i, tok in enumerate(tokens):
        if tok in PUNCTUATION or profile.phones[tok].kind != VOWEL:
            continue
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        phase = np.linspace(0.0, 1.0, hi - lo, endpoint=False)
        f0[lo:hi] += swing * np.sin(2.0 * np.pi * phase)
    return np.maximum(f0, 62.0)


def _is_rendered_pause(tok: str, profile: ForgeProfile, drawn: bool) -> bool:
    if tok in PUNCTUATION:
        return drawn
    return profile.phones[tok].kind == PAUSE


def _impulse_train(f0_curve: np.ndarray, voiced_mask: np.ndarray) -> np.ndarray:
    phase = np.cumsum(np.where(voiced_mask, f0_curve, 0.0) / SAMPLE_RATE)
    ticks = np.floor(phase)
    hits = np.zeros(len(f0_curve), dtype=bool)
    hits[1:] = ticks[1:] > ticks[:-1]
    hits &= voiced_mask
    out = np.zeros(len(f0_curve))
    # constant power per second regardless of pulse rate
    out[hits] = np.sqrt(120.0 / f0_curve[hits])
    return out


def _render_phone(tok, profile, speaker, accent, pulses, noise, state) -> np.ndarray:
    ph = profile.phones[tok]
    scale = speaker.formant_scale
    n = len(pulses)
    if ph.kind == PAUSE:
        state["zi1"][:] = 0.0
        state["zi2"][:] = 0.0
        return np.zeros(n)
    if ph.kind in (VOWEL, NASAL):
        f1 = ph.f1 * scale
        f2 = ph.f2 * scale * (accent.f2_shift if ph.kind == VOWEL else 1.0)
        b1, a1 = _resonator(f1, F1_BANDWIDTH)
        b2, a2 = _resonator(f2, F2_BANDWIDTH)
        y, state["zi1"] = lfilter(b1, a1, pulses, zi=state["zi1"])
        y, state["zi2"] = lfilter(b2, a2, y, zi=state["zi2"])
        return y * ph.amplitude * 6.0
    if ph.kind == FRICATIVE:
        b, a = _resonator(ph.noise_hz * scale, FRICATIVE_BANDWIDTH)
        y = lfilter(b, a, noise)
        return y * ph.amplitude * 4.0
    if ph.kind == STOP:
        closure = int(n * 0.6)
        burst_len = max(int(n * 0.3), 1)
        y = np.zeros(n)
        b, a = _resonator(ph.noise_hz * scale, BURST_BANDWIDTH)
        y[closure:closure + burst_len] = lfilter(b, a, noise[closure:closure + burst_len]) * 2.0
        state["zi1"][:] = 0.0
        state["zi2"][:] = 0.0
        return y * ph.amplitude * 4.0
    raise RenderError(f"unhandled phone kind {ph.kind}")


def _edge_ramp(seg: np.ndarray) -> np.ndarray:
    n = len(seg)
    k = min(EDGE_RAMP, n // 2)
    if k <= 0:
        return seg
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
    out = seg.copy()
    out[:k] *= ramp
    out[-k:] *= ramp[::-1]
    return out


def _apply_tilt(wave: np.ndarray, tilt_db_per_octave: float) -> np.ndarray:
    if len(wave) == 0:
        return wave
    spec = np.fft.rfft(wave)
    freqs = np.fft.rfftfreq(len(wave), d=1.0 / SAMPLE_RATE)
    ref = np.maximum(freqs, 60.0)
    gain_db = tilt_db_per_octave * np.log2(ref / 1000.0)
    out = np.fft.irfft(spec * 10.0 ** (gain_db / 20.0), n=len(wave))
    return out
