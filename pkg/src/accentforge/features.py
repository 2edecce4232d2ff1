"""Acoustic and linguistic feature extraction.

Shared by model training and by the evaluation harness: log-mel
spectrograms, autocorrelation F0 with voicing, per-token duration
alignment, and per-token linguistic feature records.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import (FMAX, FMIN, HOP, LOG_FLOOR, N_FFT, N_MELS, SAMPLE_RATE,
                    WINDOW, frame_signal, n_frames)

MEL_VERSION = 1
F0_VERSION = 1

F0_MIN = 60.0
F0_MAX = 400.0
VOICING_THRESHOLD = 0.45        # normalized autocorrelation peak
ENERGY_GATE = 1e-3              # frame RMS below this is silence
LOW_BAND_VOICING_RATIO = 0.3    # voiced frames carry most energy below 1.2 kHz


class AlignmentFailedError(RuntimeError):
    """Raised when an attention matrix cannot produce an alignment."""


@dataclass
class MelSpectrogram:
    """Log mel energies, frames along axis 0."""
    frames: np.ndarray          # (T, N_MELS) float32

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise ValueError(f"mel must be (T, {N_MELS})")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ProsodyTrack:
    """Frame-rate F0/voicing plus per-token frame counts."""
    f0: np.ndarray              # (T,) Hz, 0 where unvoiced
    voicing: np.ndarray         # (T,) bool
    durations: np.ndarray | None = None   # per-token frames, sums to T

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float32)
        self.voicing = np.asarray(self.voicing, dtype=bool)
        if self.f0.shape != self.voicing.shape:
            raise ValueError("f0 and voicing length mismatch")
        if np.any((self.f0 > 0) != self.voicing):
            raise ValueError("f0 must be > 0 exactly on voiced frames")
        if self.durations is not None:
            self.durations = np.asarray(self.durations, dtype=np.int64)
            if int(self.durations.sum()) != len(self.f0):
                raise ValueError("durations must sum to the frame count")

    @property
    def num_frames(self) -> int:
        return len(self.f0)


@dataclass
class LinguisticFeatures:
    """One record per token of the text, plus utterance-level ids.

    Positional features are computed over phone tokens only, so inserting
    punctuation changes local context flags but not the phone position grid.
    """
    tokens: list[str]
    is_punct: np.ndarray
    pos_in_word: np.ndarray     # 0..1 within the syllable
    word_parity: np.ndarray     # alternating syllable flag
    pos_in_utt: np.ndarray      # 0..1 over phones
    is_final: np.ndarray
    punct_before: np.ndarray    # next token is punctuation
    punct_after: np.ndarray     # previous token is punctuation
    style_id: str = "neutral"
    speaker_id: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    def scalar_matrix(self) -> np.ndarray:
        """Per-token scalar features stacked as a float32 matrix."""
        cols = [self.pos_in_word, self.word_parity, self.pos_in_utt,
                self.is_final, self.punct_before, self.punct_after, self.is_punct]
        return np.stack([np.asarray(c, dtype=np.float32) for c in cols], axis=1)


_MEL_BASIS: np.ndarray | None = None


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank() -> np.ndarray:
    """Triangular mel filterbank, (N_MELS, N_FFT // 2 + 1)."""
    global _MEL_BASIS
    if _MEL_BASIS is not None:
        return _MEL_BASIS
    edges = mel_to_hz(np.linspace(hz_to_mel(FMIN), hz_to_mel(FMAX), N_MELS + 2))
    fft_hz = np.linspace(0.0, SAMPLE_RATE / 2.0, N_FFT // 2 + 1)
    basis = np.zeros((N_MELS, len(fft_hz)))
    for m in range(N_MELS):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (fft_hz - lo) / max(mid - lo, 1e-9)
        fall = (hi - fft_hz) / max(hi - mid, 1e-9)
        basis[m] = np.clip(np.minimum(rise, fall), 0.0, None)
    _MEL_BASIS = basis
    return basis


def compute_mel(wave: np.ndarray, sample_rate: int = SAMPLE_RATE) -> MelSpectrogram:
    """Log-mel spectrogram at the shared frame parameters.

    Frame count follows 1 + floor((N - window) / hop); entries are floored
    at log(1e-5).
    """
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {sample_rate}")
    wave = np.asarray(wave, dtype=np.float64)
    if wave.size and (np.max(wave) > 1.0 + 1e-6 or np.min(wave) < -1.0 - 1e-6):
        raise ValueError("waveform samples must lie in [-1, 1]")
    frames = frame_signal(wave) * np.hanning(WINDOW)
    spec = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))
    mel_linear = spec @ mel_filterbank().T
    logmel = np.log(np.maximum(mel_linear, LOG_FLOOR))
    return MelSpectrogram(logmel.astype(np.float32))


def extract_f0(wave: np.ndarray, sample_rate: int = SAMPLE_RATE):
    """Per-frame F0 and voicing via normalized autocorrelation.

    Frames share the mel hop/window. Returns (f0, voicing) with f0 == 0
    exactly where voicing is False.
    """
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {sample_rate}")
    wave = np.asarray(wave, dtype=np.float64)
    # analysis windows are centered on each hop segment, so frame k of the
    # pitch track lines up with frame k of the duration grid
    lead = (WINDOW - HOP) // 2
    padded = np.concatenate([np.zeros(lead), wave])
    t = n_frames(len(wave))
    idx = np.arange(WINDOW)[None, :] + HOP * np.arange(t)[:, None]
    if idx.max() >= len(padded):
        padded = np.concatenate([padded, np.zeros(idx.max() + 1 - len(padded))])
    frames = padded[idx]
    frames = frames - frames.mean(axis=1, keepdims=True)
    rms = np.sqrt((frames ** 2).mean(axis=1))

    # voicing evidence comes from the frame's own hop segment: the wide
    # window may bleed periodicity across an unvoiced phone, the 12.5 ms
    # segment cannot
    seg_idx = np.arange(HOP)[None, :] + HOP * np.arange(t)[:, None]
    seg_pad = wave if seg_idx.max() < len(wave) else np.concatenate(
        [wave, np.zeros(seg_idx.max() + 1 - len(wave))])
    segs = seg_pad[seg_idx]
    segs = segs - segs.mean(axis=1, keepdims=True)
    seg_rms = np.sqrt((segs ** 2).mean(axis=1))
    seg_spec = np.abs(np.fft.rfft(segs, n=512, axis=1)) ** 2
    seg_hz = np.fft.rfftfreq(512, d=1.0 / SAMPLE_RATE)
    low = seg_spec[:, seg_hz <= 1200.0].sum(axis=1)
    total = seg_spec.sum(axis=1)
    low_ratio = low / np.maximum(total, 1e-12)

    lag_min = int(SAMPLE_RATE / F0_MAX)
    lag_max = int(np.ceil(SAMPLE_RATE / F0_MIN))
    nfft = 2048
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    acf = np.fft.irfft(spec.real ** 2 + spec.imag ** 2, axis=1)[:, :lag_max + 2]
    r0 = np.maximum(acf[:, 0], 1e-12)
    # unbiased normalization so long lags are not penalized
    lags = np.arange(acf.shape[1])
    norm = WINDOW / np.maximum(WINDOW - lags, 1)
    rho = acf * norm[None, :] / r0[:, None]

    t = frames.shape[0]
    f0 = np.zeros(t, dtype=np.float32)
    voiced = np.zeros(t, dtype=bool)
    # narrow windows for confirming that the period lives in this frame's
    # own neighborhood rather than bleeding through the wide window
    narrow_pad = np.concatenate([np.zeros((400 - HOP) // 2), wave, np.zeros(400)])
    for k in range(t):
        if rms[k] < ENERGY_GATE or seg_rms[k] < 2e-3 \
                or low_ratio[k] < LOW_BAND_VOICING_RATIO:
            continue
        seg = rho[k]
        window = seg[lag_min:lag_max + 1]
        best = float(window.max())
        if best < VOICING_THRESHOLD:
            continue
        # earliest strong local peak wins, which rejects octave-down errors
        candidates = []
        for i in range(1, len(window) - 1):
            if window[i] >= window[i - 1] and window[i] >= window[i + 1] \
                    and window[i] >= 0.85 * best:
                candidates.append(i)
        if not candidates:
            continue
        i = candidates[0]
        lag = float(lag_min + i)
        a, b, c = seg[int(lag) - 1], seg[int(lag)], seg[int(lag) + 1]
        denom = a - 2 * b + c
        if abs(denom) > 1e-12:
            lag += 0.5 * (a - c) / denom
        hz = SAMPLE_RATE / lag
        if not (F0_MIN <= hz <= F0_MAX):
            continue
        if _local_period_support(narrow_pad[k * HOP:k * HOP + 400],
                                 int(round(lag))) < 0.3:
            continue
        voiced[k] = True
        f0[k] = hz
    _drop_outlier_frames(f0, voiced)
    # the wide window can carry periodicity across a short unvoiced phone;
    # a burst of one or two locally-energetic frames framed by near-silence
    # is never a voiced phone
    energetic = seg_rms >= 2e-3
    run_start = None
    run_energy = 0
    for k in range(t + 1):
        if k < t and voiced[k]:
            if run_start is None:
                run_start = k
                run_energy = 0
            run_energy += int(energetic[k])
        elif run_start is not None:
            if run_energy < 3:
                voiced[run_start:k] = False
                f0[run_start:k] = 0.0
            run_start = None
    f0[~voiced] = 0.0
    return f0, voiced


def _local_period_support(x: np.ndarray, lag: int) -> float:
    """Normalized correlation of a short window with itself at the given lag."""
    x = x - x.mean()
    best = 0.0
    for l in (lag - 1, lag, lag + 1):
        if l <= 0 or l >= len(x) - 8:
            continue
        a, b = x[:len(x) - l], x[l:]
        denom = np.sqrt((a ** 2).sum() * (b ** 2).sum())
        if denom > 1e-12:
            best = max(best, float((a * b).sum() / denom))
    return best


def _drop_outlier_frames(f0: np.ndarray, voiced: np.ndarray) -> None:
    """Unvoice frames the local track does not support.

    Edge frames whose analysis window straddles a voicing boundary can lock
    onto a harmonic; a 20% deviation from the 5-frame median marks them.
    Short voiced islands (1-2 frames between unvoiced stretches) are window
    bleed from neighboring phones, never a real voiced phone, and would
    otherwise validate themselves against each other.
    """
    idx = np.where(voiced)[0]
    for k in idx:
        lo, hi = max(k - 2, 0), k + 3
        neighborhood = f0[lo:hi][voiced[lo:hi]]
        med = np.median(neighborhood)
        if med > 0 and abs(f0[k] - med) > 0.2 * med:
            voiced[k] = False
            f0[k] = 0.0
    run_start = None
    for k in range(len(voiced) + 1):
        if k < len(voiced) and voiced[k]:
            if run_start is None:
                run_start = k
        elif run_start is not None:
            if k - run_start < 3:
                voiced[run_start:k] = False
                f0[run_start:k] = 0.0
            run_start = None


def durations_from_ground_truth(durations: np.ndarray, num_frames: int | None = None) -> np.ndarray:
    d = np.asarray(durations, dtype=np.int64).copy()
    if np.any(d < 1):
        raise ValueError("ground-truth durations must be >= 1 frame")
    if num_frames is not None and int(d.sum()) != num_frames:
        raise ValueError("ground-truth durations do not cover the frame count")
    return d


def durations_from_attention(attention: np.ndarray, num_tokens: int, num_frames: int,
                             frames_per_step: int = 1) -> np.ndarray:
    """Argmax-count alignment from a (decoder steps, tokens) attention matrix.

    Every token receives at least one frame; any remainder after the
    per-step accounting is assigned to the final token.
    """
    att = np.asarray(attention, dtype=np.float64)
    if att.ndim != 2 or att.shape[1] != num_tokens:
        raise ValueError("attention shape must be (steps, tokens)")
    if att.shape[0] == 0 or np.any(att.sum(axis=1) == 0):
        raise AlignmentFailedError("attention matrix contains all-zero rows")
    arg = att.argmax(axis=1)
    d = np.bincount(arg, minlength=num_tokens).astype(np.int64) * frames_per_step
    return _repair_durations(d, num_frames)


def durations_from_dtw(mel: MelSpectrogram, oracle_mel: MelSpectrogram,
                       oracle_durations: np.ndarray) -> np.ndarray:
    """Map oracle token boundaries onto a mel via a DTW frame alignment."""
    from .evaluate import dtw_path   # local import, avoids a module cycle
    path = dtw_path(mel.frames.astype(np.float64), oracle_mel.frames.astype(np.float64))
    # for each oracle frame, the latest matched frame in mel
    latest = np.zeros(oracle_mel.num_frames, dtype=np.int64)
    for i, j in path:
        latest[j] = max(latest[j], i)
    bounds = np.cumsum(np.asarray(oracle_durations, dtype=np.int64))
    d = np.zeros(len(bounds), dtype=np.int64)
    prev = 0
    for k, b in enumerate(bounds):
        end = int(latest[min(b, len(latest)) - 1]) + 1
        d[k] = max(end - prev, 0)
        prev = max(end, prev)
    return _repair_durations(d, mel.num_frames)


def _repair_durations(d: np.ndarray, num_frames: int) -> np.ndarray:
    d = d.copy()
    deficit = num_frames - int(d.sum())
    d[-1] += deficit
    while True:
        zeros = np.where(d < 1)[0]
        if len(zeros) == 0:
            break
        donor = int(np.argmax(d))
        if d[donor] <= 1:
            raise AlignmentFailedError("not enough frames to give every token one")
        d[donor] -= 1
        d[zeros[0]] += 1
    assert int(d.sum()) == num_frames
    return d


def align_durations(tokens, mel: MelSpectrogram, reference) -> np.ndarray:
    """Per-token durations from one of the three alignment references.

    `reference` is a ProsodyTrack (ground truth), a (attention, frames_per_step)
    tuple, or a (oracle_mel, oracle_durations) tuple.
    """
    if len(tokens) == 0:
        raise ValueError("empty token sequence")
    if isinstance(reference, ProsodyTrack):
        return durations_from_ground_truth(reference.durations, mel.num_frames)
    first, second = reference
    if isinstance(first, MelSpectrogram):
        return durations_from_dtw(mel, first, second)
    return durations_from_attention(first, len(tokens), mel.num_frames,
                                    frames_per_step=int(second))


def linguistic_features(tokens: list[str], punctuation=(".", ","),
                        style_id: str = "neutral", speaker_id: str = "") -> LinguisticFeatures:
    if len(tokens) == 0:
        raise ValueError("empty token sequence")
    n = len(tokens)
    is_punct = np.array([t in punctuation for t in tokens], dtype=bool)
    phone_idx = np.cumsum(~is_punct) - 1
    n_phones = max(int(phone_idx[-1]) + 1, 1)

    # syllable grouping: a new word starts on each non-punct token that
    # follows a vowel-final group; at desk scale words are CV syllables
    word_of = np.zeros(n, dtype=np.int64)
    pos_in_word = np.zeros(n, dtype=np.float64)
    word = -1
    pos = 0
    prev_was_vowel = True
    for i, tok in enumerate(tokens):
        if is_punct[i]:
            word_of[i] = max(word, 0)
            pos_in_word[i] = 1.0
            continue
        if prev_was_vowel:
            word += 1
            pos = 0
        else:
            pos += 1
        word_of[i] = word
        pos_in_word[i] = min(pos, 3) / 3.0
        prev_was_vowel = tok in ("a", "e", "i", "o", "u")
    features = LinguisticFeatures(
        tokens=list(tokens),
        is_punct=is_punct,
        pos_in_word=pos_in_word,
        word_parity=(word_of % 2).astype(np.float64),
        pos_in_utt=np.clip(phone_idx / max(n_phones - 1, 1), 0.0, 1.0),
        is_final=np.array([(not is_punct[i]) and int(phone_idx[i]) == n_phones - 1
                           for i in range(n)], dtype=bool),
        punct_before=np.array([i + 1 < n and is_punct[i + 1] for i in range(n)], dtype=bool),
        punct_after=np.array([i > 0 and is_punct[i - 1] for i in range(n)], dtype=bool),
        style_id=style_id,
        speaker_id=speaker_id,
    )
    return features


def save_prosody(path, prosody: ProsodyTrack, tokens: list[str] | None = None) -> None:
    lines = []
    if prosody.durations is not None:
        toks = tokens if tokens is not None else [""] * len(prosody.durations)
        for sym, frames in zip(toks, prosody.durations):
            lines.append(json.dumps({"kind": "token", "symbol": sym, "frames": int(frames)}))
    lines.append(json.dumps({"kind": "f0", "hz": [round(float(v), 3) for v in prosody.f0]}))
    lines.append(json.dumps({"kind": "voicing", "flags": [int(v) for v in prosody.voicing]}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_prosody(path):
    """Returns (ProsodyTrack, tokens or None)."""
    durations, tokens, f0, voicing = [], [], None, None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        if rec["kind"] == "token":
            durations.append(int(rec["frames"]))
            tokens.append(rec["symbol"])
        elif rec["kind"] == "f0":
            f0 = np.array(rec["hz"], dtype=np.float32)
        elif rec["kind"] == "voicing":
            voicing = np.array(rec["flags"], dtype=bool)
    if f0 is None or voicing is None:
        raise ValueError(f"{path}: incomplete prosody record")
    f0[~voicing] = 0.0
    track = ProsodyTrack(f0=f0, voicing=voicing,
                         durations=np.array(durations, dtype=np.int64) if durations else None)
    return track, (tokens if tokens else None)


class FeatureCache:
    """On-disk per-utterance feature arrays keyed by extractor version."""

    def __init__(self, root):
        self.root = Path(root)

    def _dir(self, kind: str, version: int) -> Path:
        d = self.root / f"{kind}-v{version}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def path(self, kind: str, version: int, utt_id: str) -> Path:
        return self._dir(kind, version) / f"{utt_id}.npy"

    def mel(self, utt_id: str, wave_loader) -> np.ndarray:
        p = self.path("mel", MEL_VERSION, utt_id)
        if p.exists():
            return np.load(p)
        m = compute_mel(wave_loader()).frames
        np.save(p, m)
        return m

    def f0(self, utt_id: str, wave_loader) -> tuple[np.ndarray, np.ndarray]:
        p = self.path("f0", F0_VERSION, utt_id)
        if p.exists():
            arr = np.load(p)
            return arr[0].astype(np.float32), arr[1].astype(bool)
        f0, voiced = extract_f0(wave_loader())
        np.save(p, np.stack([f0, voiced.astype(np.float32)]))
        return f0, voiced
