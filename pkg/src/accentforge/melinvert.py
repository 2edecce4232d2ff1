"""Mel-spectrogram inversion for synthetic-data generation.

Deterministic iterative phase reconstruction: mel energies are mapped back
to a linear magnitude spectrogram through a regularized filterbank
pseudo-inverse, then phases are recovered with a fixed number of
analysis/synthesis iterations from a zero-phase start. Intentionally a
different architecture class from the trainable waveform synthesizer.
"""
from __future__ import annotations

import numpy as np

from .audio import HOP, LOG_FLOOR, N_FFT, WINDOW
from .features import MelSpectrogram, mel_filterbank

DEFAULT_ITERATIONS = 60
PEAK_LEVEL = 0.95

_PINV: np.ndarray | None = None


def _mel_pinv() -> np.ndarray:
    """Ridge-regularized right pseudo-inverse of the mel filterbank."""
    global _PINV
    if _PINV is None:
        m = mel_filterbank()
        gram = m @ m.T
        reg = 1e-4 * np.trace(gram) / gram.shape[0]
        _PINV = m.T @ np.linalg.inv(gram + reg * np.eye(gram.shape[0]))
    return _PINV


def mel_to_magnitude(mel: MelSpectrogram) -> np.ndarray:
    """Approximate linear magnitude frames (T, N_FFT // 2 + 1)."""
    energies = np.exp(np.asarray(mel.frames, dtype=np.float64))
    energies[energies <= LOG_FLOOR * 1.0000001] = 0.0
    mag = energies @ _mel_pinv().T
    return np.maximum(mag, 0.0)


def _stft_batch(x: np.ndarray, t: int) -> np.ndarray:
    need = (t - 1) * HOP + WINDOW
    if x.shape[1] < need:
        x = np.pad(x, ((0, 0), (0, need - x.shape[1])))
    idx = np.arange(WINDOW)[None, :] + HOP * np.arange(t)[:, None]
    return np.fft.rfft(x[:, idx] * np.hanning(WINDOW), n=N_FFT, axis=2)


def _istft_batch(spec: np.ndarray) -> np.ndarray:
    b, t = spec.shape[0], spec.shape[1]
    frames = np.fft.irfft(spec, n=N_FFT, axis=2)[:, :, :WINDOW] * np.hanning(WINDOW)
    n = (t - 1) * HOP + WINDOW
    out = np.zeros((b, n))
    norm = np.zeros(n)
    w2 = np.hanning(WINDOW) ** 2
    # WINDOW is an integer number of hops, so overlap-add reduces to a few
    # strided slice additions instead of a per-frame loop
    for j in range(WINDOW // HOP):
        out[:, j * HOP:j * HOP + t * HOP] += frames[:, :, j * HOP:(j + 1) * HOP].reshape(b, -1)
        norm[j * HOP:j * HOP + t * HOP] += np.tile(w2[j * HOP:(j + 1) * HOP], t)
    # signal edges lack full window overlap; clamping the normalizer keeps
    # them attenuated instead of amplified
    return out / np.maximum(norm, 0.05 * norm.max())


def invert_mel(mel: MelSpectrogram, iterations: int = DEFAULT_ITERATIONS) -> np.ndarray:
    """Waveform for a mel-spectrogram; length is exactly T * hop samples."""
    return invert_mel_batch([mel], iterations)[0]


def invert_mel_batch(mels: list[MelSpectrogram],
                     iterations: int = DEFAULT_ITERATIONS) -> list[np.ndarray]:
    """Batched inversion; items are padded to a common length internally."""
    if not mels:
        return []
    for m in mels:
        if not np.all(np.isfinite(m.frames)):
            raise ValueError("mel contains non-finite entries")
    lengths = [m.num_frames for m in mels]
    t = max(lengths)
    b = len(mels)
    target = np.zeros((b, t, N_FFT // 2 + 1))
    for i, m in enumerate(mels):
        target[i, :lengths[i]] = mel_to_magnitude(m)
    # zero phase at the window center: a plain zero-phase start parks all
    # frame energy at the window edges where the synthesis window vanishes
    omega = 2.0 * np.pi * np.arange(target.shape[2]) * (WINDOW / 2) / N_FFT
    spec = target * np.exp(-1j * omega)[None, None, :]
    for _ in range(iterations):
        x = _istft_batch(spec)
        angles = np.angle(_stft_batch(x, t))
        spec = target * np.exp(1j * angles)
    x = _istft_batch(spec)
    out = []
    for i, n in enumerate(lengths):
        xi = x[i, :n * HOP]
        peak = np.max(np.abs(xi)) if len(xi) else 0.0
        # near-silent content is left alone: normalizing it up would blow
        # residual floor noise to full scale
        out.append(xi * (PEAK_LEVEL / peak) if peak > 1e-2 else xi)
    return out
