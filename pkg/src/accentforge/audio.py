"""Shared audio constants and WAV helpers.

Every component in the pipeline works at a single fixed frame
parameterization; changing these values invalidates feature caches and
trained checkpoints.
"""
from __future__ import annotations

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
HOP = 200           # 12.5 ms
WINDOW = 800        # 50 ms
N_FFT = 1024
N_MELS = 80
FMIN = 50.0
FMAX = 7600.0
LOG_FLOOR = 1e-5

FRAME_MS = 1000.0 * HOP / SAMPLE_RATE


def n_frames(n_samples: int) -> int:
    """Frame count for an n-sample input: 1 + floor((N - window) / hop).

    Inputs shorter than one window are treated as a single reflected-padded
    frame.
    """
    if n_samples < WINDOW:
        return 1
    return 1 + (n_samples - WINDOW) // HOP


def frame_signal(wave: np.ndarray) -> np.ndarray:
    """Slice a waveform into (T, WINDOW) frames, reflect-padding short input."""
    x = np.asarray(wave, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected mono waveform")
    if len(x) < WINDOW:
        pad = WINDOW - len(x)
        x = np.pad(x, (0, pad), mode="reflect" if len(x) > 1 else "constant")
    t = n_frames(len(x))
    idx = np.arange(WINDOW)[None, :] + HOP * np.arange(t)[:, None]
    return x[idx]


def write_wav(path, wave: np.ndarray) -> None:
    """Write float waveform in [-1, 1] as 16 kHz mono 16-bit PCM."""
    x = np.clip(np.asarray(wave, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype(np.int16)
    wavfile.write(str(path), SAMPLE_RATE, pcm)


def read_wav(path) -> np.ndarray:
    """Read a 16 kHz mono WAV into float64 in [-1, 1]."""
    rate, pcm = wavfile.read(str(path))
    if rate != SAMPLE_RATE:
        raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate}")
    if pcm.ndim != 1:
        raise ValueError(f"{path}: expected mono audio")
    if pcm.dtype == np.int16:
        return pcm.astype(np.float64) / 32767.0
    if pcm.dtype in (np.float32, np.float64):
        return pcm.astype(np.float64)
    raise ValueError(f"{path}: unsupported sample format {pcm.dtype}")
