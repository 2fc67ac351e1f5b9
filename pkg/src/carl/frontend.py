"""Log-mel frontend: 25 ms Hann window, 10 ms hop, no padding."""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-5


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (t, f) log-mel
    sample_rate: int = SAMPLE_RATE
    win_length: int = 400
    hop_length: int = 160

    @property
    def t(self):
        return self.values.shape[0]

    @property
    def f(self):
        return self.values.shape[1]


def n_frames(length, win_length=400, hop_length=160):
    if length < win_length:
        return 0
    return (length - win_length) // hop_length + 1


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels=64, n_fft=512, sample_rate=SAMPLE_RATE):
    """Triangular HTK-scale filters, shape (n_fft // 2 + 1, n_mels)."""
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lower = (freqs[:, None] - edges[None, :-2]) / (edges[1:-1] - edges[:-2])[None, :]
    upper = (edges[None, 2:] - freqs[:, None]) / (edges[2:] - edges[1:-1])[None, :]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb.setflags(write=False)
    return fb


def log_mel(waves, n_mels=64, win_length=400, hop_length=160, n_fft=512,
            sample_rate=SAMPLE_RATE):
    """Batched log-mel of ``waves`` (N, L) -> (N, t, n_mels) float32."""
    waves = np.atleast_2d(np.asarray(waves, dtype=np.float64))
    t = n_frames(waves.shape[1], win_length, hop_length)
    if t <= 0:
        raise ValueError(f"waveform shorter than one window ({win_length} samples)")
    frames = np.lib.stride_tricks.sliding_window_view(waves, win_length, axis=1)[:, ::hop_length]
    frames = frames[:, :t] * np.hanning(win_length + 2)[1:-1]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=-1)) ** 2
    mel = power @ mel_filterbank(n_mels, n_fft, sample_rate)
    return np.log(mel + LOG_FLOOR).astype(np.float32)


def mel_frontend(scene_or_waveform, sample_rate=SAMPLE_RATE, n_mels=64,
                 win_length=400, hop_length=160, n_fft=512):
    """Log-mel spectrogram of an ``AudioScene`` or a mono waveform."""
    wave = getattr(scene_or_waveform, "mixture", scene_or_waveform)
    sr = getattr(scene_or_waveform, "sample_rate", sample_rate)
    if sr != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {sr} Hz")
    wave = np.asarray(wave)
    if wave.ndim != 1:
        raise ValueError("expected a mono waveform")
    values = log_mel(wave[None], n_mels, win_length, hop_length, n_fft, sr)[0]
    return MelSpectrogram(values, sr, win_length, hop_length)
