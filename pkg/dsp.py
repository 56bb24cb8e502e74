"""
VoiceShield DSP
STFT framing, mel and bandpass frequency weightings, per-frame band energies
and log-mel network features.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd
from scipy.signal import get_window

from artifacts import write_csv
from audio_io import SAMPLE_RATE, AudioClip
from errors import DimensionMismatch, InvalidRange, TooShort

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class StftConfig:
    """Analysis framing. Defaults: 32 ms frames with a 16 ms shift at 16 kHz."""

    frame_len: int = 512
    hop: int = 256
    window: str = 'hann'

    def __post_init__(self):
        if self.frame_len % 2 or self.hop < 1 or self.hop > self.frame_len:
            raise InvalidRange(f"Invalid framing: frame_len={self.frame_len}, hop={self.hop}")

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    @property
    def hop_s(self) -> float:
        return self.hop / SAMPLE_RATE

    def frame_count(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            return 0
        return (n_samples - self.frame_len) // self.hop + 1


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """One-sided complex STFT, T frames by K bins."""

    frames: np.ndarray
    config: StftConfig

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def power(self) -> np.ndarray:
        return np.abs(self.frames) ** 2


@dataclass(frozen=True, eq=False)
class FreqWeighting:
    """B x K non-negative weighting over STFT bins."""

    matrix: np.ndarray
    kind: str

    @property
    def n_bands(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True, eq=False)
class MelFeatures:
    """T x n_mels log10 mel energies."""

    frames: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def frame_signal(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Return a read-only T x frame_len view; frame n covers [n*hop, n*hop + frame_len)."""
    samples = np.asarray(samples)
    if len(samples) < frame_len:
        raise TooShort(f"Signal of {len(samples)} samples is shorter than one frame ({frame_len})")
    return np.lib.stride_tricks.sliding_window_view(samples, frame_len)[::hop]


def analysis_window(config: StftConfig) -> np.ndarray:
    """Periodic analysis window of the configured kind."""
    return get_window(config.window, config.frame_len, fftbins=True)


def stft(clip: Union[AudioClip, np.ndarray], config: StftConfig = StftConfig()) -> Spectrogram:
    """
    Short-time Fourier transform with a periodic Hann window.

    The DFT is orthonormally scaled, so for each frame the one-sided Parseval
    identity holds: sum_k w_os(k) |X(k)|^2 == sum_t (hann(t) x(t))^2.
    """
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    frames = frame_signal(samples, config.frame_len, config.hop)
    spectrum = np.fft.rfft(frames * analysis_window(config), axis=-1, norm='ortho')
    return Spectrogram(spectrum, config)


def _check_range(fmin: float, fmax: float, sr: int):
    if not 0.0 <= fmin < fmax <= sr / 2:
        raise InvalidRange(f"Frequency range [{fmin}, {fmax}] Hz is not within [0, {sr / 2}] Hz")


def hz_to_mel(hz):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = 64, fmin: float = 0.0, fmax: float = 8000.0,
                   sr: int = SAMPLE_RATE, n_fft: int = 512) -> FreqWeighting:
    """
    Triangular mel filters with unit peak on the DFT bin grid.

    Filter edges and centres are equally spaced on the HTK mel scale and
    snapped to the nearest DFT bin, so each filter peaks at exactly 1.
    """
    _check_range(fmin, fmax, sr)
    if n_mels < 1:
        raise InvalidRange(f"n_mels must be >= 1, got {n_mels}")

    n_bins = n_fft // 2 + 1
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    edges = np.clip(np.round(edges_hz * n_fft / sr).astype(int), 0, n_bins - 1)
    bins = np.arange(n_bins)

    matrix = np.zeros((n_mels, n_bins))
    for b in range(n_mels):
        lo, centre, hi = edges[b], edges[b + 1], edges[b + 2]
        if centre > lo:
            rising = (bins >= lo) & (bins <= centre)
            matrix[b, rising] = (bins[rising] - lo) / (centre - lo)
        if hi > centre:
            falling = (bins >= centre) & (bins <= hi)
            matrix[b, falling] = (hi - bins[falling]) / (hi - centre)
        matrix[b, centre] = 1.0

    return FreqWeighting(matrix, 'mel')


def bandpass_weighting(flo: float = 150.0, fhi: float = 5000.0, n_fft: int = 512,
                       sr: int = SAMPLE_RATE) -> FreqWeighting:
    """1 x K binary mask; bin k is kept iff k*sr/n_fft lies in [flo, fhi]."""
    _check_range(flo, fhi, sr)
    centres = np.arange(n_fft // 2 + 1) * sr / n_fft
    mask = ((centres >= flo) & (centres <= fhi)).astype(np.float64)
    return FreqWeighting(mask[np.newaxis, :], 'bandpass_mask')


def band_energy(spec: Spectrogram, w: FreqWeighting) -> np.ndarray:
    """Entry (n, b) = sum_k (w[b, k] |X[n, k]|)^2."""
    if spec.frames.shape[1] != w.matrix.shape[1]:
        raise DimensionMismatch(f"Spectrogram has {spec.frames.shape[1]} bins, weighting expects {w.matrix.shape[1]}")
    return spec.power @ (w.matrix ** 2).T


def log_mel_features(spec: Spectrogram, fb: FreqWeighting) -> MelFeatures:
    """log10 of mel band energies, floored at 1e-10."""
    energies = band_energy(spec, fb)
    return MelFeatures(np.log10(np.maximum(energies, LOG_FLOOR)))


def clip_features(clip: AudioClip, config: StftConfig = StftConfig(), n_mels: int = 64) -> MelFeatures:
    """Network input features for a whole clip."""
    fb = mel_filterbank(n_mels, 0.0, SAMPLE_RATE / 2, SAMPLE_RATE, config.frame_len)
    return log_mel_features(stft(clip, config), fb)


def write_features_csv(features: MelFeatures, path: Union[str, Path]):
    """Feature dump: one row per frame, one column per mel band."""
    columns = [f'mel_{b:02d}' for b in range(features.frames.shape[1])]
    write_csv(pd.DataFrame(features.frames, columns=columns), path)
    logger.info(f"Wrote {features.n_frames} feature frames to {path}")
