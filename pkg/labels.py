"""
VoiceShield Labels
Training targets from clean speech, acoustic impulse response and noise:
the clean-level VAD label and the mel-weighted segmental VNR label, including
AIR windowing, range mapping and temporal smoothing.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from scipy.signal import convolve

from artifacts import read_csv, write_csv
from audio_io import SAMPLE_RATE, AudioClip
from dsp import (FreqWeighting, Spectrogram, StftConfig, band_energy,
                 bandpass_weighting, frame_signal, mel_filterbank, stft)
from errors import (AllZeroAir, EmptySpectrogram, FrameCountMismatch, IndexOutOfRange,
                    InvalidRange, LengthMismatch, OutOfRange, UnsupportedFormat)

logger = logging.getLogger(__name__)

VNR_FLOOR = 1e-12
LABEL_COLUMNS = ['frame', 'vad', 'vnr_db', 'vnr_unit']


@dataclass(frozen=True)
class AirWindowSpec:
    """Exponential decay window anchored at the direct path (60 dB over 0.3 s)."""

    decay_db: float = 60.0
    decay_time_s: float = 0.3
    direct_path_index: Optional[int] = None

    def __post_init__(self):
        if self.decay_db <= 0 or self.decay_time_s <= 0:
            raise InvalidRange("AIR window decay and decay time must be positive")


@dataclass(frozen=True)
class LabelConfig:
    stft: StftConfig = StftConfig()
    vad_fmin_hz: float = 150.0
    vad_fmax_hz: float = 5000.0
    rel_threshold: float = 0.01
    vnr_bands: int = 32
    vnr_min_db: float = -15.0
    vnr_max_db: float = 40.0
    smooth_s: float = 0.2
    air_window: AirWindowSpec = field(default_factory=AirWindowSpec)

    @property
    def w_vad(self) -> FreqWeighting:
        return _bandpass(self.vad_fmin_hz, self.vad_fmax_hz, self.stft.frame_len)

    @property
    def w_vnr(self) -> FreqWeighting:
        return _mel(self.vnr_bands, self.stft.frame_len)


@lru_cache(maxsize=16)
def _bandpass(flo: float, fhi: float, n_fft: int) -> FreqWeighting:
    w = bandpass_weighting(flo, fhi, n_fft)
    w.matrix.setflags(write=False)
    return w


@lru_cache(maxsize=16)
def _mel(n_bands: int, n_fft: int) -> FreqWeighting:
    w = mel_filterbank(n_bands, 0.0, SAMPLE_RATE / 2, SAMPLE_RATE, n_fft)
    w.matrix.setflags(write=False)
    return w


@dataclass(frozen=True, eq=False)
class LabelTrack:
    """Per-frame targets: soft VAD in [0, 1], VNR in dB and mapped to [0, 1]."""

    vad: np.ndarray
    vnr_db: np.ndarray
    vnr_unit: np.ndarray
    frame_hop_s: float = 0.016

    @property
    def n_frames(self) -> int:
        return len(self.vad)


def find_direct_path(air: AudioClip) -> int:
    """Index of the largest absolute AIR sample."""
    h = air.samples
    if len(h) == 0 or not np.any(h):
        raise AllZeroAir("AIR is empty or all zero")
    return int(np.argmax(np.abs(h)))


def window_air(air: AudioClip, spec: AirWindowSpec = AirWindowSpec()) -> AudioClip:
    """
    Remove the late reverberation tail of an AIR.

    Samples up to the direct path d are kept; later samples are attenuated by
    decay_db per decay_time_s.
    """
    d = spec.direct_path_index if spec.direct_path_index is not None else find_direct_path(air)
    n = len(air)
    if not 0 <= d < n:
        raise IndexOutOfRange(f"Direct path index {d} outside AIR of length {n}")

    t = np.arange(n)
    exponent = -(spec.decay_db / 20.0) * np.maximum(t - d, 0) / (spec.decay_time_s * air.sample_rate)
    gain = np.where(t <= d, 1.0, 10.0 ** exponent)
    return air.with_samples(air.samples * gain)


def target_speech(speech: AudioClip, air: AudioClip) -> AudioClip:
    """Convolve speech with an AIR and truncate to the speech length."""
    x = convolve(speech.samples, air.samples)[:len(speech)]
    return speech.with_samples(x)


def compute_vad(target_spec: Spectrogram, w_vad: FreqWeighting, rel_threshold: float = 0.01) -> np.ndarray:
    """
    Clean-level VAD: 1 where the weighted frame energy exceeds
    rel_threshold * max frame energy, 0 otherwise (equality counts as 0).
    """
    if target_spec.n_frames == 0:
        raise EmptySpectrogram("Cannot label an empty spectrogram")
    energy = band_energy(target_spec, w_vad).sum(axis=1)
    threshold = rel_threshold * energy.max()
    return (energy > threshold).astype(np.int64)


def compute_vnr(target_spec: Spectrogram, noise_spec: Spectrogram, w_vnr: FreqWeighting,
                min_db: float = -15.0, max_db: float = 40.0) -> np.ndarray:
    """Mel-weighted segmental voice-to-noise ratio in dB, clipped to [min_db, max_db]."""
    if target_spec.n_frames != noise_spec.n_frames:
        raise FrameCountMismatch(f"{target_spec.n_frames} speech frames vs {noise_spec.n_frames} noise frames")
    speech_energy = np.maximum(band_energy(target_spec, w_vnr).sum(axis=1), VNR_FLOOR)
    noise_energy = np.maximum(band_energy(noise_spec, w_vnr).sum(axis=1), VNR_FLOOR)
    vnr = 10.0 * np.log10(speech_energy / noise_energy)
    return np.clip(vnr, min_db, max_db)


def map_vnr_unit(vnr_db: np.ndarray, min_db: float = -15.0, max_db: float = 40.0) -> np.ndarray:
    """Affine map [min_db, max_db] -> [0, 1]."""
    vnr_db = np.asarray(vnr_db, dtype=np.float64)
    if np.any(vnr_db < min_db) or np.any(vnr_db > max_db):
        raise OutOfRange(f"VNR values must lie in [{min_db}, {max_db}] dB")
    return (vnr_db - min_db) / (max_db - min_db)


def unit_to_vnr_db(unit: np.ndarray, min_db: float = -15.0, max_db: float = 40.0) -> np.ndarray:
    return np.asarray(unit, dtype=np.float64) * (max_db - min_db) + min_db


def vnr_presence(vnr_db: np.ndarray, threshold_db: float) -> np.ndarray:
    """Speech presence from a VNR track: 1 where VNR >= threshold."""
    return (np.asarray(vnr_db) >= threshold_db).astype(np.int64)


def smoothing_frames(window_s: float, hop_s: float) -> int:
    """Nearest odd frame count for a window length (0.2 s at 16 ms -> 13)."""
    if window_s <= 0 or hop_s <= 0:
        raise InvalidRange("Smoothing window and hop must be positive")
    return max(1, 2 * int(round((window_s / hop_s - 1.0) / 2.0)) + 1)


def smooth_track(seq: np.ndarray, window_s: float = 0.2, hop_s: float = 0.016) -> np.ndarray:
    """Centered moving average; near the edges only the available frames are averaged."""
    width = smoothing_frames(window_s, hop_s)
    series = pd.Series(np.asarray(seq, dtype=np.float64))
    return series.rolling(window=width, center=True, min_periods=1).mean().to_numpy()


def frame_energy(clip: AudioClip, config: StftConfig = StftConfig()) -> np.ndarray:
    """Time-domain energy of every analysis frame."""
    frames = frame_signal(clip.samples, config.frame_len, config.hop)
    return np.einsum('ij,ij->i', frames, frames)


def active_frame_mask(target: AudioClip, config: LabelConfig = LabelConfig()) -> np.ndarray:
    """Boolean mask of frames labelled active by the clean-level VAD rule."""
    return compute_vad(stft(target, config.stft), config.w_vad, config.rel_threshold).astype(bool)


def labels_from_components(target: AudioClip, noise: AudioClip,
                           config: LabelConfig = LabelConfig()) -> LabelTrack:
    """Labels for an aligned target speech signal x(t) and noise v(t)."""
    if len(target) != len(noise):
        raise LengthMismatch(f"Target has {len(target)} samples, noise has {len(noise)}")

    target_spec = stft(target, config.stft)
    noise_spec = stft(noise, config.stft)
    hop_s = config.stft.hop_s

    vad_raw = compute_vad(target_spec, config.w_vad, config.rel_threshold)
    vad = np.clip(smooth_track(vad_raw, config.smooth_s, hop_s), 0.0, 1.0)

    vnr_raw = compute_vnr(target_spec, noise_spec, config.w_vnr, config.vnr_min_db, config.vnr_max_db)
    vnr_db = np.clip(smooth_track(vnr_raw, config.smooth_s, hop_s), config.vnr_min_db, config.vnr_max_db)
    vnr_unit = map_vnr_unit(vnr_db, config.vnr_min_db, config.vnr_max_db)

    return LabelTrack(vad=vad, vnr_db=vnr_db, vnr_unit=vnr_unit, frame_hop_s=hop_s)


def make_labels(speech: AudioClip, air: AudioClip, noise: AudioClip,
                config: LabelConfig = LabelConfig()) -> LabelTrack:
    """
    Compute both training targets.

    Args:
        speech: dry speech s(t)
        air: acoustic impulse response h(t); a unit impulse for anechoic speech
        noise: noise v(t) at its final mixing scale, same length as speech

    Returns:
        LabelTrack on the STFT frame grid of the mixture
    """
    h_win = window_air(air, config.air_window)
    target = target_speech(speech, h_win)
    return labels_from_components(target, noise, config)


def labels_frame(track: LabelTrack) -> pd.DataFrame:
    return pd.DataFrame({
        'frame': np.arange(track.n_frames),
        'vad': track.vad,
        'vnr_db': track.vnr_db,
        'vnr_unit': track.vnr_unit,
    }, columns=LABEL_COLUMNS)


def write_labels_csv(track: LabelTrack, path: Union[str, Path]):
    write_csv(labels_frame(track), path)


def read_labels_csv(path: Union[str, Path], hop_s: float = 0.016) -> LabelTrack:
    df = read_csv(path)
    missing = [c for c in LABEL_COLUMNS if c not in df.columns]
    if missing:
        raise UnsupportedFormat(f"Label file {path} lacks columns {missing}")
    return LabelTrack(vad=df['vad'].to_numpy(dtype=np.float64),
                      vnr_db=df['vnr_db'].to_numpy(dtype=np.float64),
                      vnr_unit=df['vnr_unit'].to_numpy(dtype=np.float64),
                      frame_hop_s=hop_s)
