#!/usr/bin/env python3
"""
VoiceShield DSP Tests
"""

import numpy as np
import pandas as pd
import pytest

from audio_io import SAMPLE_RATE, AudioClip
from dsp import (FreqWeighting, Spectrogram, StftConfig, analysis_window, band_energy,
                 bandpass_weighting, clip_features, hz_to_mel, log_mel_features, mel_filterbank,
                 mel_to_hz, stft, write_features_csv)
from errors import DimensionMismatch, InvalidRange, TooShort


def noise_clip(n=4000, seed=0):
    return AudioClip(np.random.default_rng(seed).uniform(-0.5, 0.5, n))


def test_frame_count_formula():
    config = StftConfig()
    assert stft(AudioClip(np.zeros(512))).n_frames == 1
    for n in (512, 513, 767, 768, 769, 1024, 5000, 160000):
        starts = [s for s in range(0, n) if s + 512 <= n and s % 256 == 0]
        assert stft(AudioClip(np.zeros(n))).n_frames == len(starts) == config.frame_count(n)
    assert stft(AudioClip(np.zeros(160000))).n_frames == 623


def test_too_short():
    with pytest.raises(TooShort):
        stft(AudioClip(np.zeros(511)))


def test_windowed_parseval_constant():
    c = 0.3
    spec = stft(AudioClip(np.full(512, c)))
    one_sided = np.full(257, 2.0)
    one_sided[[0, -1]] = 1.0
    lhs = np.sum(one_sided * spec.power[0])
    rhs = np.sum((analysis_window(StftConfig()) * c) ** 2)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_sine_peak_bin():
    t = np.arange(2048) / SAMPLE_RATE
    spec = stft(AudioClip(0.5 * np.sin(2 * np.pi * 1000.0 * t)))
    assert np.all(np.argmax(spec.power, axis=1) == 32)


def test_stft_linear():
    a, b = noise_clip(seed=1), noise_clip(seed=2)
    summed = stft(AudioClip(a.samples + b.samples)).frames
    np.testing.assert_allclose(summed, stft(a).frames + stft(b).frames, atol=1e-9)


def test_mel_filterbank_shape_and_peaks():
    fb = mel_filterbank(32, 0.0, 8000.0)
    assert fb.matrix.shape == (32, 257)
    assert np.all(fb.matrix >= 0)
    np.testing.assert_array_equal(fb.matrix.max(axis=1), np.ones(32))


def test_mel_filterbank_covers_interior_bins():
    fb = mel_filterbank(32, 0.0, 8000.0)
    centres = np.argmax(fb.matrix, axis=1)
    interior = fb.matrix[:, centres[0]:centres[-1] + 1].sum(axis=0)
    assert np.all(interior > 0)


def test_mel_scale_inverse():
    hz = np.array([0.0, 700.0, 4000.0, 8000.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(hz)), hz, atol=1e-9)


def test_invalid_ranges():
    with pytest.raises(InvalidRange):
        mel_filterbank(32, 8000.0, 4000.0)
    with pytest.raises(InvalidRange):
        mel_filterbank(0)
    with pytest.raises(InvalidRange):
        bandpass_weighting(5000.0, 150.0)


def test_bandpass_bins():
    mask = bandpass_weighting(150.0, 5000.0, 512).matrix
    assert mask.shape == (1, 257)
    np.testing.assert_array_equal(np.flatnonzero(mask[0]), np.arange(5, 161))
    assert np.all(bandpass_weighting(0.0, 8000.0).matrix == 1.0)
    np.testing.assert_array_equal(mask * mask, mask)


def test_band_energy_naive_oracle():
    rng = np.random.default_rng(3)
    frames = rng.standard_normal((3, 257)) + 1j * rng.standard_normal((3, 257))
    spec = Spectrogram(frames, StftConfig())
    w = mel_filterbank(8, 0.0, 8000.0)
    fast = band_energy(spec, w)
    naive = np.zeros((3, 8))
    for n in range(3):
        for b in range(8):
            naive[n, b] = sum((w.matrix[b, k] * abs(frames[n, k])) ** 2 for k in range(257))
    np.testing.assert_allclose(fast, naive, rtol=1e-12)


def test_band_energy_basics():
    spec = stft(noise_clip())
    ones = FreqWeighting(np.ones((1, 257)), 'bandpass_mask')
    np.testing.assert_allclose(band_energy(spec, ones)[:, 0], spec.power.sum(axis=1))
    zero = Spectrogram(np.zeros((2, 257), dtype=complex), StftConfig())
    assert np.all(band_energy(zero, ones) == 0)
    with pytest.raises(DimensionMismatch):
        band_energy(spec, FreqWeighting(np.ones((1, 100)), 'bandpass_mask'))


def test_band_energy_two_homogeneous():
    clip = noise_clip()
    w = mel_filterbank(32)
    base = band_energy(stft(clip), w)
    scaled = band_energy(stft(AudioClip(3.0 * clip.samples)), w)
    np.testing.assert_allclose(scaled, 9.0 * base, rtol=1e-9)


def test_log_mel_floor_and_scaling():
    fb = mel_filterbank(64)
    silent = log_mel_features(stft(AudioClip(np.zeros(1024))), fb)
    assert np.all(silent.frames == -10.0)

    clip = noise_clip()
    base = log_mel_features(stft(clip), fb).frames
    louder = log_mel_features(stft(AudioClip(10.0 * clip.samples)), fb).frames
    # Energies scale with the square of the amplitude
    np.testing.assert_allclose(louder - base, 2.0, atol=1e-9)
    louder_sqrt = log_mel_features(stft(AudioClip(np.sqrt(10.0) * clip.samples)), fb).frames
    np.testing.assert_allclose(louder_sqrt - base, 1.0, atol=1e-9)


def test_clip_features_and_dump(tmp_path):
    clip = noise_clip(n=16000)
    features = clip_features(clip)
    assert features.frames.shape == (StftConfig().frame_count(16000), 64)
    assert np.all(np.isfinite(features.frames))

    path = tmp_path / 'features.csv'
    write_features_csv(features, path)
    df = pd.read_csv(path)
    assert list(df.columns) == [f'mel_{b:02d}' for b in range(64)]
    np.testing.assert_allclose(df.to_numpy(), features.frames, rtol=1e-8)
