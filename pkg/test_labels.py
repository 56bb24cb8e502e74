#!/usr/bin/env python3
"""
VoiceShield Labels Tests
"""

import numpy as np
import pytest

from audio_io import AudioClip
from dsp import FreqWeighting, Spectrogram, StftConfig, stft
from errors import (AllZeroAir, EmptySpectrogram, FrameCountMismatch, IndexOutOfRange,
                    OutOfRange)
from labels import (AirWindowSpec, LabelConfig, compute_vad, compute_vnr, find_direct_path,
                    make_labels, map_vnr_unit, read_labels_csv, smooth_track, smoothing_frames,
                    unit_to_vnr_db, vnr_presence, window_air, write_labels_csv)
from synth import gen_air, gen_noise, gen_pseudo_speech, unit_impulse_air

ALL_PASS = FreqWeighting(np.ones((1, 257)), 'bandpass_mask')


def spectrogram_with_energies(energies):
    """One-bin spectrogram whose all-pass frame energies equal `energies`."""
    frames = np.zeros((len(energies), 257), dtype=complex)
    frames[:, 10] = np.sqrt(energies)
    return Spectrogram(frames, StftConfig())


def test_find_direct_path():
    h = np.zeros(400)
    h[100] = 1.0
    assert find_direct_path(AudioClip(h)) == 100

    rng = np.random.default_rng(0)
    decay = rng.uniform(-0.3, 0.3, 2000) * np.exp(-np.arange(2000) / 300.0)
    decay[57] = -0.9
    assert find_direct_path(AudioClip(decay)) == 57

    with pytest.raises(AllZeroAir):
        find_direct_path(AudioClip(np.zeros(10)))


def test_window_air_decay():
    h = np.ones(10000)
    h[200] = 2.0
    windowed = window_air(AudioClip(h)).samples
    assert np.all(windowed[:201] == h[:201])
    assert windowed[200 + 4800] == pytest.approx(1e-3, rel=1e-9)
    assert np.all(np.diff(windowed[201:]) <= 0)


def test_window_air_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        window_air(AudioClip(np.ones(10)), AirWindowSpec(direct_path_index=10))


def test_compute_vad_threshold():
    vad = compute_vad(spectrogram_with_energies([1.0, 0.005]), ALL_PASS, 0.01)
    np.testing.assert_array_equal(vad, [1, 0])
    # Equality with the threshold counts as inactive
    vad = compute_vad(spectrogram_with_energies([1.0, 0.0625]), ALL_PASS, 0.0625)
    np.testing.assert_array_equal(vad, [1, 0])


def test_compute_vad_silent_and_empty():
    assert np.all(compute_vad(spectrogram_with_energies([0.0, 0.0, 0.0]), ALL_PASS) == 0)
    with pytest.raises(EmptySpectrogram):
        compute_vad(Spectrogram(np.zeros((0, 257), dtype=complex), StftConfig()), ALL_PASS)


def test_compute_vad_scale_invariant():
    clip = gen_pseudo_speech(2.0, seed=4)
    w = LabelConfig().w_vad
    base = compute_vad(stft(clip), w)
    np.testing.assert_array_equal(compute_vad(stft(AudioClip(0.01 * clip.samples)), w), base)


def test_compute_vnr_hand_computed():
    speech = spectrogram_with_energies([1.0, 10.0, 0.0, 3.0])
    noise = spectrogram_with_energies([1.0, 1.0, 1.0, 0.7])
    vnr = compute_vnr(speech, noise, ALL_PASS)
    np.testing.assert_allclose(vnr[:2], [0.0, 10.0], atol=1e-6)
    assert vnr[2] == -15.0
    assert vnr[3] == pytest.approx(10 * np.log10(3.0 / 0.7), abs=1e-6)


def test_compute_vnr_frame_mismatch():
    with pytest.raises(FrameCountMismatch):
        compute_vnr(spectrogram_with_energies([1.0]), spectrogram_with_energies([1.0, 1.0]), ALL_PASS)


def test_compute_vnr_scale_invariant():
    w = LabelConfig().w_vnr
    x, v = gen_pseudo_speech(2.0, seed=1), gen_noise('pink', 2.0, seed=1)
    base = compute_vnr(stft(x), stft(v), w)
    scaled = compute_vnr(stft(AudioClip(7.0 * x.samples)), stft(AudioClip(7.0 * v.samples)), w)
    np.testing.assert_allclose(scaled, base, atol=1e-9)


def test_unit_map():
    np.testing.assert_array_equal(map_vnr_unit([-15.0, 40.0, 12.5]), [0.0, 1.0, 0.5])
    with pytest.raises(OutOfRange):
        map_vnr_unit([41.0])
    np.testing.assert_allclose(unit_to_vnr_db(map_vnr_unit([-3.0, 7.5])), [-3.0, 7.5])


def test_threshold_in_unit_domain_matches_db():
    vnr_db = np.linspace(-15.0, 40.0, 221)
    tau = -7.0
    unit = map_vnr_unit(vnr_db)
    np.testing.assert_array_equal(unit >= (tau + 15) / 55, vnr_presence(vnr_db, tau).astype(bool))


def test_smoothing():
    assert smoothing_frames(0.2, 0.016) == 13
    np.testing.assert_allclose(smooth_track(np.full(40, 0.3)), 0.3)

    spike = np.zeros(41)
    spike[20] = 1.0
    smoothed = smooth_track(spike)
    np.testing.assert_allclose(smoothed[14:27], 1.0 / 13)
    np.testing.assert_allclose(smoothed[:14], 0.0, atol=1e-12)
    np.testing.assert_allclose(smoothed[27:], 0.0, atol=1e-12)

    seq = np.random.default_rng(0).uniform(-2, 3, 100)
    smoothed = smooth_track(seq)
    assert smoothed.min() >= seq.min() - 1e-12 and smoothed.max() <= seq.max() + 1e-12
    assert len(smoothed) == len(seq)


def test_noise_only_labels():
    noise = gen_noise('white', 1.0, seed=2)
    track = make_labels(AudioClip(np.zeros(len(noise))), unit_impulse_air(), noise)
    assert np.all(track.vad == 0)
    np.testing.assert_allclose(track.vnr_db, -15.0)
    np.testing.assert_allclose(track.vnr_unit, 0.0, atol=1e-12)


def test_anechoic_labels_match_direct_equations():
    config = LabelConfig()
    speech, noise = gen_pseudo_speech(3.0, seed=5), gen_noise('pink', 3.0, seed=5)
    track = make_labels(speech, unit_impulse_air(), noise, config)

    vad = compute_vad(stft(speech), config.w_vad, config.rel_threshold)
    vnr = compute_vnr(stft(speech), stft(noise), config.w_vnr)
    np.testing.assert_allclose(track.vad, np.clip(smooth_track(vad), 0, 1))
    np.testing.assert_allclose(track.vnr_db, smooth_track(vnr))
    np.testing.assert_allclose(track.vnr_unit, (track.vnr_db + 15) / 55)


def test_labels_joint_scaling_and_determinism():
    speech, noise = gen_pseudo_speech(2.0, seed=6), gen_noise('brown', 2.0, seed=6)
    air = gen_air(0.4, 0.4, seed=6)
    track = make_labels(speech, air, noise)
    again = make_labels(speech, air, noise)
    np.testing.assert_array_equal(track.vnr_db, again.vnr_db)
    scaled = make_labels(AudioClip(10 * speech.samples), air, AudioClip(10 * noise.samples))
    np.testing.assert_allclose(scaled.vnr_db, track.vnr_db, atol=1e-9)


def test_labels_within_ranges():
    speech, noise = gen_pseudo_speech(2.0, seed=8), gen_noise('modulated', 2.0, seed=8)
    track = make_labels(speech, gen_air(0.8, 0.8, seed=8), noise)
    assert np.all((track.vad >= 0) & (track.vad <= 1))
    assert np.all((track.vnr_db >= -15) & (track.vnr_db <= 40))
    assert track.n_frames == StftConfig().frame_count(len(speech))


def test_label_csv_round_trip(tmp_path):
    speech, noise = gen_pseudo_speech(1.0, seed=9), gen_noise('pink', 1.0, seed=9)
    track = make_labels(speech, unit_impulse_air(), noise)
    path = tmp_path / 'labels.csv'
    write_labels_csv(track, path)
    assert path.read_text().splitlines()[0] == 'frame,vad,vnr_db,vnr_unit'
    restored = read_labels_csv(path)
    np.testing.assert_allclose(restored.vnr_db, track.vnr_db, rtol=1e-8)
    np.testing.assert_allclose(restored.vad, track.vad, rtol=1e-8, atol=1e-12)
