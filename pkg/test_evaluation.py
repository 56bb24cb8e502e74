#!/usr/bin/env python3
"""
VoiceShield Evaluation Tests
"""

import itertools

import numpy as np
import pandas as pd
import pytest

from audio_io import AudioClip
from crn import init_model
from errors import FrameCountMismatch, InvalidConfig, InvalidRange, LengthMismatch, SingleClass
from evaluation import (EvalConfig, auc_by_snr, eer, evaluate_clips, export_trace, nearest_rank,
                        pooled_auc, postprocess, reference_labels, resolve_head, roc_auc,
                        write_report)
from labels import unit_to_vnr_db
from train import ClipData


def mann_whitney(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def clip_with_targets(vad, snr_db=0.0, seed=0):
    vad = np.asarray(vad, dtype=np.float64)
    features = np.random.default_rng(seed).normal(0, 1, (len(vad), 64))
    return ClipData(features=features, vad=vad, vnr_unit=0.1 + 0.8 * vad, snr_db=snr_db, clip_id=str(seed))


def test_nearest_rank():
    assert nearest_rank(np.arange(1, 11), 90) == 9
    assert nearest_rank(np.arange(1, 11), 100) == 10
    assert nearest_rank(np.array([4.0]), 10) == 4.0
    assert nearest_rank(np.arange(1, 26), 90) == 23


def test_postprocess_constant():
    np.testing.assert_array_equal(postprocess(np.full(60, 0.37)), np.full(60, 0.37))


def test_postprocess_spike():
    pred = np.zeros(40)
    pred[6] = 1.0
    out = postprocess(pred)
    np.testing.assert_array_equal(np.flatnonzero(out), [6, 7, 8])

    interior = np.zeros(60)
    interior[30] = 1.0
    assert np.all(postprocess(interior) == 0.0)


def test_postprocess_is_causal():
    rng = np.random.default_rng(0)
    pred = rng.uniform(0, 1, 80)
    full = postprocess(pred)
    for k in (1, 10, 24, 25, 26, 79):
        np.testing.assert_array_equal(postprocess(pred[:k]), full[:k])


def test_postprocess_monotone():
    rng = np.random.default_rng(1)
    low = rng.uniform(0, 1, 70)
    high = low + rng.uniform(0, 0.3, 70)
    assert np.all(postprocess(high) >= postprocess(low))


def test_postprocess_invalid():
    with pytest.raises(InvalidRange):
        postprocess(np.zeros(5), window_s=0.0)
    with pytest.raises(InvalidRange):
        postprocess(np.zeros(5), percentile=0.0)


def test_auc_matches_pairwise_statistic():
    rng = np.random.default_rng(2)
    for _ in range(50):
        scores = np.round(rng.uniform(0, 1, 200), 1)  # plenty of ties
        labels = (rng.uniform(0, 1, 200) < 0.4).astype(int)
        labels[:2] = [0, 1]
        assert roc_auc(scores, labels).auc == pytest.approx(mann_whitney(scores, labels), abs=1e-9)


def test_auc_examples():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]).auc == pytest.approx(0.75)
    assert roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]).auc == pytest.approx(0.5)
    assert roc_auc([0.9, 0.8, 0.1], [1, 1, 0]).auc == 1.0
    assert roc_auc([0.9, 0.8, 0.1], [0, 0, 1]).auc == 0.0


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(3)
    scores = rng.uniform(0, 1, 50)
    labels = (rng.uniform(0, 1, 50) < 0.5).astype(int)
    labels[:2] = [0, 1]
    base = roc_auc(scores, labels).auc
    assert roc_auc(np.exp(3 * scores) - 7, labels).auc == pytest.approx(base, abs=1e-12)


def test_auc_errors():
    with pytest.raises(SingleClass):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(LengthMismatch):
        roc_auc([0.1, 0.2], [1])
    with pytest.raises(InvalidRange):
        roc_auc([0.1, 0.2], [0, 2])


def test_roc_curve_points():
    curve = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert curve.points[0] == (0.0, 0.0)
    assert curve.points[-1] == (1.0, 1.0)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)


def test_eer_cases():
    rate, threshold = eer([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert rate == 0.0
    assert 0.2 < threshold <= 0.8

    rate, _ = eer([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])
    assert rate == 1.0

    rate, _ = eer([0.1, 0.6, 0.4, 0.9], [0, 0, 1, 1])
    assert rate == pytest.approx(0.5)


def test_eer_minimizes_gap_over_thresholds():
    rng = np.random.default_rng(4)
    labels = (rng.uniform(0, 1, 200) < 0.5).astype(int)
    scores = rng.normal(labels * 1.0, 1.0)
    rate, threshold = eer(scores, labels)

    best_gap, best_rate = np.inf, None
    for t in np.unique(scores)[::-1]:
        fpr = np.mean(scores[labels == 0] >= t)
        fnr = 1.0 - np.mean(scores[labels == 1] >= t)
        if abs(fpr - fnr) < best_gap:
            best_gap, best_rate = abs(fpr - fnr), (fpr + fnr) / 2
    assert rate == pytest.approx(best_rate, abs=1e-12)
    assert np.min(scores) <= threshold <= np.max(scores)


def test_eer_native_threshold():
    _, unit = eer([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    _, db = eer([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1], to_native=unit_to_vnr_db)
    assert db == pytest.approx(unit * 55 - 15)


def test_auc_by_snr_single_clip():
    rows, excluded = auc_by_snr([(3.0, np.array([0.1, 0.9]), np.array([0, 1]))])
    assert excluded == 0
    assert len(rows) == 1
    row = rows.iloc[0]
    assert (row['bin_lo'], row['bin_hi']) == (0.0, 5.0)
    assert row['mean_auc'] == 1.0 and row['std_auc'] == 0.0 and row['count'] == 1


def test_auc_by_snr_permutation_invariant_and_excludes():
    rng = np.random.default_rng(5)
    records = []
    for i in range(12):
        labels = (rng.uniform(0, 1, 30) < 0.5).astype(int)
        labels[:2] = [0, 1]
        records.append((rng.uniform(-15, 25), rng.uniform(0, 1, 30), labels))
    records.append((2.0, np.ones(5), np.ones(5, dtype=int)))

    rows, excluded = auc_by_snr(records)
    shuffled, excluded_again = auc_by_snr([records[i] for i in rng.permutation(len(records))])
    assert excluded == excluded_again == 1
    pd.testing.assert_frame_equal(rows, shuffled)
    assert rows['count'].sum() == 12
    # Outer SNRs land in the first and last bins
    assert rows['bin_lo'].min() >= -10.0 and rows['bin_hi'].max() <= 20.0


def test_auc_by_snr_merged_bins():
    records = [(1.0, np.array([0.1, 0.9]), np.array([0, 1])),
               (7.0, np.array([0.9, 0.1]), np.array([0, 1]))]
    rows, _ = auc_by_snr(records, bin_edges=(-10.0, 10.0))
    assert len(rows) == 1
    assert rows.iloc[0]['mean_auc'] == pytest.approx(0.5)
    assert rows.iloc[0]['std_auc'] == pytest.approx(0.5)
    assert rows.iloc[0]['count'] == 2


def test_reference_labels():
    clip = clip_with_targets([0.2, 0.5, 0.9])
    np.testing.assert_array_equal(reference_labels(clip), [0, 1, 1])
    # vnr_unit 0.26, 0.5, 0.82 -> -0.7, 12.5, 30.1 dB
    np.testing.assert_array_equal(reference_labels(clip, EvalConfig(reference='vnr', vnr_reference_db=0.0)), [0, 1, 1])


def test_resolve_head():
    assert resolve_head(init_model(2), None) == 'vnr'
    assert resolve_head(init_model(1), None) == 'vad'
    with pytest.raises(InvalidConfig):
        resolve_head(init_model(1), 'vnr')


def test_evaluate_clips_report(tmp_path):
    model = init_model(2, seed=1)
    rng = np.random.default_rng(6)
    clips = []
    for i in range(4):
        vad = np.zeros(40)
        vad[10 + i:25 + i] = 1.0
        clips.append(clip_with_targets(vad, snr_db=float(rng.uniform(-5, 15)), seed=i))

    report = evaluate_clips(model, clips, jobs=2)
    assert report.head == 'vnr'
    assert 0.0 <= report.overall_auc <= 1.0
    assert report.n_clips == 4 and report.excluded_clips == 0
    assert report.overall_auc == pytest.approx(pooled_auc(model, clips))
    assert report.eer_threshold_db == pytest.approx(unit_to_vnr_db(report.eer_threshold))

    vad_report = evaluate_clips(model, clips, 'vad', EvalConfig(postprocess=False))
    assert np.isnan(vad_report.eer_threshold_db)

    write_report(report, tmp_path)
    overall = pd.read_csv(tmp_path / 'overall.csv')
    assert overall['head'].iloc[0] == 'vnr'
    by_snr = pd.read_csv(tmp_path / 'by_snr.csv')
    assert list(by_snr.columns) == ['bin_lo', 'bin_hi', 'mean_auc', 'std_auc', 'count']
    assert by_snr['count'].sum() == 4


def test_export_trace(tmp_path):
    samples = np.zeros(512 + 256 * 4)
    samples[300] = -0.8
    mixture = AudioClip(samples)
    vnr = np.array([0.0, 0.5, 1.0, 0.2, 0.4])
    path = tmp_path / 'trace.csv'
    export_trace(mixture, np.full(5, 0.3), vnr, path)

    df = pd.read_csv(path)
    assert list(df.columns) == ['time_s', 'waveform_env', 'vad', 'vnr_db']
    assert len(df) == 5
    np.testing.assert_allclose(df['time_s'], np.arange(5) * 0.016)
    np.testing.assert_allclose(df['waveform_env'], [0.8, 0.8, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(df['vnr_db'], [-15.0, 12.5, 40.0, -4.0, 7.0])

    export_trace(mixture, None, vnr, path)
    assert pd.read_csv(path)['vad'].isna().all()
    with pytest.raises(FrameCountMismatch):
        export_trace(mixture, np.zeros(4), None, path)
