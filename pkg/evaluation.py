"""
VoiceShield Evaluation
Causal percentile post-processing of frame predictions, ROC/AUC, equal error
rate, SNR-stratified AUC and trace export.
"""

import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics import auc, roc_curve

from artifacts import write_csv
from audio_io import AudioClip
from crn import CrnModel, crn_forward
from dsp import StftConfig, frame_signal
from errors import FrameCountMismatch, InvalidConfig, InvalidRange, LengthMismatch, SingleClass
from labels import unit_to_vnr_db, vnr_presence

if TYPE_CHECKING:
    from train import ClipData

logger = logging.getLogger(__name__)

BY_SNR_COLUMNS = ['bin_lo', 'bin_hi', 'mean_auc', 'std_auc', 'count']
TRACE_COLUMNS = ['time_s', 'waveform_env', 'vad', 'vnr_db']


@dataclass(frozen=True)
class EvalConfig:
    hop_s: float = 0.016
    postprocess: bool = True
    window_s: float = 0.4
    percentile: float = 90.0
    reference: str = 'vad'
    vnr_reference_db: float = -7.0
    snr_bin_edges: Tuple[float, ...] = (-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0)
    vnr_min_db: float = -15.0
    vnr_max_db: float = 40.0


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


@dataclass(eq=False)
class EvalReport:
    head: str
    overall_auc: float
    eer: float
    eer_threshold: float
    eer_threshold_db: float
    by_snr: pd.DataFrame
    n_clips: int
    excluded_clips: int

    def overall_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            'head': self.head,
            'auc': self.overall_auc,
            'eer': self.eer,
            'eer_threshold_db': self.eer_threshold_db,
            'eer_threshold': self.eer_threshold,
            'clips': self.n_clips,
            'excluded_clips': self.excluded_clips,
        }])


# ---------------------------------------------------------------------------
# Post-processing
# ---------------------------------------------------------------------------

def nearest_rank(values: np.ndarray, percentile: float) -> float:
    """The ceil(p/100 * n)-th smallest value (rank at least 1)."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    rank = max(1, math.ceil(percentile * n / 100.0 - 1e-9))
    return float(np.partition(values, rank - 1)[rank - 1])


def window_frames(window_s: float, hop_s: float) -> int:
    if window_s <= 0 or hop_s <= 0:
        raise InvalidRange("Post-processing window and hop must be positive")
    return max(1, int(round(window_s / hop_s)))


def postprocess(pred: np.ndarray, window_s: float = 0.4, percentile: float = 90.0,
                hop_s: float = 0.016) -> np.ndarray:
    """
    Trailing percentile filter without look-ahead.

    output[t] is the nearest-rank percentile of pred[max(0, t-W+1) .. t] with
    W = round(window_s / hop_s) frames (25 for 0.4 s at 16 ms).
    """
    pred = np.asarray(pred, dtype=np.float64)
    width = window_frames(window_s, hop_s)
    if not 0.0 < percentile <= 100.0:
        raise InvalidRange(f"Percentile must lie in (0, 100], got {percentile}")
    out = np.empty_like(pred)

    head = min(width - 1, len(pred))
    for t in range(head):
        out[t] = nearest_rank(pred[:t + 1], percentile)

    if len(pred) >= width:
        rank = max(1, math.ceil(percentile * width / 100.0 - 1e-9))
        windows = np.lib.stride_tricks.sliding_window_view(pred, width)
        out[width - 1:] = np.sort(windows, axis=1)[:, rank - 1]
    return out


# ---------------------------------------------------------------------------
# ROC, AUC, EER
# ---------------------------------------------------------------------------

def _check_binary(scores: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if len(scores) != len(labels):
        raise LengthMismatch(f"{len(scores)} scores vs {len(labels)} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise InvalidRange("Labels must be 0 or 1")
    labels = labels.astype(np.int64)
    if labels.min(initial=1) == labels.max(initial=0):
        raise SingleClass("Both classes must be present to compute a ROC curve")
    return scores, labels


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> RocCurve:
    """
    ROC over all distinct score thresholds, AUC by trapezoid.

    Equal scores form a single threshold step, so the AUC equals the
    Mann-Whitney statistic with ties counted as one half.
    """
    scores, labels = _check_binary(scores, labels)
    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=float(auc(fpr, tpr)))


def eer(scores: np.ndarray, labels: np.ndarray,
        to_native: Optional[Callable[[float], float]] = None) -> Tuple[float, float]:
    """
    Equal error rate.

    Returns:
        (rate, threshold) at the threshold minimizing |FPR - FNR|, with
        rate = (FPR + FNR) / 2; the threshold is mapped through `to_native`
        when given (e.g. unit VNR scores to dB)
    """
    curve = roc_auc(scores, labels)
    fnr = 1.0 - curve.tpr
    # Index 0 is the "nothing accepted" point above the largest score.
    candidates = np.arange(1, len(curve.fpr))
    best = candidates[np.argmin(np.abs(curve.fpr[candidates] - fnr[candidates]))]
    rate = float((curve.fpr[best] + fnr[best]) / 2.0)
    threshold = float(curve.thresholds[best])
    if to_native is not None:
        threshold = float(to_native(threshold))
    return rate, threshold


def _snr_bins(snr_db: np.ndarray, edges: Sequence[float]) -> pd.Categorical:
    edges = np.asarray(edges, dtype=np.float64)
    if len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise InvalidRange(f"SNR bin edges must be increasing, got {edges.tolist()}")
    clamped = np.clip(snr_db, edges[0], np.nextafter(edges[-1], -np.inf))
    return pd.cut(clamped, bins=edges, right=False)


def auc_by_snr(records: Sequence[Tuple[float, np.ndarray, np.ndarray]],
               bin_edges: Sequence[float] = EvalConfig.snr_bin_edges) -> Tuple[pd.DataFrame, int]:
    """
    Per-clip AUC grouped by mixing SNR.

    Clips lacking one class are excluded and counted. SNRs outside the edges
    fall into the first or last bin. Empty bins are omitted.

    Returns:
        (rows with bin_lo, bin_hi, mean_auc, std_auc, count; excluded clip count)
    """
    snrs, aucs = [], []
    excluded = 0
    for snr_db, scores, labels in records:
        try:
            aucs.append(roc_auc(scores, labels).auc)
            snrs.append(float(snr_db))
        except SingleClass:
            excluded += 1

    if not aucs:
        return pd.DataFrame(columns=BY_SNR_COLUMNS), excluded

    df = pd.DataFrame({'snr_db': snrs, 'auc': aucs})
    df['bin'] = _snr_bins(df['snr_db'].to_numpy(), bin_edges)
    grouped = df.groupby('bin', observed=True)['auc'].agg(
        mean_auc='mean',
        std_auc=lambda s: float(np.std(s, ddof=0)),
        count='count',
    ).reset_index()

    rows = pd.DataFrame({
        'bin_lo': [interval.left for interval in grouped['bin']],
        'bin_hi': [interval.right for interval in grouped['bin']],
        'mean_auc': grouped['mean_auc'].astype(float),
        'std_auc': grouped['std_auc'].astype(float),
        'count': grouped['count'].astype(int),
    }, columns=BY_SNR_COLUMNS)
    if excluded:
        logger.info(f"Excluded {excluded} single-class clips from the SNR breakdown")
    return rows, excluded


# ---------------------------------------------------------------------------
# Model evaluation
# ---------------------------------------------------------------------------

def reference_labels(clip: 'ClipData', config: EvalConfig = EvalConfig()) -> np.ndarray:
    """Binary ground truth: smoothed VAD >= 0.5, or VNR >= tau dB."""
    if config.reference == 'vad':
        return (np.asarray(clip.vad) >= 0.5).astype(np.int64)
    vnr_db = unit_to_vnr_db(clip.vnr_unit, config.vnr_min_db, config.vnr_max_db)
    return vnr_presence(vnr_db, config.vnr_reference_db)


def resolve_head(model: CrnModel, head: Optional[str]) -> str:
    """Requested head, or the VNR head when present and the VAD head otherwise."""
    if not head:
        return 'vnr' if 'vnr' in model.heads else model.heads[0]
    if head not in model.heads:
        raise InvalidConfig(f"Model outputs {model.heads}; no {head!r} head to evaluate")
    return head


def predict_clip(model: CrnModel, features: np.ndarray, head: str,
                 config: EvalConfig = EvalConfig()) -> np.ndarray:
    """Per-frame scores of one head, post-processed when configured."""
    scores = crn_forward(features, model)[:, model.head_index(head)].astype(np.float64)
    if config.postprocess:
        scores = postprocess(scores, config.window_s, config.percentile, config.hop_s)
    return scores


def _predict_all(model: CrnModel, clips: Sequence['ClipData'], head: str,
                 config: EvalConfig, jobs: int) -> List[np.ndarray]:
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda c: predict_clip(model, c.features, head, config), clips))
    return [predict_clip(model, c.features, head, config) for c in clips]


def pooled_auc(model: CrnModel, clips: Sequence['ClipData'], head: Optional[str] = None,
               config: EvalConfig = EvalConfig(), jobs: int = 1) -> float:
    """AUC over the frames of all clips pooled together."""
    head = resolve_head(model, head)
    scores = _predict_all(model, clips, head, config, jobs)
    refs = [reference_labels(c, config) for c in clips]
    return roc_auc(np.concatenate(scores), np.concatenate(refs)).auc


def evaluate_clips(model: CrnModel, clips: Sequence['ClipData'], head: Optional[str] = None,
                   config: EvalConfig = EvalConfig(), jobs: int = 1) -> EvalReport:
    """
    Pooled AUC and EER plus the per-clip SNR breakdown.

    Args:
        model: trained network
        clips: labelled clips with features and mixing SNR
        head: 'vad' or 'vnr'; defaults to the VNR head when the model has one
        config: post-processing and reference settings
        jobs: worker threads for per-clip prediction

    Returns:
        EvalReport
    """
    if not clips:
        raise InvalidConfig("Nothing to evaluate: no clips")
    head = resolve_head(model, head)
    scores = _predict_all(model, clips, head, config, jobs)
    refs = [reference_labels(c, config) for c in clips]

    pooled_scores, pooled_refs = np.concatenate(scores), np.concatenate(refs)
    overall = roc_auc(pooled_scores, pooled_refs).auc
    rate, threshold = eer(pooled_scores, pooled_refs)
    threshold_db = (float(unit_to_vnr_db(threshold, config.vnr_min_db, config.vnr_max_db))
                    if head == 'vnr' else float('nan'))

    by_snr, excluded = auc_by_snr([(c.snr_db, s, r) for c, s, r in zip(clips, scores, refs)],
                                  config.snr_bin_edges)
    logger.info(f"Evaluated {len(clips)} clips on the {head} head: AUC {overall:.4f}, EER {rate:.4f}")
    return EvalReport(head=head, overall_auc=overall, eer=rate, eer_threshold=threshold,
                      eer_threshold_db=threshold_db, by_snr=by_snr, n_clips=len(clips),
                      excluded_clips=excluded)


def write_report(report: EvalReport, out_dir: Union[str, Path]):
    """Write overall.csv and by_snr.csv into out_dir."""
    out = Path(out_dir)
    write_csv(report.overall_frame(), out / 'overall.csv')
    write_csv(report.by_snr, out / 'by_snr.csv')
    logger.info(f"Wrote evaluation report to {out}")


def export_trace(mixture: AudioClip, vad_pred: Optional[np.ndarray], vnr_pred_unit: Optional[np.ndarray],
                 path: Union[str, Path], stft_config: StftConfig = StftConfig(),
                 vnr_min_db: float = -15.0, vnr_max_db: float = 40.0):
    """
    Frame-rate trace for external plotting: time, per-frame peak |sample|,
    VAD output and VNR output in dB. A missing head is written as empty values.
    """
    frames = frame_signal(mixture.samples, stft_config.frame_len, stft_config.hop)
    n_frames = frames.shape[0]
    for name, pred in (('vad', vad_pred), ('vnr', vnr_pred_unit)):
        if pred is not None and len(pred) != n_frames:
            raise FrameCountMismatch(f"{name} track has {len(pred)} frames, mixture has {n_frames}")

    missing = np.full(n_frames, np.nan)
    df = pd.DataFrame({
        'time_s': np.arange(n_frames) * stft_config.hop_s,
        'waveform_env': np.abs(frames).max(axis=1),
        'vad': missing if vad_pred is None else np.asarray(vad_pred, dtype=np.float64),
        'vnr_db': missing if vnr_pred_unit is None else unit_to_vnr_db(vnr_pred_unit, vnr_min_db, vnr_max_db),
    }, columns=TRACE_COLUMNS)
    write_csv(df, path)
