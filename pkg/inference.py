"""
VoiceShield Inference
Frame-synchronous streaming detector (features, CRN step, causal
post-processing) plus batch inference and real-time-factor measurement.
"""

import time
import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, List, Optional

import numpy as np
import pandas as pd
import psutil

from audio_io import SAMPLE_RATE, AudioClip
from crn import CrnModel, crn_forward, crn_step, init_stream_state
from dsp import LOG_FLOOR, StftConfig, analysis_window, clip_features, mel_filterbank
from evaluation import EvalConfig, nearest_rank, postprocess, window_frames

logger = logging.getLogger(__name__)

DEFAULT_CHUNK = 256


@dataclass(frozen=True, eq=False)
class FrameResult:
    index: int
    time_s: float
    raw: np.ndarray
    smoothed: Optional[np.ndarray]


class StreamingDetector:
    """
    Push audio of any chunk size, get one result per completed analysis frame.

    Each frame is processed as soon as its last sample arrives; nothing looks
    ahead. One detector serves exactly one stream.
    """

    def __init__(self, model: CrnModel, stft_config: StftConfig = StftConfig(), n_mels: int = 64,
                 eval_config: EvalConfig = EvalConfig(), postprocess: bool = True):
        self.model = model
        self.stft_config = stft_config
        self.postprocess = postprocess
        self.percentile = eval_config.percentile
        self.width = window_frames(eval_config.window_s, stft_config.hop_s)
        self.window = analysis_window(stft_config)
        self.weights = mel_filterbank(n_mels, 0.0, SAMPLE_RATE / 2, SAMPLE_RATE, stft_config.frame_len).matrix ** 2
        self.reset()

    def reset(self):
        self.buffer = np.zeros(0)
        self.state = init_stream_state(self.model)
        self.history: Deque[np.ndarray] = deque(maxlen=self.width)
        self.frames_done = 0

    def _features(self, frame: np.ndarray) -> np.ndarray:
        spectrum = np.fft.rfft(frame * self.window, norm='ortho')
        energies = self.weights @ (np.abs(spectrum) ** 2)
        return np.log10(np.maximum(energies, LOG_FLOOR))

    def push(self, samples: np.ndarray) -> List[FrameResult]:
        self.buffer = np.concatenate([self.buffer, np.asarray(samples, dtype=np.float64).reshape(-1)])
        frame_len, hop = self.stft_config.frame_len, self.stft_config.hop
        results = []
        while len(self.buffer) >= frame_len:
            raw, self.state = crn_step(self.state, self._features(self.buffer[:frame_len]), self.model)
            raw = raw.astype(np.float64)
            smoothed = None
            if self.postprocess:
                self.history.append(raw)
                recent = np.stack(self.history)
                smoothed = np.array([nearest_rank(recent[:, k], self.percentile) for k in range(raw.shape[0])])
            results.append(FrameResult(self.frames_done, self.frames_done * self.stft_config.hop_s, raw, smoothed))
            self.frames_done += 1
            self.buffer = self.buffer[hop:]
        return results


def _frame(model: CrnModel, raw: np.ndarray, smoothed: Optional[np.ndarray], hop_s: float) -> pd.DataFrame:
    data = {'frame': np.arange(raw.shape[0]), 'time_s': np.arange(raw.shape[0]) * hop_s}
    for k, head in enumerate(model.heads):
        data[f'raw_{head}'] = raw[:, k]
    if smoothed is not None:
        for k, head in enumerate(model.heads):
            data[f'pp_{head}'] = smoothed[:, k]
    return pd.DataFrame(data)


def run_batch(model: CrnModel, clip: AudioClip, stft_config: StftConfig = StftConfig(), n_mels: int = 64,
              eval_config: EvalConfig = EvalConfig(), postprocess_outputs: bool = True) -> pd.DataFrame:
    """Whole-clip inference; columns frame, time_s, raw_<head> and, when enabled, pp_<head>."""
    raw = crn_forward(clip_features(clip, stft_config, n_mels).frames, model).astype(np.float64)
    smoothed = None
    if postprocess_outputs:
        smoothed = np.column_stack([postprocess(raw[:, k], eval_config.window_s, eval_config.percentile,
                                                stft_config.hop_s) for k in range(raw.shape[1])])
    return _frame(model, raw, smoothed, stft_config.hop_s)


def run_streaming(model: CrnModel, clip: AudioClip, stft_config: StftConfig = StftConfig(), n_mels: int = 64,
                  eval_config: EvalConfig = EvalConfig(), postprocess_outputs: bool = True,
                  chunk: int = DEFAULT_CHUNK) -> pd.DataFrame:
    """Feed the clip through a StreamingDetector in chunks; same columns as run_batch."""
    detector = StreamingDetector(model, stft_config, n_mels, eval_config, postprocess_outputs)
    results: List[FrameResult] = []
    for start in range(0, len(clip), chunk):
        results.extend(detector.push(clip.samples[start:start + chunk]))
    raw = np.stack([r.raw for r in results])
    smoothed = np.stack([r.smoothed for r in results]) if postprocess_outputs else None
    return _frame(model, raw, smoothed, stft_config.hop_s)


@dataclass(frozen=True)
class RtfReport:
    audio_s: float
    wall_s: float
    cpu_s: float

    @property
    def rtf(self) -> float:
        return self.wall_s / self.audio_s

    @property
    def ms_per_audio_s(self) -> float:
        return 1000.0 * self.rtf

    @property
    def cpu_ms_per_audio_s(self) -> float:
        return 1000.0 * self.cpu_s / self.audio_s


def measure_rtf(run: Callable[[], object], audio_s: float) -> RtfReport:
    """Time one call of `run` by wall clock and by this process's CPU time."""
    process = psutil.Process()
    cpu_before = process.cpu_times()
    start = time.perf_counter()
    run()
    wall = time.perf_counter() - start
    cpu_after = process.cpu_times()
    cpu = (cpu_after.user - cpu_before.user) + (cpu_after.system - cpu_before.system)
    report = RtfReport(audio_s=audio_s, wall_s=wall, cpu_s=cpu)
    logger.info(f"Processed {audio_s:.2f} s of audio in {wall:.3f} s "
                f"({report.ms_per_audio_s:.1f} ms per audio second, CPU {report.cpu_ms_per_audio_s:.1f} ms)")
    return report
