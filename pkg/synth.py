"""
VoiceShield Corpus Synthesis
Generates the desk-scale training and validation corpus: pseudo-speech and
noise sources, synthetic AIRs, reverb augmentation, SNR mixing and level
augmentation. Every example is determined by (split seed, index).
"""

import logging
import traceback
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from artifacts import read_csv, write_csv
from audio_io import SAMPLE_RATE, AudioClip, read_wav, write_wav
from config import (STREAM_AIR, STREAM_MIX_SPEC, STREAM_NOISE, STREAM_SHIFT,
                    STREAM_SPEECH, derive_seed, make_rng)
from errors import (IoError, InvalidConfig, InvalidRt60, LengthMismatch,
                    NoActiveSpeech, SilentClip, SilentNoise)
from labels import (LabelConfig, LabelTrack, active_frame_mask, frame_energy,
                    make_labels, target_speech, window_air, write_labels_csv)

logger = logging.getLogger(__name__)

NOISE_KINDS = ('white', 'pink', 'brown', 'modulated')
MANIFEST_COLUMNS = ['index', 'seed', 'snr_db', 'level_dbfs', 'reverb', 'rt60', 'mix_path', 'label_path']

# Pseudo-speech generator parameters
F0_RANGE_HZ = (80.0, 300.0)
HARMONICS_RANGE = (3, 10)
AM_RATE_RANGE_HZ = (2.0, 8.0)
PAUSE_RANGE_S = (0.2, 1.5)
VOICED_RANGE_S = (0.3, 2.0)
ACTIVE_FRACTION_RANGE = (0.35, 0.72)
SPEECH_PEAK = 0.9
RAMP_S = 0.01


@dataclass(frozen=True)
class SynthConfig:
    labels: LabelConfig = field(default_factory=LabelConfig)
    clip_len_s: float = 10.0
    snr_mean_db: float = 5.0
    snr_std_db: float = 10.0
    level_mean_dbfs: float = -28.0
    level_std_dbfs: float = 10.0
    reverb_prob: float = 0.8
    rt60_range_s: Tuple[float, float] = (0.2, 1.0)
    noise_kinds: Tuple[str, ...] = NOISE_KINDS
    speech_dir: Optional[str] = None
    noise_dir: Optional[str] = None

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_len_s * SAMPLE_RATE))


@dataclass(frozen=True)
class MixSpec:
    snr_db: float
    level_dbfs: float
    reverb: bool
    air_rt60_s: float
    seed: int
    noise_kind: str = 'pink'


@dataclass(frozen=True, eq=False)
class TrainingExample:
    """A mixture with its labels and the clean components the labels came from."""

    mixture: AudioClip
    labels: LabelTrack
    spec: MixSpec
    speech: AudioClip
    air: AudioClip
    noise: AudioClip


@dataclass(frozen=True)
class VoicedSegment:
    start: int
    length: int
    f0: float
    harmonic_phases: Tuple[float, ...]
    am_rate_hz: float
    am_phase: float
    gain: float


# ---------------------------------------------------------------------------
# Sources
# ---------------------------------------------------------------------------

def gen_air(rt60_s: float, length_s: float, seed: int) -> AudioClip:
    """
    Synthetic AIR: a unit direct path at a small random offset followed by
    exponentially decaying white noise with a 60 dB decay over rt60_s.
    """
    if not 0.1 <= rt60_s <= 1.0:
        raise InvalidRt60(f"RT60 {rt60_s} s outside [0.1, 1.0] s")

    rng = make_rng(seed, STREAM_AIR)
    offset = int(rng.integers(0, int(0.005 * SAMPLE_RATE) + 1))
    n = max(int(round(length_s * SAMPLE_RATE)), offset + 1)

    h = np.zeros(n)
    h[offset] = 1.0
    t = np.arange(1, n - offset)
    envelope = 10.0 ** (-3.0 * t / (rt60_s * SAMPLE_RATE))
    h[offset + 1:] = rng.uniform(-0.5, 0.5, len(t)) * envelope
    h /= np.max(np.abs(h))
    return AudioClip(h, source_id=f'air:rt60={rt60_s:.3f}:seed={seed}')


def unit_impulse_air() -> AudioClip:
    return AudioClip(np.array([1.0]), source_id='air:anechoic')


def plan_pseudo_speech(duration_s: float, seed: int) -> List[VoicedSegment]:
    """
    Draw alternating pauses and voiced segments.

    Plans whose voiced fraction falls outside ACTIVE_FRACTION_RANGE are redrawn
    from the same stream, so the result stays a pure function of the seed.
    """
    rng = make_rng(seed, STREAM_SPEECH)
    n = int(round(duration_s * SAMPLE_RATE))
    segments: List[VoicedSegment] = []

    for _ in range(100):
        segments = []
        pos = int(rng.uniform(*PAUSE_RANGE_S) * SAMPLE_RATE)
        if pos >= n:
            pos = 0
        while pos < n:
            length = min(int(rng.uniform(*VOICED_RANGE_S) * SAMPLE_RATE), n - pos)
            n_harmonics = int(rng.integers(HARMONICS_RANGE[0], HARMONICS_RANGE[1] + 1))
            segments.append(VoicedSegment(
                start=pos,
                length=length,
                f0=float(rng.uniform(*F0_RANGE_HZ)),
                harmonic_phases=tuple(rng.uniform(0, 2 * np.pi, n_harmonics)),
                am_rate_hz=float(rng.uniform(*AM_RATE_RANGE_HZ)),
                am_phase=float(rng.uniform(0, 2 * np.pi)),
                gain=float(rng.uniform(0.6, 1.0)),
            ))
            pos += length + int(rng.uniform(*PAUSE_RANGE_S) * SAMPLE_RATE)

        voiced = sum(s.length for s in segments)
        if ACTIVE_FRACTION_RANGE[0] <= voiced / n <= ACTIVE_FRACTION_RANGE[1]:
            break
    return segments


def render_segment(segment: VoicedSegment) -> np.ndarray:
    """Amplitude-modulated harmonic complex with 1/k harmonic amplitudes and raised-cosine edges."""
    t = np.arange(segment.length) / SAMPLE_RATE
    wave = np.zeros(segment.length)
    for k, phase in enumerate(segment.harmonic_phases, start=1):
        if k * segment.f0 >= SAMPLE_RATE / 2:
            break
        wave += np.sin(2 * np.pi * k * segment.f0 * t + phase) / k

    wave *= 0.75 + 0.25 * np.sin(2 * np.pi * segment.am_rate_hz * t + segment.am_phase)

    ramp = min(int(RAMP_S * SAMPLE_RATE), segment.length // 2)
    if ramp > 0:
        fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        wave[:ramp] *= fade
        wave[-ramp:] *= fade[::-1]
    return segment.gain * wave


def gen_pseudo_speech(duration_s: float, seed: int) -> AudioClip:
    """Speech-like test signal: voiced harmonic segments separated by silent pauses."""
    n = int(round(duration_s * SAMPLE_RATE))
    samples = np.zeros(n)
    for segment in plan_pseudo_speech(duration_s, seed):
        samples[segment.start:segment.start + segment.length] += render_segment(segment)

    peak = np.max(np.abs(samples)) if n else 0.0
    if peak > 0:
        samples *= SPEECH_PEAK / peak
    return AudioClip(samples, source_id=f'pseudo-speech:seed={seed}')


def _colored(white: np.ndarray, exponent: float) -> np.ndarray:
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(len(white), 1.0 / SAMPLE_RATE)
    shape = np.zeros_like(freqs)
    shape[1:] = freqs[1:] ** (-exponent / 2.0)
    return np.fft.irfft(spectrum * shape, n=len(white))


def gen_noise(kind: str, duration_s: float, seed: int) -> AudioClip:
    """
    Noise source of the given kind at 0.1 RMS.

    white, pink and brown are stationary 1/f^beta noises (beta = 0, 1, 2);
    modulated is pink noise under a slow random amplitude envelope.
    """
    if kind not in NOISE_KINDS:
        raise InvalidConfig(f"Unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")

    rng = make_rng(seed, STREAM_NOISE)
    n = int(round(duration_s * SAMPLE_RATE))
    white = rng.standard_normal(n)

    if kind == 'white':
        samples = white
    elif kind == 'pink':
        samples = _colored(white, 1.0)
    elif kind == 'brown':
        samples = _colored(white, 2.0)
    else:
        t = np.arange(n) / SAMPLE_RATE
        envelope = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t + rng.uniform(0, 2 * np.pi))
        samples = _colored(white, 1.0) * envelope

    rms = np.sqrt(np.mean(samples ** 2))
    if rms > 0:
        samples = samples * (0.1 / rms)
    return AudioClip(samples, source_id=f'noise:{kind}:seed={seed}')


class WavDirectorySource:
    """Draws fixed-length excerpts from a directory of 16 kHz mono WAV files."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.files = sorted(self.directory.glob('*.wav'))
        if not self.files:
            raise IoError(f"No WAV files found in {self.directory}")
        logger.info(f"Using {len(self.files)} WAV files from {self.directory}")

    def draw(self, n_samples: int, rng: np.random.Generator) -> AudioClip:
        """Random file, random offset; short files are looped to length."""
        path = self.files[int(rng.integers(len(self.files)))]
        clip = read_wav(path)
        samples = clip.samples
        if len(samples) < n_samples:
            samples = np.resize(samples, n_samples)
            offset = 0
        else:
            offset = int(rng.integers(0, len(samples) - n_samples + 1))
        return AudioClip(samples[offset:offset + n_samples], source_id=f'{path}@{offset}')


# ---------------------------------------------------------------------------
# Mixing and levels
# ---------------------------------------------------------------------------

def _active_energies(target: AudioClip, noise: AudioClip, config: LabelConfig) -> Tuple[float, float]:
    if len(target) != len(noise):
        raise LengthMismatch(f"Speech has {len(target)} samples, noise has {len(noise)}")
    active = active_frame_mask(target, config)
    if not active.any():
        raise NoActiveSpeech("Target speech has no active frame")
    e_x = float(frame_energy(target, config.stft)[active].sum())
    e_v = float(frame_energy(noise, config.stft)[active].sum())
    if e_v <= 0.0:
        raise SilentNoise("Noise is silent over the speech-active frames")
    return e_x, e_v


def measure_snr(target: AudioClip, noise: AudioClip, config: LabelConfig = LabelConfig()) -> float:
    """SNR in dB over the frames where the target speech is active."""
    e_x, e_v = _active_energies(target, noise, config)
    return 10.0 * np.log10(e_x / e_v)


def mix_at_snr(speech_rev: AudioClip, noise: AudioClip, snr_db: float,
               target: Optional[AudioClip] = None,
               config: LabelConfig = LabelConfig()) -> Tuple[AudioClip, AudioClip]:
    """
    Scale noise to the requested SNR and add it to the reverberant speech.

    Args:
        speech_rev: speech as it appears in the mixture
        noise: noise, same length
        snr_db: requested SNR of target speech over the scaled noise
        target: target speech x(t) defining active frames and speech energy;
            defaults to speech_rev

    Returns:
        (mixture, scaled noise)
    """
    target = target if target is not None else speech_rev
    if len(speech_rev) != len(noise):
        raise LengthMismatch(f"Speech has {len(speech_rev)} samples, noise has {len(noise)}")
    e_x, e_v = _active_energies(target, noise, config)
    gain = np.sqrt(e_x / (e_v * 10.0 ** (snr_db / 10.0)))
    scaled = noise.with_samples(noise.samples * gain)
    mixture = speech_rev.with_samples(speech_rev.samples + scaled.samples, source_id='mixture')
    return mixture, scaled


def rms_dbfs(clip: AudioClip) -> float:
    """RMS level in dB relative to an RMS of 1.0."""
    rms = np.sqrt(np.mean(clip.samples ** 2))
    if rms <= 0.0:
        raise SilentClip("Clip is silent")
    return 20.0 * np.log10(rms)


def level_gain(clip: AudioClip, target_dbfs: float, max_peak: float = 0.99) -> float:
    """Gain bringing the clip to target_dbfs, reduced so the peak stays at max_peak."""
    gain = 10.0 ** ((target_dbfs - rms_dbfs(clip)) / 20.0)
    peak = np.max(np.abs(clip.samples))
    if peak * gain > 1.0:
        gain = max_peak / peak
    return float(gain)


def level_augment(clip: AudioClip, target_dbfs: float) -> AudioClip:
    return clip.with_samples(clip.samples * level_gain(clip, target_dbfs))


# ---------------------------------------------------------------------------
# Examples and datasets
# ---------------------------------------------------------------------------

def draw_mix_spec(split_seed: int, index: int, config: SynthConfig = SynthConfig()) -> MixSpec:
    seed = derive_seed(split_seed, index)
    rng = make_rng(seed, STREAM_MIX_SPEC)
    snr_db = float(rng.normal(config.snr_mean_db, config.snr_std_db))
    level_dbfs = min(float(rng.normal(config.level_mean_dbfs, config.level_std_dbfs)), 0.0)
    reverb = bool(rng.random() < config.reverb_prob)
    rt60 = float(rng.uniform(*config.rt60_range_s))
    kind = config.noise_kinds[int(rng.integers(len(config.noise_kinds)))]
    return MixSpec(snr_db=snr_db, level_dbfs=level_dbfs, reverb=reverb,
                   air_rt60_s=rt60 if reverb else 0.0, seed=seed, noise_kind=kind)


class ExampleBuilder:
    """Builds training examples from configured speech and noise sources."""

    def __init__(self, config: SynthConfig = SynthConfig()):
        self.config = config
        self.speech_source = WavDirectorySource(config.speech_dir) if config.speech_dir else None
        self.noise_source = WavDirectorySource(config.noise_dir) if config.noise_dir else None

    def speech(self, spec: MixSpec) -> AudioClip:
        if self.speech_source:
            return self.speech_source.draw(self.config.clip_samples, make_rng(spec.seed, STREAM_SPEECH))
        return gen_pseudo_speech(self.config.clip_len_s, spec.seed)

    def noise(self, spec: MixSpec) -> AudioClip:
        if self.noise_source:
            return self.noise_source.draw(self.config.clip_samples, make_rng(spec.seed, STREAM_NOISE))
        return gen_noise(spec.noise_kind, self.config.clip_len_s, spec.seed)

    def build(self, index: int, split_seed: int) -> TrainingExample:
        cfg = self.config
        spec = draw_mix_spec(split_seed, index, cfg)
        speech = self.speech(spec)
        air = gen_air(spec.air_rt60_s, spec.air_rt60_s, spec.seed) if spec.reverb else unit_impulse_air()

        speech_rev = target_speech(speech, air)
        target = target_speech(speech, window_air(air, cfg.labels.air_window))

        noise = self.noise(spec)
        shift = int(make_rng(spec.seed, STREAM_SHIFT).integers(len(noise)))
        noise = noise.with_samples(np.roll(noise.samples, shift))

        mixture, scaled_noise = mix_at_snr(speech_rev, noise, spec.snr_db, target, cfg.labels)

        # Level augmentation scales every component by the same gain
        gain = level_gain(mixture, spec.level_dbfs)
        speech = speech.with_samples(speech.samples * gain)
        noise = scaled_noise.with_samples(scaled_noise.samples * gain)
        mixture = mixture.with_samples(mixture.samples * gain, source_id=f'mix:{split_seed}:{index}')

        labels = make_labels(speech, air, noise, cfg.labels)
        return TrainingExample(mixture=mixture, labels=labels, spec=spec,
                               speech=speech, air=air, noise=noise)


def iter_examples(n_examples: int, split_seed: int, config: SynthConfig = SynthConfig(),
                  jobs: int = 1) -> Iterator[TrainingExample]:
    """
    Yield examples in index order; jobs > 1 builds them in worker threads.

    At most 2 * jobs examples are built ahead of the consumer.
    """
    if n_examples < 1:
        raise InvalidConfig(f"Example count must be >= 1, got {n_examples}")
    builder = ExampleBuilder(config)
    if jobs <= 1:
        for index in range(n_examples):
            yield builder.build(index, split_seed)
        return
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        pending = deque()
        next_index = 0
        while pending or next_index < n_examples:
            while next_index < n_examples and len(pending) < 2 * jobs:
                pending.append(pool.submit(builder.build, next_index, split_seed))
                next_index += 1
            yield pending.popleft().result()


def build_dataset(n_examples: int, split_seed: int, config: SynthConfig = SynthConfig(),
                  jobs: int = 1) -> List[TrainingExample]:
    return list(iter_examples(n_examples, split_seed, config, jobs))


def write_dataset(examples: Iterator[TrainingExample], out_dir: Union[str, Path]) -> pd.DataFrame:
    """
    Write mixtures, label files and the manifest.

    If generation fails, the files written so far are removed before the error
    propagates.

    Returns:
        The manifest as a DataFrame (paths relative to out_dir)
    """
    out = Path(out_dir)
    rows = []
    written: List[Path] = []
    try:
        for index, example in enumerate(examples):
            mix_name = f'mix_{index:05d}.wav'
            label_name = f'labels_{index:05d}.csv'
            write_wav(example.mixture, out / mix_name)
            written.append(out / mix_name)
            write_labels_csv(example.labels, out / label_name)
            written.append(out / label_name)
            spec = example.spec
            rows.append({
                'index': index,
                'seed': spec.seed,
                'snr_db': spec.snr_db,
                'level_dbfs': spec.level_dbfs,
                'reverb': int(spec.reverb),
                'rt60': spec.air_rt60_s,
                'mix_path': mix_name,
                'label_path': label_name,
            })
            if (index + 1) % 50 == 0:
                logger.info(f"Generated {index + 1} examples")

        manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
        write_csv(manifest, out / 'manifest.csv')
    except Exception as e:
        logger.error(f"Dataset generation failed after {len(rows)} examples: {str(e)}")
        logger.debug(traceback.format_exc())
        for path in written:
            path.unlink(missing_ok=True)
        raise

    logger.info(f"Wrote manifest with {len(manifest)} examples to {out / 'manifest.csv'}")
    return manifest


def read_manifest(path: Union[str, Path]) -> pd.DataFrame:
    """Read a manifest and resolve its paths against the manifest directory."""
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise IoError(f"Manifest not found: {manifest_path}")
    df = read_csv(manifest_path)
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise IoError(f"Manifest {manifest_path} lacks columns {missing}")
    base = manifest_path.parent
    df['mix_path'] = [str(base / p) for p in df['mix_path']]
    df['label_path'] = [str(base / p) for p in df['label_path']]
    return df
