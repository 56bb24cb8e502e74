"""
VoiceShield Audio I/O
Reads and writes mono 16 kHz PCM WAV files and enforces the sample-format
contract: no resampling, no downmixing, finite samples in [-1, 1].
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import soundfile as sf

from artifacts import atomic_write
from errors import (AudioFileNotFound, EmptyAudio, IoError, NonFiniteSamples,
                    SampleRateMismatch, UnsupportedFormat)

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
PCM16_SCALE = 32768.0
SUPPORTED_SUBTYPES = ('PCM_16', 'FLOAT')


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Immutable mono 16 kHz sample sequence with provenance."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_id: str = ''

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise SampleRateMismatch(f"Expected {SAMPLE_RATE} Hz, got {self.sample_rate} Hz")
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise NonFiniteSamples(f"Clip {self.source_id or '<anonymous>'} contains non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, 'samples', samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def with_samples(self, samples: np.ndarray, source_id: str = None) -> 'AudioClip':
        """Return a new clip with the same provenance and new samples."""
        return AudioClip(samples, self.sample_rate, source_id if source_id is not None else self.source_id)


def read_wav(path: Union[str, Path]) -> AudioClip:
    """
    Read a mono 16 kHz WAV file.

    Args:
        path: RIFF/WAVE file holding 16-bit integer or 32-bit float PCM

    Returns:
        AudioClip with samples normalized to [-1, 1]
    """
    wav_path = Path(path)
    if not wav_path.exists():
        raise AudioFileNotFound(f"Audio file not found: {wav_path}")

    try:
        info = sf.info(str(wav_path))
    except RuntimeError as e:
        raise UnsupportedFormat(f"{wav_path} is not a readable WAV file: {e}")

    if info.format != 'WAV' or info.subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedFormat(f"{wav_path}: {info.format}/{info.subtype} is not PCM_16 or FLOAT WAV")
    if info.channels != 1:
        raise UnsupportedFormat(f"{wav_path}: {info.channels} channels, only mono is supported")
    if info.samplerate != SAMPLE_RATE:
        raise SampleRateMismatch(f"{wav_path}: {info.samplerate} Hz, expected {SAMPLE_RATE} Hz")
    if info.frames == 0:
        raise EmptyAudio(f"{wav_path} holds no samples")

    try:
        if info.subtype == 'PCM_16':
            raw, _ = sf.read(str(wav_path), dtype='int16', always_2d=False)
            samples = raw.astype(np.float64) / PCM16_SCALE
        else:
            raw, _ = sf.read(str(wav_path), dtype='float32', always_2d=False)
            samples = raw.astype(np.float64)
    except RuntimeError as e:
        raise IoError(f"Failed to read {wav_path}: {e}")

    logger.debug(f"Read {len(samples)} samples from {wav_path}")
    return AudioClip(samples, SAMPLE_RATE, source_id=str(wav_path))


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1] and quantize to 16-bit integers (scale 32768)."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.round(clipped * PCM16_SCALE), -32768, 32767).astype(np.int16)


def write_wav(clip: AudioClip, path: Union[str, Path]):
    """
    Write a clip as 16-bit PCM; samples outside [-1, 1] are clamped.

    The write is atomic: the file appears only once fully written.
    """
    if len(clip) == 0:
        raise EmptyAudio("Refusing to write a zero-length clip")

    pcm = to_pcm16(clip.samples)
    with atomic_write(path) as tmp:
        try:
            sf.write(str(tmp), pcm, clip.sample_rate, subtype='PCM_16', format='WAV')
        except RuntimeError as e:
            raise IoError(f"Failed to write {path}: {e}")
    logger.debug(f"Wrote {len(pcm)} samples to {path}")
