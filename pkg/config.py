"""
VoiceShield Configuration
Flat key=value run configuration with documented defaults, plus the seed
splitting scheme every random draw goes through.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
from dotenv import dotenv_values

from errors import InvalidConfig

logger = logging.getLogger(__name__)

# Random stream identifiers. A generator is always seeded from
# SeedSequence([seed, stream, *extra]) so modules stay independently deterministic.
STREAM_MIX_SPEC = 1
STREAM_SPEECH = 2
STREAM_NOISE = 3
STREAM_AIR = 4
STREAM_SHIFT = 5
STREAM_MODEL_INIT = 10
STREAM_SHUFFLE = 11
STREAM_SPLIT = 12
STREAM_GRAD_CHECK = 13

# Every tunable with its default; values follow the published training recipe.
DEFAULTS: Dict[str, Any] = {
    # Framing and features
    'frame_len': 512,
    'hop': 256,
    'n_mels': 64,
    # Training targets
    'vad_fmin_hz': 150.0,
    'vad_fmax_hz': 5000.0,
    'vad_rel_threshold': 0.01,
    'vnr_bands': 32,
    'vnr_min_db': -15.0,
    'vnr_max_db': 40.0,
    'label_smooth_s': 0.2,
    'air_decay_db': 60.0,
    'air_decay_time_s': 0.3,
    # Corpus synthesis
    'clip_len_s': 10.0,
    'snr_mean_db': 5.0,
    'snr_std_db': 10.0,
    'level_mean_dbfs': -28.0,
    'level_std_dbfs': 10.0,
    'reverb_prob': 0.8,
    'rt60_min_s': 0.2,
    'rt60_max_s': 1.0,
    'noise_kinds': 'white,pink,brown,modulated',
    'speech_dir': '',
    'noise_dir': '',
    # Training
    'loss_kind': 'vad_bce',
    'alpha': 0.2,
    'lr': 5e-5,
    'weight_decay': 0.01,
    'beta1': 0.9,
    'beta2': 0.999,
    'adam_eps': 1e-8,
    'batch_clips': 50,
    'clip_percentile': 10.0,
    'patience': 10,
    'max_epochs': 100,
    'precision': 'float32',
    'val_fraction': 0.2,
    # Evaluation and inference
    'postprocess': True,
    'postprocess_window_s': 0.4,
    'postprocess_percentile': 90.0,
    'eval_reference': 'vad',
    'vnr_reference_db': -7.0,
    'snr_bin_edges': '-10,-5,0,5,10,15,20',
    'head': '',
    # Run control
    'seed': 0,
    'jobs': 1,
}

LOSS_KINDS = ('vad_bce', 'vnr_mae', 'multi_bce_mae', 'multi_bce_bce')


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a generator for the (seed, stream, ...) tuple."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(s) for s in stream)]))


def derive_seed(seed: int, *stream: int) -> int:
    """Derive a 64-bit unsigned seed for the (seed, stream, ...) tuple."""
    state = np.random.SeedSequence([int(seed), *(int(s) for s in stream)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def parse_float_list(text: str) -> List[float]:
    """Parse a comma separated list of numbers."""
    try:
        return [float(item) for item in str(text).split(',') if item.strip()]
    except ValueError:
        raise InvalidConfig(f"Invalid number list: {text!r}")


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(value, type(default)) and not (isinstance(default, int) and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise InvalidConfig(f"Invalid value for {key}: {text!r}")
    return text


class RunConfig:
    """Validated flat configuration map."""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self.values = dict(DEFAULTS)
        if values:
            self.update(values)

    @classmethod
    def from_file(cls, path: Optional[str]) -> 'RunConfig':
        """Load a `key = value` file; `#` starts a comment."""
        config = cls()
        if not path:
            return config
        config_path = Path(path)
        if not config_path.exists():
            raise InvalidConfig(f"Config file not found: {config_path}")
        raw = dotenv_values(config_path, interpolate=False)
        config.update({k: v for k, v in raw.items() if v is not None})
        logger.info(f"Loaded {len(raw)} config keys from {config_path}")
        return config

    def update(self, values: Dict[str, Any]):
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise InvalidConfig(f"Unknown config keys: {', '.join(unknown)}")
        for key, value in values.items():
            self.values[key] = _coerce(key, value)
        self.validate()

    def apply_overrides(self, assignments: Iterable[str]):
        """Apply `KEY=VALUE` strings from the command line."""
        parsed = {}
        for item in assignments or []:
            if '=' not in item:
                raise InvalidConfig(f"Expected KEY=VALUE, got {item!r}")
            key, value = item.split('=', 1)
            parsed[key.strip()] = value.strip()
        if parsed:
            self.update(parsed)

    def validate(self):
        v = self.values
        if v['loss_kind'] not in LOSS_KINDS:
            raise InvalidConfig(f"loss_kind must be one of {LOSS_KINDS}")
        if not 0.0 <= v['alpha'] <= 1.0:
            raise InvalidConfig("alpha must lie in [0, 1]")
        if v['lr'] <= 0:
            raise InvalidConfig("lr must be positive")
        if v['hop'] > v['frame_len'] or v['frame_len'] % 2:
            raise InvalidConfig("frame_len must be even and at least hop")
        if v['batch_clips'] < 1 or v['patience'] < 1 or v['max_epochs'] < 1 or v['jobs'] < 1:
            raise InvalidConfig("batch_clips, patience, max_epochs and jobs must be >= 1")
        if v['precision'] not in ('float32', 'float64'):
            raise InvalidConfig("precision must be float32 or float64")
        if v['eval_reference'] not in ('vad', 'vnr'):
            raise InvalidConfig("eval_reference must be vad or vnr")
        if v['head'] not in ('', 'vad', 'vnr'):
            raise InvalidConfig("head must be vad or vnr")
        if not 0.0 <= v['reverb_prob'] <= 1.0:
            raise InvalidConfig("reverb_prob must lie in [0, 1]")
        if not 0.0 <= v['val_fraction'] < 1.0:
            raise InvalidConfig("val_fraction must lie in [0, 1)")

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    # Per-module views

    def stft_config(self):
        from dsp import StftConfig
        return StftConfig(frame_len=self['frame_len'], hop=self['hop'])

    def label_config(self):
        from labels import AirWindowSpec, LabelConfig
        return LabelConfig(
            stft=self.stft_config(),
            vad_fmin_hz=self['vad_fmin_hz'],
            vad_fmax_hz=self['vad_fmax_hz'],
            rel_threshold=self['vad_rel_threshold'],
            vnr_bands=self['vnr_bands'],
            vnr_min_db=self['vnr_min_db'],
            vnr_max_db=self['vnr_max_db'],
            smooth_s=self['label_smooth_s'],
            air_window=AirWindowSpec(decay_db=self['air_decay_db'],
                                     decay_time_s=self['air_decay_time_s']),
        )

    def synth_config(self):
        from synth import SynthConfig
        kinds = tuple(k.strip() for k in self['noise_kinds'].split(',') if k.strip())
        return SynthConfig(
            labels=self.label_config(),
            clip_len_s=self['clip_len_s'],
            snr_mean_db=self['snr_mean_db'],
            snr_std_db=self['snr_std_db'],
            level_mean_dbfs=self['level_mean_dbfs'],
            level_std_dbfs=self['level_std_dbfs'],
            reverb_prob=self['reverb_prob'],
            rt60_range_s=(self['rt60_min_s'], self['rt60_max_s']),
            noise_kinds=kinds,
            speech_dir=self['speech_dir'] or None,
            noise_dir=self['noise_dir'] or None,
        )

    def train_config(self):
        from train import TrainConfig
        return TrainConfig(
            loss_kind=self['loss_kind'],
            alpha=self['alpha'],
            lr=self['lr'],
            weight_decay=self['weight_decay'],
            betas=(self['beta1'], self['beta2']),
            eps=self['adam_eps'],
            batch_clips=self['batch_clips'],
            clip_percentile=self['clip_percentile'],
            patience=self['patience'],
            max_epochs=self['max_epochs'],
            precision=self['precision'],
            seed=self['seed'],
        )

    def eval_config(self):
        from evaluation import EvalConfig
        return EvalConfig(
            hop_s=self['hop'] / 16000.0,
            postprocess=self['postprocess'],
            window_s=self['postprocess_window_s'],
            percentile=self['postprocess_percentile'],
            reference=self['eval_reference'],
            vnr_reference_db=self['vnr_reference_db'],
            snr_bin_edges=tuple(parse_float_list(self['snr_bin_edges'])),
            vnr_min_db=self['vnr_min_db'],
            vnr_max_db=self['vnr_max_db'],
        )
