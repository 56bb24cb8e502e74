"""
VoiceShield Training
Losses for the VAD and VNR targets, gradients through the CRN, AdamW with
percentile-based adaptive gradient clipping, the epoch loop with validation
early stopping, and a finite-difference gradient checker.
"""

import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from artifacts import write_csv
from audio_io import read_wav
from config import LOSS_KINDS, STREAM_GRAD_CHECK, STREAM_SHUFFLE, STREAM_SPLIT, make_rng
from crn import (CrnModel, backward_from_logits, crn_forward, forward_with_cache,
                 init_model)
from dsp import StftConfig, clip_features
from errors import (FrameCountMismatch, InvalidConfig, LengthMismatch, NonFiniteLoss,
                    ShapeMismatch, WrongOutputArity)
from evaluation import EvalConfig, nearest_rank, pooled_auc
from labels import read_labels_csv

logger = logging.getLogger(__name__)

PRED_CLAMP = 1e-7
LOG_COLUMNS = ['epoch', 'step', 'loss', 'grad_norm', 'clip_threshold', 'val_auc']

LOSS_HEADS = {
    'vad_bce': ('vad',),
    'vnr_mae': ('vnr',),
    'multi_bce_mae': ('vad', 'vnr'),
    'multi_bce_bce': ('vad', 'vnr'),
}


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = 'vad_bce'
    alpha: float = 0.2
    lr: float = 5e-5
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_clips: int = 50
    clip_percentile: float = 10.0
    patience: int = 10
    max_epochs: int = 100
    precision: str = 'float32'
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidConfig(f"Unknown loss kind {self.loss_kind!r}; expected one of {LOSS_KINDS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidConfig(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lr <= 0:
            raise InvalidConfig(f"lr must be positive, got {self.lr}")

    @property
    def heads(self) -> Tuple[str, ...]:
        return LOSS_HEADS[self.loss_kind]

    @property
    def n_out(self) -> int:
        return len(self.heads)

    @property
    def dtype(self):
        return np.float64 if self.precision == 'float64' else np.float32


@dataclass(frozen=True, eq=False)
class ClipData:
    """Network features and targets of one clip."""

    features: np.ndarray
    vad: np.ndarray
    vnr_unit: np.ndarray
    snr_db: float = float('nan')
    clip_id: str = ''

    def __post_init__(self):
        n = self.features.shape[0]
        if len(self.vad) != n or len(self.vnr_unit) != n:
            raise FrameCountMismatch(f"Clip {self.clip_id}: {n} feature frames, "
                                     f"{len(self.vad)}/{len(self.vnr_unit)} label frames")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    vad: np.ndarray
    vnr_unit: np.ndarray


def make_batch(clips: Sequence[ClipData]) -> Batch:
    """Stack clips, cropping all of them to the shortest one."""
    n_frames = min(c.n_frames for c in clips)
    return Batch(
        features=np.stack([c.features[:n_frames] for c in clips]),
        vad=np.stack([c.vad[:n_frames] for c in clips]),
        vnr_unit=np.stack([c.vnr_unit[:n_frames] for c in clips]),
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _pair(pred, target) -> Tuple[np.ndarray, np.ndarray]:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise LengthMismatch(f"Prediction shape {pred.shape} vs target shape {target.shape}")
    return pred, target


def bce_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """-(1/N) sum z log p + (1 - z) log(1 - p), with p clamped to [1e-7, 1 - 1e-7]."""
    pred, target = _pair(pred, target)
    p = np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    return float(-np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)))


def bce_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """dL/dpred of bce_loss; zero where the prediction is clamped."""
    pred, target = _pair(pred, target)
    p = np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)
    grad = (-(target / p) + (1.0 - target) / (1.0 - p)) / pred.size
    return np.where(p == pred, grad, 0.0)


def mae_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = _pair(pred, target)
    return float(np.mean(np.abs(pred - target)))


def mae_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pred, target = _pair(pred, target)
    return np.sign(pred - target) / pred.size


def multi_loss(pred_vad: np.ndarray, pred_vnr: np.ndarray, tgt_vad: np.ndarray, tgt_vnr: np.ndarray,
               kind: str, alpha: float = 0.2) -> float:
    """multi_bce_mae: (1 - alpha) BCE(vad) + alpha MAE(vnr); multi_bce_bce: BCE(vad) + BCE(vnr)."""
    if kind == 'multi_bce_mae':
        return (1.0 - alpha) * bce_loss(pred_vad, tgt_vad) + alpha * mae_loss(pred_vnr, tgt_vnr)
    if kind == 'multi_bce_bce':
        return bce_loss(pred_vad, tgt_vad) + bce_loss(pred_vnr, tgt_vnr)
    raise WrongOutputArity(f"{kind!r} is not a two-output loss")


def loss_and_grad(pred: np.ndarray, batch: Batch, kind: str, alpha: float = 0.2
                  ) -> Tuple[float, np.ndarray]:
    """
    Loss of a (B, T, n_out) prediction and its gradient w.r.t. the prediction.

    Means run over all B*T frames, so duplicating a clip leaves both unchanged.
    """
    expected = len(LOSS_HEADS[kind]) if kind in LOSS_HEADS else None
    if expected is None:
        raise InvalidConfig(f"Unknown loss kind {kind!r}")
    if pred.ndim != 3 or pred.shape[-1] != expected:
        raise WrongOutputArity(f"Loss {kind} needs {expected} outputs, prediction has shape {pred.shape}")

    grad = np.zeros(pred.shape, dtype=np.float64)
    if kind == 'vad_bce':
        loss = bce_loss(pred[..., 0], batch.vad)
        grad[..., 0] = bce_grad(pred[..., 0], batch.vad)
    elif kind == 'vnr_mae':
        loss = mae_loss(pred[..., 0], batch.vnr_unit)
        grad[..., 0] = mae_grad(pred[..., 0], batch.vnr_unit)
    else:
        loss = multi_loss(pred[..., 0], pred[..., 1], batch.vad, batch.vnr_unit, kind, alpha)
        if kind == 'multi_bce_mae':
            grad[..., 0] = (1.0 - alpha) * bce_grad(pred[..., 0], batch.vad)
            grad[..., 1] = alpha * mae_grad(pred[..., 1], batch.vnr_unit)
        else:
            grad[..., 0] = bce_grad(pred[..., 0], batch.vad)
            grad[..., 1] = bce_grad(pred[..., 1], batch.vnr_unit)
    return loss, grad


def _check_batch(model: CrnModel, batch: Batch):
    shape = batch.features.shape
    if batch.features.ndim != 3 or batch.vad.shape != shape[:2] or batch.vnr_unit.shape != shape[:2]:
        raise ShapeMismatch(f"Batch features {shape} do not match targets {batch.vad.shape}/{batch.vnr_unit.shape}")


def backward(model: CrnModel, batch: Batch, loss_kind: str, alpha: float = 0.2
             ) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss and gradients of every parameter, normalized over the B*T frames of the batch."""
    _check_batch(model, batch)
    probs, cache = forward_with_cache(batch.features, model)
    loss, dpred = loss_and_grad(probs, batch, loss_kind, alpha)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"Loss is {loss}")
    dlogits = (dpred * probs * (1.0 - probs)).astype(model.dtype)
    grads = backward_from_logits(dlogits, cache, model)
    return loss, grads


def batch_loss(model: CrnModel, batch: Batch, loss_kind: str, alpha: float = 0.2) -> float:
    probs = crn_forward(batch.features, model)
    loss, _ = loss_and_grad(probs, batch, loss_kind, alpha)
    return loss


def check_gradients(model: CrnModel, batch: Batch, loss_kind: str, alpha: float = 0.2,
                    eps: float = 1e-5, samples_per_tensor: int = 4, seed: int = 0) -> Dict[str, float]:
    """
    Compare analytic gradients with central finite differences in 64-bit precision.

    Returns:
        Max relative error |a - n| / max(|a|, |n|, 1e-6) over the sampled entries of each tensor
    """
    model = model.astype(np.float64)
    batch = Batch(batch.features.astype(np.float64), batch.vad, batch.vnr_unit)
    _, grads = backward(model, batch, loss_kind, alpha)
    rng = make_rng(seed, STREAM_GRAD_CHECK)

    errors = {}
    for name, param in model.params.items():
        flat = param.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples_per_tensor, flat.size), replace=False)
        worst = 0.0
        for i in picks:
            original = flat[i]
            flat[i] = original + eps
            plus = batch_loss(model, batch, loss_kind, alpha)
            flat[i] = original - eps
            minus = batch_loss(model, batch, loss_kind, alpha)
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            analytic = float(grads[name].reshape(-1)[i])
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
        errors[name] = worst
    return errors


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def autoclip_threshold(history: Sequence[float], percentile: float = 10.0) -> float:
    """Nearest-rank percentile of all gradient norms seen so far."""
    return nearest_rank(np.asarray(history), percentile)


class AutoClip:
    """Clip the global gradient norm to a running percentile of its history."""

    def __init__(self, percentile: float = 10.0):
        self.percentile = percentile
        self.history: List[float] = []

    def __call__(self, grads: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], float, float]:
        norm = global_norm(grads)
        self.history.append(norm)
        threshold = autoclip_threshold(self.history, self.percentile)
        if norm > threshold > 0:
            scale = threshold / norm
            grads = {name: g * g.dtype.type(scale) for name, g in grads.items()}
        return grads, norm, threshold


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def to_tensors(self) -> Dict[str, np.ndarray]:
        tensors = {'adam.step': np.array([self.t], dtype=np.float64)}
        for name in self.m:
            tensors[f'm.{name}'] = self.m[name]
            tensors[f'v.{name}'] = self.v[name]
        return tensors

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]) -> 'AdamState':
        state = cls(t=int(tensors['adam.step'][0]))
        for key, value in tensors.items():
            if key.startswith('m.'):
                state.m[key[2:]] = value
            elif key.startswith('v.'):
                state.v[key[2:]] = value
        return state


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
               lr: float, weight_decay: float, betas: Tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One AdamW update with decoupled weight decay:

        theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    beta1, beta2 = betas
    t = state.t + 1
    new_state = AdamState(t=t)
    new_params = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"Gradient of {name} has shape {g.shape}, parameter {theta.shape}")
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        if m.shape != theta.shape or v.shape != theta.shape:
            raise ShapeMismatch(f"Optimizer state for {name} does not match the parameter")

        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta
        new_params[name] = (theta - lr * update).astype(theta.dtype)
        new_state.m[name] = m.astype(theta.dtype)
        new_state.v[name] = v.astype(theta.dtype)
    return new_params, new_state


class AdamW:
    def __init__(self, lr: float = 5e-5, weight_decay: float = 0.01,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 state: Optional[AdamState] = None):
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = state or AdamState()

    def step(self, model: CrnModel, grads: Dict[str, np.ndarray]) -> CrnModel:
        params, self.state = adamw_step(model.params, grads, self.state, self.lr,
                                        self.weight_decay, self.betas, self.eps)
        return CrnModel(params, model.heads)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TrainResult:
    model: CrnModel
    history: pd.DataFrame
    best_epoch: int
    best_auc: float
    optimizer: AdamW

    @property
    def epochs(self) -> pd.DataFrame:
        """One row per epoch: mean training loss and validation AUC."""
        return self.history.groupby('epoch').agg(loss=('loss', 'mean'), val_auc=('val_auc', 'last')).reset_index()


def train_loop(config: TrainConfig, train_set: Sequence[ClipData], val_set: Sequence[ClipData],
               model: Optional[CrnModel] = None,
               validate: Optional[Callable[[CrnModel], float]] = None,
               eval_config: EvalConfig = EvalConfig(),
               log_path: Optional[Union[str, Path]] = None,
               jobs: int = 1) -> TrainResult:
    """
    Train until the validation metric stops improving.

    Args:
        config: optimizer, loss and stopping settings
        train_set: training clips; one epoch is one pass in a seeded shuffled order
        val_set: validation clips
        model: starting point; a fresh seeded model when None
        validate: metric to maximize; pooled validation AUC of the VNR head
            (VAD head when absent) by default
        eval_config: post-processing and reference used by the default metric
        log_path: training log CSV, rewritten after every epoch
        jobs: worker threads for validation

    Returns:
        TrainResult holding the best snapshot and the per-step history
    """
    if not train_set or not val_set:
        raise InvalidConfig("Training and validation sets must be non-empty")
    if model is None:
        model = init_model(config.n_out, config.seed, config.heads, config.dtype)
    elif model.heads != config.heads:
        raise WrongOutputArity(f"Loss {config.loss_kind} needs heads {config.heads}, model has {model.heads}")
    model = model.astype(config.dtype)
    if validate is None:
        validate = lambda m: pooled_auc(m, val_set, None, eval_config, jobs)

    optimizer = AdamW(config.lr, config.weight_decay, config.betas, config.eps)
    clipper = AutoClip(config.clip_percentile)
    rows: List[dict] = []
    best_model, best_auc, best_epoch = model.copy(), -math.inf, 0
    since_best = 0
    step = 0

    for epoch in range(1, config.max_epochs + 1):
        order = make_rng(config.seed, STREAM_SHUFFLE, epoch).permutation(len(train_set))
        for start in range(0, len(order), config.batch_clips):
            batch = make_batch([train_set[i] for i in order[start:start + config.batch_clips]])
            loss, grads = backward(model, batch, config.loss_kind, config.alpha)
            grads, norm, threshold = clipper(grads)
            model = optimizer.step(model, grads)
            step += 1
            rows.append({'epoch': epoch, 'step': step, 'loss': loss, 'grad_norm': norm,
                         'clip_threshold': threshold, 'val_auc': float('nan')})

        val_auc = float(validate(model))
        rows[-1]['val_auc'] = val_auc
        epoch_loss = np.mean([r['loss'] for r in rows if r['epoch'] == epoch])
        logger.info(f"Epoch {epoch}: loss {epoch_loss:.5f}, validation AUC {val_auc:.4f}")

        if val_auc > best_auc:
            best_model, best_auc, best_epoch = model.copy(), val_auc, epoch
            since_best = 0
        else:
            since_best += 1

        history = pd.DataFrame(rows, columns=LOG_COLUMNS)
        if log_path is not None:
            write_csv(history, log_path)
        if since_best >= config.patience:
            logger.info(f"No improvement for {since_best} evaluations, stopping after epoch {epoch}")
            break

    logger.info(f"Best validation AUC {best_auc:.4f} at epoch {best_epoch}")
    return TrainResult(model=best_model, history=pd.DataFrame(rows, columns=LOG_COLUMNS),
                       best_epoch=best_epoch, best_auc=best_auc, optimizer=optimizer)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def clips_from_examples(examples, stft_config: StftConfig = StftConfig(), n_mels: int = 64) -> List[ClipData]:
    """Features and targets of in-memory training examples."""
    clips = []
    for i, example in enumerate(examples):
        features = clip_features(example.mixture, stft_config, n_mels).frames
        clips.append(ClipData(features=features, vad=example.labels.vad, vnr_unit=example.labels.vnr_unit,
                              snr_db=example.spec.snr_db, clip_id=str(i)))
    return clips


def _load_clip(row, stft_config: StftConfig, n_mels: int) -> ClipData:
    mixture = read_wav(row['mix_path'])
    track = read_labels_csv(row['label_path'], stft_config.hop_s)
    features = clip_features(mixture, stft_config, n_mels).frames
    return ClipData(features=features, vad=track.vad, vnr_unit=track.vnr_unit,
                    snr_db=float(row['snr_db']), clip_id=str(row['mix_path']))


def clips_from_manifest(manifest: pd.DataFrame, stft_config: StftConfig = StftConfig(),
                        n_mels: int = 64, jobs: int = 1) -> List[ClipData]:
    """Load every manifest row (see synth.read_manifest); order follows the manifest."""
    rows = [row for _, row in manifest.iterrows()]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            clips = list(pool.map(lambda r: _load_clip(r, stft_config, n_mels), rows))
    else:
        clips = [_load_clip(r, stft_config, n_mels) for r in rows]
    logger.info(f"Loaded {len(clips)} clips")
    return clips


def split_clips(clips: Sequence[ClipData], val_fraction: float, seed: int
                ) -> Tuple[List[ClipData], List[ClipData]]:
    """Seeded hold-out split; at least one clip on each side."""
    if len(clips) < 2:
        raise InvalidConfig("At least two clips are needed to hold out a validation set")
    order = make_rng(seed, STREAM_SPLIT).permutation(len(clips))
    n_val = min(len(clips) - 1, max(1, int(round(val_fraction * len(clips)))))
    val = [clips[i] for i in sorted(order[:n_val])]
    train = [clips[i] for i in sorted(order[n_val:])]
    return train, val
