"""
VoiceShield CRN
Causal convolutional recurrent network: four 2D convolutions with time kernel 2
and frequency stride 2, a 512-unit GRU and two fully connected layers, with
batch forward/backward passes and single-frame streaming inference.

Layer dimensions:
    conv2D   1 -> 16,  kernel (2,3), stride (1,2), padding (1,0,1,1), PReLU
    conv2D  16 -> 32,  ...
    conv2D  32 -> 64,  ...
    conv2D  64 -> 128, ...
    reshape 128 x 4 -> 512 (index c*4 + f)
    GRU     512 -> 512
    FC      512 -> 256, PReLU
    FC      256 -> n_out (1 or 2), sigmoid
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from config import STREAM_MODEL_INIT, make_rng
from errors import ShapeMismatch, WrongOutputArity

logger = logging.getLogger(__name__)

N_FEATURES = 64
CONV_CHANNELS = (1, 16, 32, 64, 128)
KERNEL = (2, 3)
HIDDEN = 512
FC_HIDDEN = 256
PRELU_INIT = 0.25
HEADS = ('vad', 'vnr')


def conv_out_width(width: int) -> int:
    """Frequency width after one layer: floor((F + 2 - 3) / 2) + 1."""
    return (width + 2 - KERNEL[1]) // 2 + 1


def conv_widths() -> List[int]:
    widths = [N_FEATURES]
    for _ in range(len(CONV_CHANNELS) - 1):
        widths.append(conv_out_width(widths[-1]))
    return widths


def parameter_shapes(n_out: int) -> Dict[str, Tuple[int, ...]]:
    """Ordered parameter names and shapes."""
    if n_out not in (1, 2):
        raise WrongOutputArity(f"n_out must be 1 or 2, got {n_out}")
    shapes: Dict[str, Tuple[int, ...]] = {}
    for layer in range(1, len(CONV_CHANNELS)):
        c_in, c_out = CONV_CHANNELS[layer - 1], CONV_CHANNELS[layer]
        shapes[f'conv{layer}.weight'] = (c_out, c_in) + KERNEL
        shapes[f'conv{layer}.bias'] = (c_out,)
        shapes[f'conv{layer}.slope'] = (c_out,)
    flat = CONV_CHANNELS[-1] * conv_widths()[-1]
    shapes['gru.w_ih'] = (3 * HIDDEN, flat)
    shapes['gru.w_hh'] = (3 * HIDDEN, HIDDEN)
    shapes['gru.bias'] = (3 * HIDDEN,)
    shapes['fc1.weight'] = (FC_HIDDEN, HIDDEN)
    shapes['fc1.bias'] = (FC_HIDDEN,)
    shapes['fc1.slope'] = (FC_HIDDEN,)
    shapes['out.weight'] = (n_out, FC_HIDDEN)
    shapes['out.bias'] = (n_out,)
    return shapes


def parameter_count(n_out: int) -> int:
    return int(sum(np.prod(shape) for shape in parameter_shapes(n_out).values()))


class CrnModel:
    """Network parameters plus the meaning of each output head."""

    def __init__(self, params: Dict[str, np.ndarray], heads: Tuple[str, ...]):
        n_out = int(np.asarray(params.get('out.bias', ())).shape[0]) if 'out.bias' in params else 0
        expected = parameter_shapes(n_out)
        if set(params) != set(expected):
            raise ShapeMismatch(f"Parameter names do not match the architecture: {sorted(set(params) ^ set(expected))}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ShapeMismatch(f"{name} has shape {params[name].shape}, expected {shape}")
        if len(heads) != n_out or any(h not in HEADS for h in heads):
            raise WrongOutputArity(f"Heads {heads} do not describe {n_out} outputs")
        self.params = {name: params[name] for name in expected}
        self.heads = tuple(heads)

    @property
    def n_out(self) -> int:
        return len(self.heads)

    @property
    def dtype(self) -> np.dtype:
        return self.params['out.bias'].dtype

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def head_index(self, head: str) -> int:
        if head not in self.heads:
            raise WrongOutputArity(f"Model outputs {self.heads}, has no {head!r} head")
        return self.heads.index(head)

    def astype(self, dtype) -> 'CrnModel':
        """Copy in another precision (float32 for training, float64 for gradient checks)."""
        return CrnModel({k: v.astype(dtype) for k, v in self.params.items()}, self.heads)

    def copy(self) -> 'CrnModel':
        return CrnModel({k: v.copy() for k, v in self.params.items()}, self.heads)

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def default_heads(n_out: int) -> Tuple[str, ...]:
    return ('vad',) if n_out == 1 else ('vad', 'vnr')


def init_model(n_out: int = 1, seed: int = 0, heads: Optional[Tuple[str, ...]] = None,
               dtype=np.float32) -> CrnModel:
    """Uniform +-1/sqrt(fan_in) weights, zero biases, PReLU slopes 0.25."""
    rng = make_rng(seed, STREAM_MODEL_INIT)
    params = {}
    for name, shape in parameter_shapes(n_out).items():
        if name.endswith('.slope'):
            params[name] = np.full(shape, PRELU_INIT, dtype=dtype)
        elif name.endswith('bias'):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(np.prod(shape[1:]))
            params[name] = rng.uniform(-bound, bound, shape).astype(dtype)
    return CrnModel(params, heads or default_heads(n_out))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, prev: Optional[np.ndarray]) -> np.ndarray:
    """(B, T, C, F) -> (B, T, F', C*2*3) patches; frame t-1 of frame 0 is `prev` (zeros if None)."""
    b, t, c, f = x.shape
    f_out = conv_out_width(f)
    padded = np.zeros((b, t + 1, c, f + 2), dtype=x.dtype)
    if prev is not None:
        padded[:, 0, :, 1:f + 1] = prev
    padded[:, 1:, :, 1:f + 1] = x

    cols = np.empty((b, t, f_out, c) + KERNEL, dtype=x.dtype)
    for kt in range(KERNEL[0]):
        for kf in range(KERNEL[1]):
            cols[..., kt, kf] = padded[:, kt:kt + t, :, kf:kf + 2 * f_out - 1:2].transpose(0, 1, 3, 2)
    return cols.reshape(b, t, f_out, c * KERNEL[0] * KERNEL[1])


def conv2d_causal(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                  prev: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Causal convolution over (time, frequency).

    Args:
        x: (B, T, C_in, F) input
        weight: (C_out, C_in, 2, 3); kernel index 0 along time reads frame t-1
        bias: (C_out,)
        prev: (B, C_in, F) input frame preceding x[:, 0]; zeros when None

    Returns:
        (B, T, C_out, F') with F' = floor((F - 1) / 2) + 1
    """
    if x.ndim != 4 or x.shape[2] != weight.shape[1]:
        raise ShapeMismatch(f"Conv input {x.shape} does not match weight {weight.shape}")
    c_out = weight.shape[0]
    cols = _im2col(x, prev)
    y = cols @ weight.reshape(c_out, -1).T + bias
    return y.transpose(0, 1, 3, 2)


def conv2d_causal_backward(dy: np.ndarray, x: np.ndarray, weight: np.ndarray
                           ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dweight, dbias) of conv2d_causal started from zero history."""
    b, t, c, f = x.shape
    c_out = weight.shape[0]
    f_out = dy.shape[3]
    cols = _im2col(x, None)
    dy_t = dy.transpose(0, 1, 3, 2)

    dweight = (dy_t.reshape(-1, c_out).T @ cols.reshape(-1, cols.shape[-1])).reshape(weight.shape)
    dbias = dy_t.sum(axis=(0, 1, 2))

    dcols = (dy_t @ weight.reshape(c_out, -1)).reshape((b, t, f_out, c) + KERNEL)
    dpadded = np.zeros((b, t + 1, c, f + 2), dtype=dy.dtype)
    for kt in range(KERNEL[0]):
        for kf in range(KERNEL[1]):
            dpadded[:, kt:kt + t, :, kf:kf + 2 * f_out - 1:2] += dcols[..., kt, kf].transpose(0, 1, 3, 2)
    return dpadded[:, 1:, :, 1:f + 1], dweight, dbias


def _channel_shape(x: np.ndarray, axis: int) -> List[int]:
    shape = [1] * x.ndim
    shape[axis] = -1
    return shape


def prelu(x: np.ndarray, slope: np.ndarray, axis: int = -1) -> np.ndarray:
    """y = x for x >= 0, slope * x otherwise; one slope per channel along `axis`."""
    a = np.reshape(slope, _channel_shape(x, axis))
    return np.where(x >= 0, x, a * x)


def prelu_backward(dy: np.ndarray, x: np.ndarray, slope: np.ndarray, axis: int = -1
                   ) -> Tuple[np.ndarray, np.ndarray]:
    a = np.reshape(slope, _channel_shape(x, axis))
    positive = x >= 0
    dx = np.where(positive, dy, a * dy)
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis % x.ndim)
    dslope = np.where(positive, 0.0, dy * x).sum(axis=reduce_axes).astype(dy.dtype)
    return dx, dslope


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return x @ weight.T + bias


def linear_backward(dy: np.ndarray, x: np.ndarray, weight: np.ndarray
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    dx = dy @ weight
    dweight = dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    dbias = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dweight, dbias


def _gru_cell(gx: np.ndarray, h_prev: np.ndarray, w_hh: np.ndarray):
    """One GRU update from precomputed input projections gx = W x + b."""
    hidden = h_prev.shape[-1]
    gh = h_prev @ w_hh[:2 * hidden].T
    z = expit(gx[..., :hidden] + gh[..., :hidden])
    r = expit(gx[..., hidden:2 * hidden] + gh[..., hidden:])
    rh = r * h_prev
    n = np.tanh(gx[..., 2 * hidden:] + rh @ w_hh[2 * hidden:].T)
    h = (1.0 - z) * h_prev + z * n
    return h, (h_prev, z, r, n, rh)


def gru_step(h_prev: np.ndarray, x: np.ndarray, w_ih: np.ndarray, w_hh: np.ndarray,
             bias: np.ndarray) -> np.ndarray:
    """
    Single GRU step; gates are stacked [update z; reset r; candidate] in the weights.

        z = sigmoid(W_z x + U_z h + b_z)
        r = sigmoid(W_r x + U_r h + b_r)
        n = tanh(W_n x + U_n (r * h) + b_n)
        h' = (1 - z) * h + z * n
    """
    h, _ = _gru_cell(x @ w_ih.T + bias, h_prev, w_hh)
    return h


def gru_forward(x: np.ndarray, w_ih: np.ndarray, w_hh: np.ndarray, bias: np.ndarray,
                h0: Optional[np.ndarray] = None):
    """Run the GRU over (B, T, D); returns hidden states (B, T, H) and the backward cache."""
    b, t, _ = x.shape
    hidden = w_hh.shape[1]
    gx = x @ w_ih.T + bias
    h = np.zeros((b, hidden), dtype=x.dtype) if h0 is None else h0
    states = np.empty((b, t, hidden), dtype=x.dtype)
    steps = []
    for i in range(t):
        h, step_cache = _gru_cell(gx[:, i], h, w_hh)
        states[:, i] = h
        steps.append(step_cache)
    return states, (x, steps)


def gru_backward(dstates: np.ndarray, cache, w_ih: np.ndarray, w_hh: np.ndarray):
    """Backpropagation through time; returns (dx, dw_ih, dw_hh, dbias)."""
    x, steps = cache
    b, t, _ = x.shape
    hidden = w_hh.shape[1]
    u_zr, u_n = w_hh[:2 * hidden], w_hh[2 * hidden:]

    dgx = np.empty((b, t, 3 * hidden), dtype=dstates.dtype)
    du_zr = np.zeros_like(u_zr)
    du_n = np.zeros_like(u_n)
    dh_next = np.zeros((b, hidden), dtype=dstates.dtype)

    for i in reversed(range(t)):
        h_prev, z, r, n, rh = steps[i]
        dh = dstates[:, i] + dh_next

        dn_pre = dh * z * (1.0 - n * n)
        dz_pre = dh * (n - h_prev) * z * (1.0 - z)
        dh_prev = dh * (1.0 - z)

        du_n += dn_pre.T @ rh
        drh = dn_pre @ u_n
        dr_pre = drh * h_prev * r * (1.0 - r)
        dh_prev += drh * r

        dzr_pre = np.concatenate([dz_pre, dr_pre], axis=-1)
        du_zr += dzr_pre.T @ h_prev
        dh_prev += dzr_pre @ u_zr

        dgx[:, i, :2 * hidden] = dzr_pre
        dgx[:, i, 2 * hidden:] = dn_pre
        dh_next = dh_prev

    dx, dw_ih, dbias = linear_backward(dgx, x, w_ih)
    return dx, dw_ih, np.concatenate([du_zr, du_n], axis=0), dbias


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

def _as_batch(features: np.ndarray, model: CrnModel) -> Tuple[np.ndarray, bool]:
    x = np.asarray(features)
    single = x.ndim == 2
    if single:
        x = x[np.newaxis]
    if x.ndim != 3 or x.shape[-1] != N_FEATURES:
        raise ShapeMismatch(f"Expected (T, {N_FEATURES}) or (B, T, {N_FEATURES}) features, got {np.shape(features)}")
    return x.astype(model.dtype, copy=False), single


def _conv_stack(x: np.ndarray, model: CrnModel, cache: Optional[list] = None) -> np.ndarray:
    h = x[:, :, np.newaxis, :]
    for layer in range(1, len(CONV_CHANNELS)):
        pre = conv2d_causal(h, model[f'conv{layer}.weight'], model[f'conv{layer}.bias'])
        if cache is not None:
            cache.append((h, pre))
        h = prelu(pre, model[f'conv{layer}.slope'], axis=2)
    return h


def conv_stack_forward(features: np.ndarray, model: CrnModel) -> np.ndarray:
    """Convolutional encoder output, (T, 128, 4) or (B, T, 128, 4)."""
    x, single = _as_batch(features, model)
    out = _conv_stack(x, model)
    return out[0] if single else out


def forward_with_cache(features: np.ndarray, model: CrnModel):
    """Batch forward keeping what the backward pass needs; returns (probs, cache)."""
    x, _ = _as_batch(features, model)
    conv_cache: list = []
    encoded = _conv_stack(x, model, conv_cache)
    b, t = encoded.shape[:2]
    flat = encoded.reshape(b, t, -1)

    states, gru_cache = gru_forward(flat, model['gru.w_ih'], model['gru.w_hh'], model['gru.bias'])
    fc1_pre = linear(states, model['fc1.weight'], model['fc1.bias'])
    fc1 = prelu(fc1_pre, model['fc1.slope'])
    logits = linear(fc1, model['out.weight'], model['out.bias'])
    probs = expit(logits)

    cache = {
        'conv': conv_cache,
        'encoded_shape': encoded.shape,
        'flat': flat,
        'gru': gru_cache,
        'states': states,
        'fc1_pre': fc1_pre,
        'fc1': fc1,
        'probs': probs,
    }
    return probs, cache


def backward_from_logits(dlogits: np.ndarray, cache, model: CrnModel) -> Dict[str, np.ndarray]:
    """Parameter gradients given dL/dlogits of shape (B, T, n_out)."""
    grads: Dict[str, np.ndarray] = {}

    dfc1, grads['out.weight'], grads['out.bias'] = linear_backward(dlogits, cache['fc1'], model['out.weight'])
    dfc1_pre, grads['fc1.slope'] = prelu_backward(dfc1, cache['fc1_pre'], model['fc1.slope'])
    dstates, grads['fc1.weight'], grads['fc1.bias'] = linear_backward(dfc1_pre, cache['states'], model['fc1.weight'])

    dflat, grads['gru.w_ih'], grads['gru.w_hh'], grads['gru.bias'] = gru_backward(
        dstates, cache['gru'], model['gru.w_ih'], model['gru.w_hh'])

    dh = dflat.reshape(cache['encoded_shape'])
    for layer in reversed(range(1, len(CONV_CHANNELS))):
        layer_in, pre = cache['conv'][layer - 1]
        dpre, grads[f'conv{layer}.slope'] = prelu_backward(dh, pre, model[f'conv{layer}.slope'], axis=2)
        dh, grads[f'conv{layer}.weight'], grads[f'conv{layer}.bias'] = conv2d_causal_backward(
            dpre, layer_in, model[f'conv{layer}.weight'])

    return {name: grads[name].astype(model.dtype, copy=False) for name in model.params}


def crn_forward(features: np.ndarray, model: CrnModel) -> np.ndarray:
    """Per-frame outputs in (0, 1): (T, n_out) for (T, 64) input, (B, T, n_out) for a batch."""
    probs, _ = forward_with_cache(features, model)
    return probs[0] if np.ndim(features) == 2 else probs


# ---------------------------------------------------------------------------
# Streaming
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StreamState:
    """Per-stream causal state: previous input frame of each conv layer and the GRU state."""

    conv_history: Tuple[np.ndarray, ...]
    gru_hidden: np.ndarray


def init_stream_state(model: CrnModel) -> StreamState:
    widths = conv_widths()
    history = tuple(np.zeros((CONV_CHANNELS[i], widths[i]), dtype=model.dtype)
                    for i in range(len(CONV_CHANNELS) - 1))
    return StreamState(conv_history=history, gru_hidden=np.zeros(HIDDEN, dtype=model.dtype))


def crn_step(state: StreamState, feature_frame: np.ndarray, model: CrnModel
             ) -> Tuple[np.ndarray, StreamState]:
    """Process one feature frame without look-ahead; returns (outputs, next state)."""
    frame = np.asarray(feature_frame, dtype=model.dtype).reshape(-1)
    if frame.shape[0] != N_FEATURES:
        raise ShapeMismatch(f"Expected a {N_FEATURES}-dim feature frame, got {frame.shape[0]}")

    h = frame.reshape(1, 1, 1, N_FEATURES)
    history = []
    for layer in range(1, len(CONV_CHANNELS)):
        history.append(h[0, 0].copy())
        pre = conv2d_causal(h, model[f'conv{layer}.weight'], model[f'conv{layer}.bias'],
                            prev=state.conv_history[layer - 1][np.newaxis])
        h = prelu(pre, model[f'conv{layer}.slope'], axis=2)

    flat = h.reshape(1, -1)
    hidden = gru_step(state.gru_hidden[np.newaxis], flat, model['gru.w_ih'], model['gru.w_hh'], model['gru.bias'])
    fc1 = prelu(linear(hidden, model['fc1.weight'], model['fc1.bias']), model['fc1.slope'])
    out = expit(linear(fc1, model['out.weight'], model['out.bias']))[0]
    return out, StreamState(conv_history=tuple(history), gru_hidden=hidden[0])
