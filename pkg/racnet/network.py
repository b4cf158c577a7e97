#!/usr/bin/env python3
"""
racnet - Network Core

A minimal trainable convolutional network on numpy. Provides:
- layer kinds conv2d, batchnorm, relu, maxpool, avgpool, flatten, dense
- forward passes with activation taps after batch-norm + ReLU
- reverse-mode gradients for training and for input-space attacks
- model persistence with a versioned joblib file

Array layout is (N, C, H, W) for images and (N, D) for vectors. A trained
Network is never mutated by forward passes, so it can be shared by readers.
"""

import copy
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import joblib
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp, softmax

from racnet.validation import DataValidator, ValidationError

logger = logging.getLogger(__name__)

MODEL_FORMAT = 'racnet-model'
MODEL_FORMAT_VERSION = 1

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class ShapeError(ValidationError):
    """Raised when a tensor does not match the shape a layer expects."""
    pass


class TrainingError(RuntimeError):
    """Raised when training diverges."""
    pass


class ModelFileError(Exception):
    """Base class for model file problems."""
    pass


class CorruptModelFileError(ModelFileError):
    """Raised when a model file cannot be decoded."""
    pass


class ModelVersionError(ModelFileError):
    """Raised when a model file was written by an incompatible format version."""
    pass


# ---------------------------------------------------------------------------
# Convolution primitives
# ---------------------------------------------------------------------------

def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(x: np.ndarray, kernel_size: int, stride: int, padding: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Unfold (N, C, H, W) into rows of receptive fields, shape (N*Ho*Wo, C*K*K)."""
    xp = _pad(x, padding)
    win = sliding_window_view(xp, (kernel_size, kernel_size), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kernel_size * kernel_size)
    return cols, (ho, wo)


def col2im(cols: np.ndarray, x_shape: Tuple[int, ...], kernel_size: int, stride: int,
           padding: int, out_hw: Tuple[int, int]) -> np.ndarray:
    """Adjoint of im2col: scatter-add receptive-field rows back onto the input grid."""
    n, c, h, w = x_shape
    ho, wo = out_hw
    k = kernel_size
    patches = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patches[:, :, :, :, i, j]
    if padding:
        return xp[:, :, padding:padding + h, padding:padding + w]
    return xp


def conv2d(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray],
           stride: int, padding: int) -> np.ndarray:
    """2-D cross-correlation; weight has shape (Cout, Cin, K, K)."""
    cout, _, k, _ = weight.shape
    cols, (ho, wo) = im2col(x, k, stride, padding)
    out = cols @ weight.reshape(cout, -1).T.astype(x.dtype, copy=False)
    if bias is not None:
        out = out + bias.astype(x.dtype, copy=False)
    return out.reshape(x.shape[0], ho, wo, cout).transpose(0, 3, 1, 2)


def conv2d_transpose(dy: np.ndarray, weight: np.ndarray, x_shape: Tuple[int, ...],
                     stride: int, padding: int) -> np.ndarray:
    """Adjoint of conv2d with respect to its input."""
    cout, _, k, _ = weight.shape
    ho, wo = dy.shape[2:]
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
    dcols = dy_mat @ weight.reshape(cout, -1).astype(dy.dtype, copy=False)
    return col2im(dcols, x_shape, k, stride, padding, (ho, wo))


def _pool_windows(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.reshape(win.shape[:4] + (size * size,))


def maxpool_scatter(dy: np.ndarray, argmax: np.ndarray, x_shape: Tuple[int, ...],
                    size: int, stride: int) -> np.ndarray:
    """Route each pooled value back to the input position that won the max."""
    ho, wo = dy.shape[2:]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for i in range(size):
        for j in range(size):
            mask = argmax == (i * size + j)
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dy * mask
    return dx


def avgpool_transpose(dy: np.ndarray, x_shape: Tuple[int, ...], size: int, stride: int) -> np.ndarray:
    """Adjoint of average pooling."""
    ho, wo = dy.shape[2:]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    share = dy / float(size * size)
    for i in range(size):
        for j in range(size):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
    return dx


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    """Base class. Layers hold parameters only; forward state lives in caches."""

    kind = ''
    weighted = False

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.input_shape: Optional[Tuple[int, ...]] = None
        self.output_shape: Optional[Tuple[int, ...]] = None

    def build(self, input_shape: Tuple[int, ...], rng: Optional[np.random.Generator] = None) -> Tuple[int, ...]:
        self.input_shape = tuple(input_shape)
        self.output_shape = self._infer_shape(self.input_shape)
        if rng is not None:
            self._init_params(rng)
        return self.output_shape

    def _infer_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return input_shape

    def _init_params(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x: np.ndarray, training: bool = False) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache: Any) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        raise NotImplementedError

    def spec(self) -> Dict[str, Any]:
        return {'kind': self.kind}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def __repr__(self):
        return f"{type(self).__name__}({self.spec()}, in={self.input_shape}, out={self.output_shape})"


class Conv2D(Layer):
    kind = 'conv2d'
    weighted = True

    def __init__(self, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = True):
        super().__init__()
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = self.kernel_size // 2 if padding is None else int(padding)
        self.use_bias = bool(bias)

    def _infer_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"conv2d expects (C, H, W) input, got {input_shape}")
        c, h, w = input_shape
        ho = (h + 2 * self.padding - self.kernel_size) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {self.kernel_size} does not fit input {input_shape}")
        return (self.out_channels, ho, wo)

    def _init_params(self, rng):
        cin = self.input_shape[0]
        fan_in = cin * self.kernel_size * self.kernel_size
        shape = (self.out_channels, cin, self.kernel_size, self.kernel_size)
        self.params['weight'] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        if self.use_bias:
            self.params['bias'] = np.zeros(self.out_channels)

    def forward(self, x, training=False):
        w = self.params['weight']
        cols, (ho, wo) = im2col(x, self.kernel_size, self.stride, self.padding)
        out = cols @ w.reshape(self.out_channels, -1).T.astype(x.dtype, copy=False)
        if self.use_bias:
            out = out + self.params['bias'].astype(x.dtype, copy=False)
        y = out.reshape(x.shape[0], ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return y, (x.shape, cols, (ho, wo))

    def backward(self, dy, cache):
        x_shape, cols, (ho, wo) = cache
        w = self.params['weight']
        dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        grads = {'weight': (dy_mat.T @ cols).reshape(w.shape)}
        if self.use_bias:
            grads['bias'] = dy_mat.sum(axis=0)
        dcols = dy_mat @ w.reshape(self.out_channels, -1).astype(dy.dtype, copy=False)
        dx = col2im(dcols, x_shape, self.kernel_size, self.stride, self.padding, (ho, wo))
        return dx, grads

    def spec(self):
        return {'kind': self.kind, 'out_channels': self.out_channels, 'kernel_size': self.kernel_size,
                'stride': self.stride, 'padding': self.padding, 'bias': self.use_bias}


class BatchNorm(Layer):
    """Batch normalization over channels (4-D input) or features (2-D input)."""

    kind = 'batchnorm'

    def _init_params(self, rng):
        n = self.input_shape[0]
        self.params['gamma'] = np.ones(n)
        self.params['beta'] = np.zeros(n)
        self.buffers['running_mean'] = np.zeros(n)
        self.buffers['running_var'] = np.ones(n)

    def _axes(self, x):
        return (0, 2, 3) if x.ndim == 4 else (0,)

    def _bcast(self, v, x):
        return v.reshape(1, -1, 1, 1) if x.ndim == 4 else v.reshape(1, -1)

    def scale_shift(self) -> Tuple[np.ndarray, np.ndarray]:
        """Inference-mode affine map y = scale * x + shift, per channel."""
        scale = self.params['gamma'] / np.sqrt(self.buffers['running_var'] + BN_EPS)
        shift = self.params['beta'] - self.buffers['running_mean'] * scale
        return scale, shift

    def forward(self, x, training=False):
        if training:
            axes = self._axes(x)
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - self._bcast(mean, x)) * self._bcast(inv_std, x)
            y = self._bcast(self.params['gamma'], x) * xhat + self._bcast(self.params['beta'], x)
            return y.astype(x.dtype, copy=False), ('train', xhat, inv_std, mean, var)
        scale, shift = self.scale_shift()
        y = x * self._bcast(scale, x).astype(x.dtype) + self._bcast(shift, x).astype(x.dtype)
        return y, ('eval', x, scale)

    def backward(self, dy, cache):
        mode = cache[0]
        axes = self._axes(dy)
        if mode == 'eval':
            _, x, scale = cache
            inv_std = 1.0 / np.sqrt(self.buffers['running_var'] + BN_EPS)
            xhat = (x - self._bcast(self.buffers['running_mean'], x)) * self._bcast(inv_std, x)
            grads = {'gamma': (dy * xhat).sum(axis=axes), 'beta': dy.sum(axis=axes)}
            return dy * self._bcast(scale, dy).astype(dy.dtype), grads
        _, xhat, inv_std, _, _ = cache
        m = dy.size / dy.shape[1]
        grads = {'gamma': (dy * xhat).sum(axis=axes), 'beta': dy.sum(axis=axes)}
        dxhat = dy * self._bcast(self.params['gamma'], dy)
        dx = (self._bcast(inv_std, dy) / m) * (
            m * dxhat
            - self._bcast(dxhat.sum(axis=axes), dy)
            - xhat * self._bcast((dxhat * xhat).sum(axis=axes), dy)
        )
        return dx.astype(dy.dtype, copy=False), grads

    def update_running_stats(self, cache) -> None:
        if cache[0] != 'train':
            return
        _, _, _, mean, var = cache
        self.buffers['running_mean'] = (1 - BN_MOMENTUM) * self.buffers['running_mean'] + BN_MOMENTUM * mean
        self.buffers['running_var'] = (1 - BN_MOMENTUM) * self.buffers['running_var'] + BN_MOMENTUM * var


class ReLU(Layer):
    kind = 'relu'

    def forward(self, x, training=False):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache):
        return dy * cache, {}


class MaxPool(Layer):
    kind = 'maxpool'

    def __init__(self, size: int = 2, stride: Optional[int] = None):
        super().__init__()
        self.size = int(size)
        self.stride = self.size if stride is None else int(stride)

    def _infer_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"{self.kind} expects (C, H, W) input, got {input_shape}")
        c, h, w = input_shape
        ho = (h - self.size) // self.stride + 1
        wo = (w - self.size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.kind} window {self.size} does not fit input {input_shape}")
        return (c, ho, wo)

    def forward(self, x, training=False):
        win = _pool_windows(x, self.size, self.stride)
        argmax = win.argmax(axis=-1)
        y = np.take_along_axis(win, argmax[..., None], axis=-1)[..., 0]
        return y, (x.shape, argmax)

    def backward(self, dy, cache):
        x_shape, argmax = cache
        return maxpool_scatter(dy, argmax, x_shape, self.size, self.stride), {}

    def spec(self):
        return {'kind': self.kind, 'size': self.size, 'stride': self.stride}


class AvgPool(MaxPool):
    kind = 'avgpool'

    def forward(self, x, training=False):
        return _pool_windows(x, self.size, self.stride).mean(axis=-1), x.shape

    def backward(self, dy, cache):
        return avgpool_transpose(dy, cache, self.size, self.stride), {}


class Flatten(Layer):
    kind = 'flatten'

    def _infer_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Dense(Layer):
    kind = 'dense'
    weighted = True

    def __init__(self, units: int, bias: bool = True):
        super().__init__()
        self.units = int(units)
        self.use_bias = bool(bias)

    def _infer_shape(self, input_shape):
        if len(input_shape) != 1:
            raise ShapeError(f"dense expects a flat input, got {input_shape}; add a flatten layer")
        return (self.units,)

    def _init_params(self, rng):
        fan_in = self.input_shape[0]
        self.params['weight'] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, self.units))
        if self.use_bias:
            self.params['bias'] = np.zeros(self.units)

    def forward(self, x, training=False):
        y = x @ self.params['weight'].astype(x.dtype, copy=False)
        if self.use_bias:
            y = y + self.params['bias'].astype(x.dtype, copy=False)
        return y, x

    def backward(self, dy, cache):
        x = cache
        grads = {'weight': x.T @ dy}
        if self.use_bias:
            grads['bias'] = dy.sum(axis=0)
        return dy @ self.params['weight'].T.astype(dy.dtype, copy=False), grads

    def spec(self):
        return {'kind': self.kind, 'units': self.units, 'bias': self.use_bias}


LAYER_KINDS = {
    'conv2d': Conv2D,
    'batchnorm': BatchNorm,
    'relu': ReLU,
    'maxpool': MaxPool,
    'avgpool': AvgPool,
    'flatten': Flatten,
    'dense': Dense,
}


def layer_from_spec(spec: Dict[str, Any]) -> Layer:
    """Instantiate an unbuilt layer from its spec dict."""
    spec = dict(spec)
    kind = spec.pop('kind', None)
    if kind not in LAYER_KINDS:
        raise ValidationError(f"unknown layer kind {kind!r}; supported: {sorted(LAYER_KINDS)}")
    return LAYER_KINDS[kind](**spec)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    """Inputs (N, ...) with integer labels in [0, c) and a split tag."""

    inputs: np.ndarray
    labels: np.ndarray
    split: str = 'train'
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.num_classes is None and self.labels.size:
            self.num_classes = int(self.labels.max()) + 1

    def __len__(self):
        return int(self.inputs.shape[0])

    def subset(self, index: np.ndarray, split: Optional[str] = None) -> 'LabeledDataset':
        return LabeledDataset(self.inputs[index], self.labels[index],
                              split or self.split, self.num_classes)

    def concat(self, other: 'LabeledDataset') -> 'LabeledDataset':
        return LabeledDataset(np.concatenate([self.inputs, other.inputs]),
                              np.concatenate([self.labels, other.labels]),
                              self.split, self.num_classes)


@dataclass
class Network:
    """Ordered layers with parameters; the last layer emits num_classes logits."""

    layers: List[Layer] = field(default_factory=list)
    input_shape: Tuple[int, ...] = ()
    num_classes: int = 0

    @property
    def depth(self) -> int:
        return len(self.layers)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.layers:
            raise ValidationError("network has no layers")
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            if layer.input_shape != shape:
                raise ShapeError(f"layer {i} ({layer.kind}) expects {layer.input_shape}, receives {shape}")
            shape = layer.output_shape
        if shape != (self.num_classes,):
            raise ShapeError(f"final layer must produce ({self.num_classes},) logits, produces {shape}")

    def conv_layer_ids(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == 'conv2d']

    def conv_layer_id(self, ordinal: int) -> int:
        """Layer id of the conv layer with the given 1-based ordinal."""
        ids = self.conv_layer_ids()
        if not 1 <= ordinal <= len(ids):
            raise ValidationError(f"conv ordinal {ordinal} out of range; network has {len(ids)} conv layers")
        return ids[ordinal - 1]

    def tap_index(self, layer_id: int) -> int:
        """
        Index of the layer whose output is tapped for a conv layer.

        The tap is the output of the ReLU that follows the conv (through an
        optional batch-norm). Pooling after the ReLU is not part of the tap.
        """
        if not 0 <= layer_id < len(self.layers):
            raise ValidationError(f"tap layer id {layer_id} out of range [0, {len(self.layers)})")
        if self.layers[layer_id].kind != 'conv2d':
            raise ValidationError(f"tap layer {layer_id} is a {self.layers[layer_id].kind}, not a conv2d")
        nxt = [layer.kind for layer in self.layers[layer_id + 1:layer_id + 3]]
        if nxt[:2] == ['batchnorm', 'relu']:
            return layer_id + 2
        if nxt[:1] == ['relu']:
            return layer_id + 1
        raise ValidationError(f"conv layer {layer_id} is not followed by batch-norm + ReLU; cannot tap it")

    def tap_shape(self, layer_id: int) -> Tuple[int, ...]:
        return self.layers[self.tap_index(layer_id)].output_shape

    def num_parameters(self) -> int:
        return int(sum(layer.num_parameters() for layer in self.layers))

    def copy(self) -> 'Network':
        return copy.deepcopy(self)

    def state(self) -> Dict[str, Any]:
        """Plain-data description of the network, used for saving and hashing."""
        return {
            'format': MODEL_FORMAT,
            'version': MODEL_FORMAT_VERSION,
            'input_shape': [int(v) for v in self.input_shape],
            'num_classes': int(self.num_classes),
            'layers': [
                {
                    'spec': layer.spec(),
                    'params': {k: np.asarray(v, dtype=np.float64) for k, v in sorted(layer.params.items())},
                    'buffers': {k: np.asarray(v, dtype=np.float64) for k, v in sorted(layer.buffers.items())},
                }
                for layer in self.layers
            ],
        }


def build_network(input_shape: Sequence[int], layer_specs: Sequence[Dict[str, Any]],
                  num_classes: int, seed: int = 0) -> Network:
    """
    Build and initialize a network from layer specs.

    Args:
        input_shape: Per-sample input shape, e.g. (3, 32, 32)
        layer_specs: Layer spec dicts, e.g. {'kind': 'conv2d', 'out_channels': 32}
        num_classes: Number of output classes c
        seed: Seed for He fan-in initialization

    Returns:
        Initialized Network

    Raises:
        ValidationError: If shapes do not compose or the head is not c-wide
    """
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in input_shape)
    layers = []
    for spec in layer_specs:
        layer = layer_from_spec(spec)
        shape = layer.build(shape, rng)
        layers.append(layer)
    net = Network(layers=layers, input_shape=tuple(int(v) for v in input_shape), num_classes=int(num_classes))
    net.validate()
    logger.debug(f"Built network: {len(layers)} layers, {net.num_parameters()} parameters")
    return net


def conv_block_specs(widths: Sequence[int], pool_after: Sequence[int] = (),
                     kernel_size: int = 3) -> List[Dict[str, Any]]:
    """conv -> batchnorm -> relu per width, with a maxpool after the listed conv ordinals."""
    specs = []
    for ordinal, width in enumerate(widths, start=1):
        specs.append({'kind': 'conv2d', 'out_channels': int(width), 'kernel_size': kernel_size})
        specs.append({'kind': 'batchnorm'})
        specs.append({'kind': 'relu'})
        if ordinal in pool_after:
            specs.append({'kind': 'maxpool', 'size': 2})
    return specs


def vgg_desk(input_shape: Sequence[int] = (3, 32, 32), num_classes: int = 10,
             widths: Sequence[int] = (32, 32, 64, 64, 128, 128, 128, 128),
             pool_after: Sequence[int] = (2, 4, 6), seed: int = 0) -> Network:
    """Reference 8-conv VGG-style network with a single dense head."""
    specs = conv_block_specs(widths, pool_after)
    specs += [{'kind': 'flatten'}, {'kind': 'dense', 'units': num_classes}]
    return build_network(input_shape, specs, num_classes, seed)


def small_cnn(input_shape: Sequence[int] = (1, 8, 8), num_classes: int = 3,
              widths: Sequence[int] = (4, 6, 8), pool_after: Sequence[int] = (1,),
              seed: int = 0) -> Network:
    """A few conv blocks and a dense head; sized for tests and synthetic runs."""
    specs = conv_block_specs(widths, pool_after)
    specs += [{'kind': 'flatten'}, {'kind': 'dense', 'units': num_classes}]
    return build_network(input_shape, specs, num_classes, seed)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _as_batch(net: Network, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.dtype.kind != 'f':
        x = x.astype(np.float64)
    if tuple(x.shape) == tuple(net.input_shape):
        return x[None], True
    if tuple(x.shape[1:]) != tuple(net.input_shape):
        raise ShapeError(f"input shape {tuple(x.shape)} does not match network input {tuple(net.input_shape)}")
    return x, False


def forward_range(net: Network, x: np.ndarray, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
    """Run layers [start, stop) on a batch of activations."""
    stop = len(net.layers) if stop is None else stop
    for layer in net.layers[start:stop]:
        x, _ = layer.forward(x)
    return x


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """
    Compute logits for one input (C, H, W) or a batch (N, C, H, W).

    Raises:
        ShapeError: If x does not match the network input shape
    """
    xb, single = _as_batch(net, x)
    logits = forward_range(net, xb)
    return logits[0] if single else logits


def _tap_indices(net: Network, tap_layers: Sequence[int]) -> Dict[int, int]:
    return {net.tap_index(layer_id): layer_id for layer_id in tap_layers}


def forward_prefix(net: Network, x: np.ndarray, tap_layers: Sequence[int]) -> Tuple[np.ndarray, int, Dict[int, np.ndarray]]:
    """
    Run the network up to the last tap point.

    Returns:
        (hidden activation, index of the next layer to run, taps keyed by conv layer id)
    """
    taps_at = _tap_indices(net, tap_layers)
    stop = max(taps_at) + 1 if taps_at else 0
    taps = {}
    h = x
    for i in range(stop):
        h, _ = net.layers[i].forward(h)
        if i in taps_at:
            taps[taps_at[i]] = h
    return h, stop, taps


def forward_with_taps(net: Network, x: np.ndarray, tap_layers: Sequence[int]) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    """
    Compute logits and the post-batch-norm-ReLU activations of the named conv layers.

    Args:
        net: Network
        x: Input or batch of inputs
        tap_layers: Conv layer ids to tap

    Returns:
        (logits, {conv layer id: tapped activation})
    """
    xb, single = _as_batch(net, x)
    h, stop, taps = forward_prefix(net, xb, tap_layers)
    logits = forward_range(net, h, stop)
    if single:
        return logits[0], {k: v[0] for k, v in taps.items()}
    return logits, taps


def predict(net: Network, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Top-1 labels for a batch of inputs."""
    out = [forward(net, inputs[i:i + batch_size]).argmax(axis=1) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def predict_logits(net: Network, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward(net, inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.num_classes))


def accuracy(net: Network, data: LabeledDataset, batch_size: int = 256) -> float:
    return float(np.mean(predict(net, data.inputs, batch_size) == data.labels))


# ---------------------------------------------------------------------------
# Losses and gradients
# ---------------------------------------------------------------------------

class LossSpec(Protocol):
    """
    A differentiable per-sample scalar of the logits and, optionally, of taps.

    Calling it returns (loss per sample (N,), d loss / d logits (N, c),
    {conv layer id: d loss / d tap}).
    """

    tap_layers: Sequence[int]

    def __call__(self, logits: np.ndarray, taps: Dict[int, np.ndarray]) -> Tuple[np.ndarray, np.ndarray, Dict[int, np.ndarray]]:
        ...


class CrossEntropyLoss:
    """Softmax cross-entropy against integer labels."""

    tap_layers: Sequence[int] = ()

    def __init__(self, labels):
        self.labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))

    def __call__(self, logits, taps):
        n = logits.shape[0]
        rows = np.arange(n)
        loss = logsumexp(logits, axis=1) - logits[rows, self.labels]
        grad = softmax(logits, axis=1)
        grad[rows, self.labels] -= 1.0
        return loss, grad, {}


class LinearLogitLoss:
    """loss = weights . logits; weights of zero give a constant loss."""

    tap_layers: Sequence[int] = ()

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=np.float64)

    def __call__(self, logits, taps):
        return logits @ self.weights, np.broadcast_to(self.weights, logits.shape).copy(), {}


class MarginLoss:
    """Targeted margin max(max_{i != t} z_i - z_t, -confidence) on the logits."""

    tap_layers: Sequence[int] = ()

    def __init__(self, targets, confidence: float = 0.0):
        self.targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
        self.confidence = float(confidence)

    def __call__(self, logits, taps):
        n = logits.shape[0]
        rows = np.arange(n)
        other = logits.copy()
        other[rows, self.targets] = -np.inf
        best_other = other.argmax(axis=1)
        margin = logits[rows, best_other] - logits[rows, self.targets]
        active = margin > -self.confidence
        loss = np.maximum(margin, -self.confidence)
        grad = np.zeros_like(logits)
        grad[rows[active], best_other[active]] = 1.0
        grad[rows[active], self.targets[active]] = -1.0
        return loss, grad, {}


def _forward_trace(net: Network, x: np.ndarray, training: bool = False) -> Tuple[np.ndarray, List[np.ndarray], List[Any]]:
    """Forward pass keeping each layer's input and cache."""
    inputs, caches = [], []
    h = x
    for layer in net.layers:
        inputs.append(h)
        h, cache = layer.forward(h, training=training)
        caches.append(cache)
    return h, inputs, caches


def _backward(net: Network, caches: List[Any], dlogits: np.ndarray,
              tap_grads: Optional[Dict[int, np.ndarray]] = None) -> Tuple[np.ndarray, List[Dict[str, np.ndarray]]]:
    tap_grads = tap_grads or {}
    grads: List[Dict[str, np.ndarray]] = [{} for _ in net.layers]
    g = dlogits
    for i in range(len(net.layers) - 1, -1, -1):
        if i in tap_grads:
            g = g + tap_grads[i]
        g, grads[i] = net.layers[i].backward(g, caches[i])
    return g, grads


def value_and_input_gradient(net: Network, x: np.ndarray, loss_spec: LossSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-sample loss and its gradient with respect to the input.

    Batch-norm runs in inference mode; max-pool routes gradient to the winner.

    Raises:
        ValidationError: If the loss requests a tap that is not a conv + BN + ReLU point
    """
    xb, single = _as_batch(net, x)
    xb = xb.astype(np.float64, copy=False)
    taps_at = _tap_indices(net, getattr(loss_spec, 'tap_layers', ()) or ())
    logits, inputs, caches = _forward_trace(net, xb)
    taps = {conv_id: (inputs[idx + 1] if idx + 1 < len(inputs) else logits) for idx, conv_id in taps_at.items()}
    loss, dlogits, dtaps = loss_spec(logits, taps)
    tap_grads = {idx: dtaps[conv_id] for idx, conv_id in taps_at.items() if conv_id in dtaps}
    dx, _ = _backward(net, caches, dlogits, tap_grads)
    if single:
        return loss[0], dx[0]
    return loss, dx


def input_gradient(net: Network, x: np.ndarray, loss_spec: LossSpec) -> np.ndarray:
    """Gradient of the loss with respect to the input x (same shape as x)."""
    return value_and_input_gradient(net, x, loss_spec)[1]


def parameter_gradients(net: Network, x: np.ndarray, labels: np.ndarray, training: bool = False,
                        dtype=None) -> Tuple[np.ndarray, np.ndarray, List[Dict[str, np.ndarray]], List[Any]]:
    """
    Cross-entropy of a labeled batch and the gradient of its mean for every layer parameter.

    Returns:
        (per-sample loss, logits, per-layer parameter gradients, per-layer forward caches)
    """
    xb, _ = _as_batch(net, x)
    if dtype is not None:
        xb = xb.astype(dtype, copy=False)
    logits, _, caches = _forward_trace(net, xb, training=training)
    loss, dlogits, _ = CrossEntropyLoss(labels)(logits.astype(np.float64), {})
    dlogits = dlogits / xb.shape[0]
    if dtype is not None:
        dlogits = dlogits.astype(dtype)
    _, grads = _backward(net, caches, dlogits)
    return loss, logits, grads, caches


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(net: Network, data: LabeledDataset, learning_rate: float = 0.05, batch_size: int = 64,
          epochs: int = 10, seed: int = 0, momentum: float = 0.9, weight_decay: float = 0.0,
          lr_decay: float = 1.0, lr_decay_every: int = 0, dtype=np.float32,
          history: Optional[List[Dict[str, float]]] = None) -> Network:
    """
    Train a copy of the network with mini-batch SGD on softmax cross-entropy.

    Args:
        net: Initialized network (not modified)
        data: Training split
        learning_rate: Initial step size
        batch_size: Mini-batch size
        epochs: Passes over the data; 0 returns an unchanged copy
        seed: Seed for the shuffling order
        momentum: Heavy-ball momentum
        weight_decay: L2 penalty on conv/dense weights
        lr_decay: Multiplicative learning-rate decay factor
        lr_decay_every: Apply lr_decay every this many epochs (0 disables)
        dtype: Compute dtype for activations
        history: Optional list receiving one record per epoch

    Returns:
        Trained network

    Raises:
        ValidationError: If the data is empty, does not match the network input, or has
            labels outside [0, num_classes)
        TrainingError: If the loss becomes non-finite
    """
    if len(data) == 0:
        raise ValidationError("training data is empty")
    if tuple(data.inputs.shape[1:]) != tuple(net.input_shape):
        raise ShapeError(f"training inputs {tuple(data.inputs.shape[1:])} do not match network input {net.input_shape}")
    DataValidator().validate_dataset(data, net.input_shape, net.num_classes)

    trained = net.copy()
    if epochs == 0:
        logger.info("epochs=0, returning the initialization unchanged")
        return trained

    rng = np.random.default_rng(seed)
    velocity = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in trained.layers]
    n = len(data)
    lr = float(learning_rate)
    last_finite = float('nan')
    first_loss = None

    logger.info(f"Training {trained.num_parameters()} parameters on {n} samples "
                f"for {epochs} epochs (batch {batch_size}, lr {lr})")

    for epoch in range(epochs):
        if lr_decay_every and epoch and epoch % lr_decay_every == 0:
            lr *= lr_decay
        order = rng.permutation(n)
        total_loss, total_correct = 0.0, 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            yb = data.labels[idx]
            loss, logits, grads, caches = parameter_gradients(trained, data.inputs[idx], yb,
                                                              training=True, dtype=dtype)
            batch_loss = float(loss.mean())
            if not np.isfinite(batch_loss):
                raise TrainingError(
                    f"loss became non-finite at epoch {epoch + 1}, batch {b + 1} "
                    f"(learning_rate={lr}, last finite loss={last_finite:.4f}); "
                    f"lower the learning rate"
                )
            last_finite = batch_loss
            total_loss += batch_loss * len(idx)
            total_correct += int((logits.argmax(axis=1) == yb).sum())

            for layer, g, v, cache in zip(trained.layers, grads, velocity, caches):
                for name, grad in g.items():
                    grad = grad.astype(np.float64)
                    if weight_decay and name == 'weight':
                        grad = grad + weight_decay * layer.params[name]
                    v[name] = momentum * v[name] - lr * grad
                    layer.params[name] = layer.params[name] + v[name]
                if isinstance(layer, BatchNorm):
                    layer.update_running_stats(cache)

        epoch_loss = total_loss / n
        epoch_acc = total_correct / n
        first_loss = epoch_loss if first_loss is None else first_loss
        logger.info(f"Epoch {epoch + 1}/{epochs} | loss {epoch_loss:.4f} | train acc {epoch_acc:.4f} | lr {lr:.4g}")
        if history is not None:
            history.append({'epoch': epoch + 1, 'loss': epoch_loss, 'accuracy': epoch_acc, 'learning_rate': lr})

    if epochs > 1 and epoch_loss >= first_loss:
        logger.warning(f"Training loss did not decrease ({first_loss:.4f} -> {epoch_loss:.4f})")
    return trained


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def atomic_dump(obj: Any, path: Path) -> None:
    """joblib.dump to a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp')
    os.close(fd)
    try:
        joblib.dump(obj, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_text(text: str, path: Path) -> None:
    """Write text atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp')
    try:
        with os.fdopen(fd, 'w') as f:
            f.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_json(obj: Any, path: Path) -> None:
    write_text(json.dumps(obj, indent=2, sort_keys=True) + '\n', path)


def model_hash(net: Network) -> str:
    return joblib.hash(net.state())


def save_model(net: Network, path: Path) -> str:
    """
    Save a network to a versioned joblib file.

    Returns:
        The model hash

    Raises:
        ValidationError: If the network has no layers
    """
    if not net.layers:
        raise ValidationError("cannot save an empty network (0 layers)")
    state = net.state()
    atomic_dump(state, path)
    digest = joblib.hash(state)
    logger.info(f"Saved model: {path} (hash {digest[:12]})")
    return digest


def network_from_state(state: Dict[str, Any]) -> Network:
    """Rebuild a network from Network.state() output."""
    if not isinstance(state, dict) or state.get('format') != MODEL_FORMAT:
        raise CorruptModelFileError("not a racnet model file")
    if state.get('version') != MODEL_FORMAT_VERSION:
        raise ModelVersionError(
            f"model file format version {state.get('version')} is not supported "
            f"(expected {MODEL_FORMAT_VERSION})"
        )
    try:
        shape = tuple(state['input_shape'])
        layers = []
        for entry in state['layers']:
            layer = layer_from_spec(entry['spec'])
            shape = layer.build(shape)
            layer.params = {k: np.array(v, dtype=np.float64) for k, v in entry['params'].items()}
            layer.buffers = {k: np.array(v, dtype=np.float64) for k, v in entry['buffers'].items()}
            layers.append(layer)
        net = Network(layers=layers, input_shape=tuple(state['input_shape']), num_classes=int(state['num_classes']))
        net.validate()
    except (KeyError, TypeError, ValidationError) as e:
        raise CorruptModelFileError(f"model file content is inconsistent: {e}") from e
    return net


def load_model(path: Path) -> Network:
    """
    Load a network saved by save_model.

    Raises:
        FileNotFoundError: If the file does not exist
        CorruptModelFileError: If the file cannot be decoded
        ModelVersionError: If the format version differs
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    try:
        state = joblib.load(path)
    except Exception as e:
        raise CorruptModelFileError(f"cannot decode model file {path}: {e}") from e
    net = network_from_state(state)
    logger.info(f"Loaded model: {path} ({net.depth} layers, {net.num_parameters()} parameters)")
    return net
