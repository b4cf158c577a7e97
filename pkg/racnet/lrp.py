#!/usr/bin/env python3
"""
racnet - Layer-wise Relevance Propagation

Alpha-beta relevance propagation from a one-hot output seed down to the
tapped activations of a hidden layer, and the per-class relevance-score
matrix M_l (classes x feature maps) built from it.

Propagation rules per layer kind:
- conv2d / dense (with a following batch-norm folded in): alpha-beta rule
- batch-norm on its own: alpha-beta rule on the per-channel affine map
- avgpool: alpha-beta rule on a linear map with positive weights
- relu: relevance passes through unchanged
- maxpool: winner-take-all, ties to the lowest flat index
- flatten: reshape
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import joblib
import numpy as np
from joblib import Parallel, delayed

from racnet.network import (
    BatchNorm,
    LabeledDataset,
    Layer,
    Network,
    avgpool_transpose,
    conv2d,
    conv2d_transpose,
    maxpool_scatter,
    write_json,
)
from racnet.validation import ParameterValidator, ValidationError

logger = logging.getLogger(__name__)


class LrpError(ValueError):
    """Raised when relevance cannot be propagated or aggregated."""
    pass


@dataclass(frozen=True)
class LrpParams:
    """Alpha-beta rule parameters; alpha - beta must equal 1."""

    alpha: float = 2.0
    beta: float = 1.0
    stabilizer_eps: float = 1e-9

    def __post_init__(self):
        ParameterValidator.validate_lrp_params(self.alpha, self.beta, self.stabilizer_eps)


@dataclass
class RelevanceMap:
    """Relevance at one layer's output, batched (N, ...)."""

    layer_id: int
    relevance: np.ndarray
    trace: Dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class RelevanceScoreMatrix:
    """
    M_l: entry (i, j) is the class-i mean relevance of feature map j at layer l.

    Attributes:
        layer_id: Conv layer id
        matrix: (c, r) array
        counts: Training samples per class used for the means
    """

    layer_id: int
    matrix: np.ndarray
    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def num_feature_maps(self) -> int:
        return int(self.matrix.shape[1])

    def hash(self) -> str:
        return joblib.hash(np.ascontiguousarray(self.matrix, dtype=np.float64))


def output_relevance(true_label: int, c: int) -> np.ndarray:
    """
    One-hot relevance seed at the output layer.

    Raises:
        LrpError: If the label is outside [0, c)
    """
    if not 0 <= int(true_label) < c:
        raise LrpError(f"label {true_label} out of range [0, {c})")
    seed = np.zeros(c)
    seed[int(true_label)] = 1.0
    return seed


def _output_relevance_batch(labels: np.ndarray, c: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LrpError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    seed = np.zeros((labels.size, c))
    seed[np.arange(labels.size), labels] = 1.0
    return seed


# ---------------------------------------------------------------------------
# Alpha-beta rule
# ---------------------------------------------------------------------------

def _alphabeta(a: np.ndarray, r_upper: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray],
               lin: Callable[[np.ndarray, np.ndarray], np.ndarray],
               lin_t: Callable[[np.ndarray, np.ndarray], np.ndarray],
               params: LrpParams) -> np.ndarray:
    """
    Alpha-beta redistribution through z = lin(a, weight) + bias.

    lin_t must be the adjoint of lin in its first argument. Bias terms enter
    the pools but the relevance they absorb is dropped. When only one pool of
    an output node is non-empty it carries the full (alpha - beta) share.
    """
    a = a.astype(np.float64, copy=False)
    r_upper = r_upper.astype(np.float64, copy=False)
    a_pos = np.maximum(a, 0.0)
    a_neg = np.minimum(a, 0.0)
    w_pos = np.maximum(weight, 0.0)
    w_neg = np.minimum(weight, 0.0)
    has_a_neg = bool(np.any(a_neg))
    has_w_neg = bool(np.any(w_neg))

    z_pos = lin(a_pos, w_pos)
    z_neg = lin(a_pos, w_neg) if has_w_neg else np.zeros_like(z_pos)
    if has_a_neg:
        if has_w_neg:
            z_pos = z_pos + lin(a_neg, w_neg)
        z_neg = z_neg + lin(a_neg, w_pos)
    if bias is not None:
        b = bias.reshape((1, -1) + (1,) * (z_pos.ndim - 2))
        z_pos = z_pos + np.maximum(b, 0.0)
        z_neg = z_neg + np.minimum(b, 0.0)

    eps = params.stabilizer_eps
    pos_pool = z_pos > 0
    neg_pool = z_neg < 0
    both = pos_pool & neg_pool
    net_share = params.alpha - params.beta
    c_pos = np.where(both, params.alpha, np.where(pos_pool, net_share, 0.0))
    c_neg = np.where(both, params.beta, np.where(neg_pool, -net_share, 0.0))

    den_pos = np.where(pos_pool, np.maximum(z_pos, eps), 1.0)
    den_neg = np.where(neg_pool, np.minimum(z_neg, -eps), -1.0)
    s_pos = c_pos * r_upper / den_pos
    s_neg = c_neg * r_upper / den_neg

    r_lower = a_pos * lin_t(s_pos, w_pos)
    if has_w_neg:
        r_lower = r_lower - a_pos * lin_t(s_neg, w_neg)
    if has_a_neg:
        if has_w_neg:
            r_lower = r_lower + a_neg * lin_t(s_pos, w_neg)
        r_lower = r_lower - a_neg * lin_t(s_neg, w_pos)
    return r_lower


def _fold_batchnorm(weight: np.ndarray, bias: Optional[np.ndarray], bn: BatchNorm,
                    out_axis: int) -> Tuple[np.ndarray, np.ndarray]:
    """Fold inference-mode batch-norm into the preceding conv (axis 0) or dense (axis 1) weights."""
    scale, shift = bn.scale_shift()
    shape = [1] * weight.ndim
    shape[out_axis] = -1
    w = weight * scale.reshape(shape)
    b = shift if bias is None else bias * scale + shift
    return w, b


def lrp_step(layer: Layer, a: np.ndarray, r_upper: np.ndarray, params: LrpParams,
             batchnorm: Optional[BatchNorm] = None) -> np.ndarray:
    """
    Redistribute relevance from a layer's output onto its input.

    Args:
        layer: Layer the relevance passes through
        a: Input activations recorded on the forward pass (N, ...)
        r_upper: Relevance at the layer's output (or at the batch-norm output
            when batchnorm is given)
        params: Alpha-beta parameters
        batchnorm: Batch-norm directly after a conv/dense layer, folded in

    Returns:
        Relevance at the layer's input, same shape as a

    Raises:
        LrpError: If the layer kind is unknown or shapes do not line up
    """
    if a.shape[1:] != tuple(layer.input_shape):
        raise LrpError(f"{layer.kind} activations {a.shape[1:]} do not match its input {layer.input_shape}")
    kind = layer.kind

    if kind == 'relu':
        return r_upper
    if kind == 'flatten':
        return r_upper.reshape(a.shape)
    if kind == 'maxpool':
        _, (x_shape, argmax) = layer.forward(a)
        return maxpool_scatter(r_upper.astype(np.float64, copy=False), argmax, x_shape, layer.size, layer.stride)
    if kind == 'avgpool':
        return _alphabeta(
            a, r_upper, np.ones(()), None,
            lambda x, w: w * layer.forward(x)[0],
            lambda s, w: w * avgpool_transpose(s, a.shape, layer.size, layer.stride),
            params,
        )
    if kind == 'batchnorm':
        scale, shift = layer.scale_shift()
        bshape = (1, -1) + (1,) * (a.ndim - 2)
        return _alphabeta(
            a, r_upper, scale, shift,
            lambda x, w: x * w.reshape(bshape),
            lambda s, w: s * w.reshape(bshape),
            params,
        )
    if kind == 'conv2d':
        weight, bias = layer.params['weight'], layer.params.get('bias')
        if batchnorm is not None:
            weight, bias = _fold_batchnorm(weight, bias, batchnorm, out_axis=0)
        return _alphabeta(
            a, r_upper, weight, bias,
            lambda x, w: conv2d(x, w, None, layer.stride, layer.padding),
            lambda s, w: conv2d_transpose(s, w, a.shape, layer.stride, layer.padding),
            params,
        )
    if kind == 'dense':
        weight, bias = layer.params['weight'], layer.params.get('bias')
        if batchnorm is not None:
            weight, bias = _fold_batchnorm(weight, bias, batchnorm, out_axis=1)
        return _alphabeta(a, r_upper, weight, bias, lambda x, w: x @ w, lambda s, w: s @ w.T, params)
    raise LrpError(f"no relevance rule for layer kind {kind!r}")


# ---------------------------------------------------------------------------
# Propagation through a network
# ---------------------------------------------------------------------------

def _stop_index(net: Network, layer_id: int) -> int:
    """Layer whose output receives relevance: the tap for conv layers, else the layer itself."""
    if layer_id == -1:
        return -1
    if not 0 <= layer_id < len(net.layers) - 1:
        raise LrpError(f"layer {layer_id} is not a hidden layer of a {len(net.layers)}-layer network")
    if net.layers[layer_id].kind == 'conv2d':
        try:
            return net.tap_index(layer_id)
        except ValidationError as e:
            raise LrpError(str(e)) from e
    return layer_id


def propagate(net: Network, x: np.ndarray, labels: np.ndarray, stop: int, params: LrpParams,
              keep_trace: bool = False) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    """
    Propagate one-hot output relevance down to the output of layer `stop`.

    stop=-1 propagates all the way to the input.

    Returns:
        (relevance at the output of layer stop, {layer id: relevance at its output})
    """
    inputs = []
    h = x
    for layer in net.layers:
        inputs.append(h)
        h, _ = layer.forward(h)
    r = _output_relevance_batch(labels, net.num_classes)
    trace = {len(net.layers) - 1: r} if keep_trace else {}

    i = len(net.layers) - 1
    while i > stop:
        layer = net.layers[i]
        prev = net.layers[i - 1] if i - 1 > stop else None
        if layer.kind == 'batchnorm' and prev is not None and prev.weighted:
            r = lrp_step(prev, inputs[i - 1], r, params, batchnorm=layer)
            i -= 2
        else:
            r = lrp_step(layer, inputs[i], r, params)
            i -= 1
        if keep_trace:
            trace[i] = r
    return r, trace


def relevance_at_layer(net: Network, x: np.ndarray, y, layer_id: int, params: Optional[LrpParams] = None,
                       keep_trace: bool = False) -> RelevanceMap:
    """
    Relevance on the output activations of layer `layer_id`.

    For a conv layer the relevance is expressed on its tapped activations
    (after batch-norm and ReLU), the same tensor the auxiliary classifiers read.

    Args:
        net: Trained network
        x: Input (C, H, W) or batch (N, C, H, W)
        y: True label or labels
        layer_id: Hidden layer id
        params: Alpha-beta parameters (defaults alpha=2, beta=1)
        keep_trace: Also keep the relevance at every propagated layer

    Returns:
        RelevanceMap with a leading batch axis
    """
    params = params or LrpParams()
    xb = np.asarray(x, dtype=np.float64)
    if xb.shape == tuple(net.input_shape):
        xb = xb[None]
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if labels.shape[0] != xb.shape[0]:
        raise LrpError(f"{xb.shape[0]} inputs but {labels.shape[0]} labels")
    stop = _stop_index(net, layer_id)
    r, trace = propagate(net, xb, labels, stop, params, keep_trace)
    return RelevanceMap(layer_id=layer_id, relevance=r, trace=trace)


def feature_map_relevance(rel_map) -> np.ndarray:
    """
    Mean relevance per feature map over spatial positions.

    Accepts a RelevanceMap or an array shaped (r, H, W) or (N, r, H, W).

    Raises:
        LrpError: If the relevance is not laid out as feature maps
    """
    r = rel_map.relevance if isinstance(rel_map, RelevanceMap) else np.asarray(rel_map)
    if r.ndim == 3:
        return r.mean(axis=(1, 2))
    if r.ndim == 4:
        return r.mean(axis=(2, 3))
    raise LrpError(f"feature-map relevance needs a conv layer output, got shape {r.shape}")


def _class_sums(net: Network, inputs: np.ndarray, labels: np.ndarray, layer_id: int,
                params: LrpParams) -> np.ndarray:
    rel = relevance_at_layer(net, inputs, labels, layer_id, params)
    fm = feature_map_relevance(rel)
    sums = np.zeros((net.num_classes, fm.shape[1]))
    np.add.at(sums, labels, fm)
    return sums


def relevance_score_matrix(net: Network, train_data: LabeledDataset, layer_id: int,
                           params: Optional[LrpParams] = None, batch_size: int = 32,
                           n_jobs: int = 1) -> RelevanceScoreMatrix:
    """
    Build M_l from per-sample feature-map relevance averaged per class.

    Batch sums are reduced in batch order and normalized once, so the result
    does not depend on n_jobs.

    Args:
        net: Trained network
        train_data: Training split; every class must be present
        layer_id: Conv layer id
        params: Alpha-beta parameters
        batch_size: Samples per relevance batch
        n_jobs: joblib workers

    Returns:
        RelevanceScoreMatrix

    Raises:
        LrpError: If the data is empty, layer_id is not a conv layer of the network,
            a class is missing or a row is not finite
    """
    params = params or LrpParams()
    n = len(train_data)
    if n == 0:
        raise LrpError("cannot build a relevance-score matrix from an empty dataset")
    in_range = isinstance(layer_id, (int, np.integer)) and not isinstance(layer_id, bool) \
        and 0 <= layer_id < len(net.layers)
    if not in_range:
        raise LrpError(f"layer id {layer_id!r} is outside [0, {len(net.layers)})")
    if net.layers[layer_id].kind != 'conv2d':
        raise LrpError(f"layer {layer_id} is a {net.layers[layer_id].kind}, not a conv2d")

    c = net.num_classes
    counts = np.bincount(train_data.labels, minlength=c)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise LrpError(f"classes {missing.tolist()} have no training samples; per-class normalization is undefined")

    logger.info(f"Computing relevance-score matrix for layer {layer_id} over {n} samples "
                f"(alpha={params.alpha}, beta={params.beta})")
    starts = range(0, n, batch_size)
    partials = Parallel(n_jobs=n_jobs)(
        delayed(_class_sums)(net, train_data.inputs[s:s + batch_size],
                             train_data.labels[s:s + batch_size], layer_id, params)
        for s in starts
    )
    total = np.zeros_like(partials[0])
    for part in partials:
        total += part
    matrix = total / counts[:, None]

    if not np.all(np.isfinite(matrix)):
        raise LrpError(f"relevance-score matrix for layer {layer_id} has non-finite rows")
    logger.info(f"M_l for layer {layer_id}: {matrix.shape[0]} classes x {matrix.shape[1]} feature maps")
    return RelevanceScoreMatrix(layer_id=layer_id, matrix=matrix, counts=counts)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def cache_key(model_hash: str, layer_id: int, params: LrpParams, dataset_tag: str) -> str:
    return joblib.hash([model_hash, int(layer_id), params.alpha, params.beta,
                        params.stabilizer_eps, dataset_tag])


def save_relevance_matrix(m: RelevanceScoreMatrix, path: Path, model_hash: str, params: LrpParams,
                          dataset_tag: str, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Write M_l and its provenance as JSON; returns the written record."""
    record = {
        'layer_id': int(m.layer_id),
        'alpha': params.alpha,
        'beta': params.beta,
        'stabilizer_eps': params.stabilizer_eps,
        'model_hash': model_hash,
        'dataset_tag': dataset_tag,
        'cache_key': cache_key(model_hash, m.layer_id, params, dataset_tag),
        'matrix_hash': m.hash(),
        'counts': [int(v) for v in m.counts],
        'matrix': m.matrix.tolist(),
    }
    record.update(extra or {})
    write_json(record, path)
    logger.info(f"Saved relevance matrix: {path}")
    return record


def load_relevance_matrix(path: Path) -> Tuple[RelevanceScoreMatrix, Dict[str, Any]]:
    """Read a matrix written by save_relevance_matrix; returns (matrix, provenance record)."""
    with open(path, 'r') as f:
        record = json.load(f)
    try:
        m = RelevanceScoreMatrix(
            layer_id=int(record['layer_id']),
            matrix=np.asarray(record['matrix'], dtype=np.float64),
            counts=np.asarray(record['counts'], dtype=np.int64),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise LrpError(f"malformed relevance matrix file {path}: {e}") from e
    return m, record
