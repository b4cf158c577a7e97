#!/usr/bin/env python3
"""
racnet - Inference with Auxiliary Cells

Runs the network up to the last validation layer, lets the RACs vote and
either stops early (agreement with confidence above delta_th), emits
No Decision (disagreement), or finishes the forward pass and checks the
final label against the RAC consensus.

FLOPs conventions:
    conv2d     2 * Cout * Hout * Wout * Cin * K^2 + Cout * Hout * Wout (bias)
    dense      2 * in * out + out (bias)
    batchnorm  2 per element
    relu/pool  1 per output element
    flatten    0
    BLC        2 * k * H * W + 1
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from racnet.network import (Layer, LabeledDataset, Network, ShapeError, _as_batch, forward_prefix, forward_range,
                            write_text)
from racnet.rac import Rac, RacError, RacOutput, rac_decisions, rac_forward, rac_probabilities
from racnet.validation import ParameterValidator, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InferencePolicy:
    """Validation layer ids (conv layer ids, increasing) and the confidence threshold."""

    validation_layers: Tuple[int, ...]
    delta_th: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, 'validation_layers', tuple(int(l) for l in self.validation_layers))
        ParameterValidator.validate_delta_th(self.delta_th)
        layers = self.validation_layers
        if len(layers) < 2:
            raise ValidationError(f"at least two validation layers are required, got {list(layers)}")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValidationError(f"validation layers must be strictly increasing, got {list(layers)}")


@dataclass
class Outcome:
    """Result for one input. label is None for No Decision."""

    classified: bool
    label: Optional[int]
    exit_point: int
    early: bool
    flops_spent: int
    rac_classes: Tuple[int, ...] = ()
    rac_probs: Tuple[float, ...] = ()

    def __post_init__(self):
        if not self.classified and self.label is not None:
            raise ValidationError("a No Decision outcome cannot carry a label")

    @property
    def no_decision(self) -> bool:
        return not self.classified


@dataclass(frozen=True)
class ExitCosts:
    """Exit points (layer ids) and FLOPs charged for the early and full paths."""

    early_exit_point: int
    final_exit_point: int
    early_flops: int = 0
    full_flops: int = 0


@dataclass
class FlopsReport:
    avg_flops_baseline: float
    avg_flops_rac_system: float
    normalized_flops: float
    early_exit_fraction: float
    samples: int = 0


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------

def layer_flops(layer: Layer) -> int:
    """FLOPs of one layer for one sample, from its built input/output shapes."""
    out = int(np.prod(layer.output_shape))
    kind = layer.kind
    if kind == 'conv2d':
        cin = layer.input_shape[0]
        macs = out * cin * layer.kernel_size * layer.kernel_size
        return 2 * macs + (out if layer.use_bias else 0)

    if kind == 'dense':
        n_in = layer.input_shape[0]
        return 2 * n_in * layer.units + (layer.units if layer.use_bias else 0)
    if kind == 'batchnorm':
        return 2 * out
    if kind in ('relu', 'maxpool', 'avgpool'):
        return out
    if kind == 'flatten':
        return 0
    raise ValidationError(f"no FLOPs convention for layer kind {kind!r}")


def rac_flops(rac: Rac) -> int:
    return rac.flops


def flops_of(net: Network, up_to_layer: int, racs: Optional[Sequence[Rac]] = None) -> int:
    """
    FLOPs of layers [0, up_to_layer), plus every RAC when racs is given.

    Nondecreasing in up_to_layer; 0 for an empty prefix without RACs.
    """
    if not 0 <= up_to_layer <= len(net.layers):
        raise ValidationError(f"up_to_layer {up_to_layer} out of range [0, {len(net.layers)}]")
    total = sum(layer_flops(layer) for layer in net.layers[:up_to_layer])
    if racs:
        total += sum(rac_flops(r) for r in racs)
    return int(total)


def exit_costs(net: Network, racs: Sequence[Rac], policy: InferencePolicy) -> ExitCosts:
    """Costs of stopping after the last validation layer versus running to the end."""
    prefix_stop = net.tap_index(policy.validation_layers[-1]) + 1
    early = flops_of(net, prefix_stop, racs)
    full = flops_of(net, len(net.layers), racs)
    return ExitCosts(early_exit_point=policy.validation_layers[-1], final_exit_point=len(net.layers) - 1,
                     early_flops=early, full_flops=full)


# ---------------------------------------------------------------------------
# Decision procedure
# ---------------------------------------------------------------------------

def decide(rac_outputs: Sequence[RacOutput], policy: InferencePolicy, final_layer_eval: Callable[[], int],
           costs: Optional[ExitCosts] = None) -> Outcome:
    """
    Combine RAC votes into an outcome.

    - RAC classes disagree: No Decision, early; final_layer_eval is not called
    - agree and every rac_prob > delta_th: the agreed class, early
    - agree otherwise: call final_layer_eval; the agreed class if it matches, else No Decision

    Args:
        rac_outputs: One output per validation layer, in layer order
        policy: Thresholds
        final_layer_eval: Deferred evaluation of the remaining layers, returns the top-1 label
        costs: Exit points and FLOPs to record

    Raises:
        ValidationError: If rac_outputs is empty
    """
    if not rac_outputs:
        raise ValidationError("decide needs at least one RAC output")
    if costs is None:
        last = policy.validation_layers[-1]
        costs = ExitCosts(early_exit_point=last, final_exit_point=last + 1)

    classes = tuple(int(o.rac_class) for o in rac_outputs)
    probs = tuple(float(o.rac_prob) for o in rac_outputs)
    agreed = classes[0]

    def outcome(classified: bool, early: bool) -> Outcome:
        return Outcome(
            classified=classified,
            label=agreed if classified else None,
            exit_point=costs.early_exit_point if early else costs.final_exit_point,
            early=early,
            flops_spent=costs.early_flops if early else costs.full_flops,
            rac_classes=classes,
            rac_probs=probs,
        )

    if any(c != agreed for c in classes):
        return outcome(classified=False, early=True)
    if all(p > policy.delta_th for p in probs):
        return outcome(classified=True, early=True)
    return outcome(classified=int(final_layer_eval()) == agreed, early=False)


def _check_racs(net: Network, racs: Sequence[Rac], policy: InferencePolicy) -> None:
    layers = tuple(r.layer_id for r in racs)
    if layers != policy.validation_layers:
        raise RacError(f"RACs are for layers {list(layers)} but the policy validates {list(policy.validation_layers)}")
    for r in racs:
        if tuple(net.tap_shape(r.layer_id)) != tuple(r.tap_shape) or r.num_classes != net.num_classes:
            raise RacError(f"RAC at layer {r.layer_id} does not match the network")


def infer(net: Network, racs: Sequence[Rac], policy: InferencePolicy, x: np.ndarray) -> Outcome:
    """
    Run the RAC-validated inference on a single input.

    Raises:
        ShapeError: If x is not one input, or a batch of one, of the network's input shape
    """
    _check_racs(net, racs, policy)
    xb, _ = _as_batch(net, x)
    if xb.shape[0] != 1:
        raise ShapeError(f"infer takes a single input, got a batch of {xb.shape[0]}; use infer_batch")
    xb = xb.astype(np.float64)
    h, stop, taps = forward_prefix(net, xb, policy.validation_layers)
    outputs = [rac_forward(r, taps[r.layer_id][0]) for r in racs]
    return decide(outputs, policy, lambda: int(forward_range(net, h, stop)[0].argmax()),
                  exit_costs(net, racs, policy))


def infer_batch(net: Network, racs: Sequence[Rac], policy: InferencePolicy, inputs: np.ndarray,
                batch_size: int = 128) -> List[Outcome]:
    """
    Batched infer: the prefix runs once per batch and the remaining layers
    only for inputs whose RACs agree without enough confidence.
    """
    _check_racs(net, racs, policy)
    costs = exit_costs(net, racs, policy)
    outcomes: List[Outcome] = []
    for start in range(0, len(inputs), batch_size):
        xb, _ = _as_batch(net, inputs[start:start + batch_size])
        h, stop, taps = forward_prefix(net, xb.astype(np.float64), policy.validation_layers)
        per_rac = [rac_probabilities(r, taps[r.layer_id]) for r in racs]
        decisions = [rac_decisions(p) for p in per_rac]
        classes = np.stack([d[0] for d in decisions], axis=1)
        probs = np.stack([d[1] for d in decisions], axis=1)

        agree = np.all(classes == classes[:, :1], axis=1)
        confident = np.all(probs > policy.delta_th, axis=1)
        deferred = agree & ~confident
        final = np.full(len(xb), -1, dtype=np.int64)
        if deferred.any():
            final[deferred] = forward_range(net, h[deferred], stop).argmax(axis=1)

        for i in range(len(xb)):
            outs = [RacOutput(int(classes[i, j]), float(probs[i, j]), per_rac[j][i]) for j in range(len(racs))]
            outcomes.append(decide(outs, policy, lambda i=i: int(final[i]), costs))
    return outcomes


def baseline_outcomes(net: Network, inputs: np.ndarray, batch_size: int = 128) -> List[Outcome]:
    """Outcomes of the plain network: always classified at the final layer."""
    full = flops_of(net, len(net.layers))
    last = len(net.layers) - 1
    outcomes = []
    for start in range(0, len(inputs), batch_size):
        xb, _ = _as_batch(net, inputs[start:start + batch_size])
        for label in forward_range(net, xb).argmax(axis=1):
            outcomes.append(Outcome(classified=True, label=int(label), exit_point=last, early=False, flops_spent=full))
    return outcomes


def flops_report(net: Network, racs: Sequence[Rac], policy: InferencePolicy, dataset: LabeledDataset,
                 outcomes: Optional[Sequence[Outcome]] = None, batch_size: int = 128) -> FlopsReport:
    """
    Average FLOPs of the baseline and the RAC system over a dataset.

    Raises:
        ValidationError: If the dataset is empty
    """
    if len(dataset) == 0:
        raise ValidationError("FLOPs report needs a nonempty dataset")
    if outcomes is None:
        outcomes = infer_batch(net, racs, policy, dataset.inputs, batch_size)
    return flops_from_outcomes(net, outcomes)


def flops_from_outcomes(net: Network, outcomes: Sequence[Outcome]) -> FlopsReport:
    if not outcomes:
        raise ValidationError("FLOPs report needs at least one outcome")
    baseline = float(flops_of(net, len(net.layers)))
    system = float(np.mean([o.flops_spent for o in outcomes]))
    early = float(np.mean([o.early for o in outcomes]))
    return FlopsReport(avg_flops_baseline=baseline, avg_flops_rac_system=system,
                       normalized_flops=baseline / system, early_exit_fraction=early, samples=len(outcomes))


# ---------------------------------------------------------------------------
# Outcome log
# ---------------------------------------------------------------------------

def outcomes_frame(outcomes: Sequence[Outcome], truths: Sequence[int],
                   baseline_predictions: Sequence[int]) -> pd.DataFrame:
    if not len(outcomes) == len(truths) == len(baseline_predictions):
        raise ValidationError(f"outcome log needs aligned rows, got {len(outcomes)} outcomes, "
                              f"{len(truths)} truths, {len(baseline_predictions)} baseline predictions")
    return pd.DataFrame({
        'index': np.arange(len(outcomes)),
        'verdict': ['classified' if o.classified else 'nd' for o in outcomes],
        'label': [o.label for o in outcomes],
        'truth': [int(t) for t in truths],
        'baseline': [int(b) for b in baseline_predictions],
        'exit_point': [o.exit_point for o in outcomes],
        'early': [bool(o.early) for o in outcomes],
        'flops': [int(o.flops_spent) for o in outcomes],
        'rac_classes': [list(o.rac_classes) for o in outcomes],
        'rac_probs': [list(o.rac_probs) for o in outcomes],
    })


def write_outcome_log(path: Path, outcomes: Sequence[Outcome], truths: Sequence[int],
                      baseline_predictions: Sequence[int]) -> pd.DataFrame:
    """Write one JSON record per input; returns the frame that was written."""
    df = outcomes_frame(outcomes, truths, baseline_predictions)
    write_text(df.to_json(orient='records', lines=True).rstrip('\n') + '\n', path)
    logger.info(f"Wrote outcome log: {path} ({len(df)} rows)")
    return df


def read_outcome_log(path: Path) -> Tuple[List[Outcome], np.ndarray, np.ndarray]:
    """Inverse of write_outcome_log: (outcomes, truths, baseline predictions)."""
    df = pd.read_json(path, orient='records', lines=True)
    outcomes = [
        Outcome(
            classified=row.verdict == 'classified',
            label=int(row.label) if row.verdict == 'classified' else None,
            exit_point=int(row.exit_point),
            early=bool(row.early),
            flops_spent=int(row.flops),
            rac_classes=tuple(int(c) for c in row.rac_classes),
            rac_probs=tuple(float(p) for p in row.rac_probs),
        )
        for row in df.itertuples(index=False)
    ]
    return outcomes, df['truth'].to_numpy(dtype=np.int64), df['baseline'].to_numpy(dtype=np.int64)
