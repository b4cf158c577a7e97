#!/usr/bin/env python3
"""
racnet - Command Line Interface

Subcommands:
- train:       train the baseline network
- relevance:   relevance-score matrices M_l for the validation layers
- train-racs:  one auxiliary cell per validation layer
- eval:        RAC-validated inference on the test split
- sweep:       validation-layer, k and delta_th sweeps on the validation split
- attack:      targeted L2 attacks, zero / full knowledge
- ood:         out-of-distribution TNR per configured source
- pipeline:    train -> relevance -> train-racs -> eval

Every stage writes its artifacts under output_dir and records the hashes of
the artifacts it was built from.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import joblib
import numpy as np
import pandas as pd
from dotenv import load_dotenv
from joblib import Parallel, delayed

from racnet.config import ExperimentConfig, load_config, save_config, setup_logging
from racnet.datasets import DatasetSplits, dataset_tag, load_dataset, stratified_subsample
from racnet.evaluation import (
    AttackConfig,
    compare_attacks,
    detection_metrics,
    detection_table,
    fit_msr_threshold,
    format_table,
    generate_adversarial,
    msr_comparison,
    ood_eval,
    ood_inputs,
)
from racnet.inference import (
    InferencePolicy,
    baseline_outcomes,
    flops_from_outcomes,
    infer_batch,
    write_outcome_log,
)
from racnet.lrp import (
    LrpError,
    LrpParams,
    RelevanceScoreMatrix,
    cache_key,
    load_relevance_matrix,
    relevance_score_matrix,
    save_relevance_matrix,
)
from racnet.network import (
    ModelFileError,
    Network,
    TrainingError,
    accuracy,
    load_model,
    model_hash,
    predict,
    predict_logits,
    save_model,
    small_cnn,
    train,
    vgg_desk,
    write_json,
    write_text,
)
from racnet.rac import (
    BlcParams,
    Rac,
    RacError,
    blc_accuracy,
    collect_taps,
    load_rac_bundle,
    save_rac_bundle,
    train_rac,
)
from racnet.validation import ValidationError

logger = logging.getLogger(__name__)

SWEEP_AXES = ('layers', 'k', 'delta_th')
TREND_TOLERANCE = 1e-9


class ArtifactMismatchError(RuntimeError):
    """Raised when an artifact was built from a different upstream artifact."""
    pass


# ---------------------------------------------------------------------------
# Run context
# ---------------------------------------------------------------------------

@dataclass
class RunContext:
    """Config plus the artifact layout of one output directory."""

    config: ExperimentConfig
    force: bool = False
    baseline_only: bool = False
    _splits: Optional[DatasetSplits] = field(default=None, repr=False)

    @property
    def out(self) -> Path:
        return self.config.output_path

    @property
    def model_path(self) -> Path:
        return self.out / 'model.joblib'

    @property
    def racs_path(self) -> Path:
        return self.out / 'racs.joblib'

    def matrix_path(self, layer_id: int) -> Path:
        return self.out / 'relevance' / f'M_layer{layer_id}.json'

    @property
    def splits(self) -> DatasetSplits:
        if self._splits is None:
            self._splits = load_dataset(self.config.dataset, self.config.seed)
        return self._splits

    @property
    def threads(self) -> int:
        return int(self.config.threads)

    @property
    def batch_size(self) -> int:
        return int(self.config.inference.get('batch_size', 128))


def training_hash(config: ExperimentConfig) -> str:
    """Hash of the config sections that determine the trained model."""
    return joblib.hash([config.dataset, config.architecture, config.seed, config.training])


def lrp_params(config: ExperimentConfig) -> LrpParams:
    return LrpParams(alpha=float(config.lrp['alpha']), beta=float(config.lrp['beta']),
                     stabilizer_eps=float(config.lrp['stabilizer_eps']))


def build_model(config: ExperimentConfig, input_shape: Sequence[int], num_classes: int) -> Network:
    arch = config.architecture
    builder = vgg_desk if arch['name'] == 'vgg_desk' else small_cnn
    return builder(input_shape=tuple(input_shape), num_classes=num_classes, widths=tuple(arch['widths']),
                   pool_after=tuple(arch.get('pool_after') or ()), seed=config.seed)


def validation_layer_ids(net: Network, ordinals: Sequence[int]) -> List[int]:
    """Conv ordinals (1-based, as configured) to layer ids."""
    return [net.conv_layer_id(int(o)) for o in ordinals]


def load_trained(ctx: RunContext) -> Tuple[Network, str]:
    if not ctx.model_path.exists():
        raise FileNotFoundError(f"model file not found: {ctx.model_path} (run `racnet train` first)")
    net = load_model(ctx.model_path)
    return net, model_hash(net)


def load_racs(ctx: RunContext, net: Network, digest: str) -> Tuple[List[Rac], Dict[str, Any]]:
    """
    Load the RAC bundle and check that it was trained on this model.

    Raises:
        ArtifactMismatchError: If the bundle records a different model hash
    """
    if not ctx.racs_path.exists():
        raise FileNotFoundError(f"RAC bundle not found: {ctx.racs_path} (run `racnet train-racs` first)")
    racs, provenance = load_rac_bundle(ctx.racs_path)
    if provenance.get('model_hash') != digest:
        raise ArtifactMismatchError(
            f"RAC bundle {ctx.racs_path} was trained on model {str(provenance.get('model_hash'))[:12]}, "
            f"loaded model is {digest[:12]}; rerun train-racs with --force"
        )
    return racs, provenance


def _banner(title: str) -> None:
    logger.info("=" * 60)
    logger.info(f"RACNET - {title}")
    logger.info("=" * 60)


def _none_if_nan(value):
    return None if value is None or (isinstance(value, float) and np.isnan(value)) else value


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(ctx: RunContext) -> str:
    """
    Train the baseline network; reuses an existing model trained from the same config.

    Returns:
        Model hash
    """
    _banner("Train baseline network")
    config = ctx.config
    meta_path = ctx.out / 'model.json'
    digest_cfg = training_hash(config)
    if ctx.model_path.exists() and meta_path.exists() and not ctx.force:
        with open(meta_path, 'r') as f:
            meta = json.load(f)
        if meta.get('training_hash') == digest_cfg:
            logger.info(f"Model already trained from this config: {ctx.model_path} (use --force to retrain)")
            return str(meta['model_hash'])

    splits = ctx.splits
    net = build_model(config, splits.input_shape, splits.num_classes)
    logger.info(f"Architecture {config.architecture['name']}: {net.depth} layers, "
                f"{net.num_parameters()} parameters, {len(net.conv_layer_ids())} conv layers")

    tr = config.training
    history: List[Dict[str, float]] = []
    net = train(net, splits.train, learning_rate=tr['learning_rate'], batch_size=tr['batch_size'],
                epochs=tr['epochs'], seed=config.seed, momentum=tr.get('momentum', 0.9),
                weight_decay=tr.get('weight_decay', 0.0), lr_decay=tr.get('lr_decay', 1.0),
                lr_decay_every=tr.get('lr_decay_every', 0), history=history)

    digest = save_model(net, ctx.model_path)
    meta = {
        'model_hash': digest,
        'config_hash': config.hash(),
        'training_hash': digest_cfg,
        'dataset_tag': dataset_tag(config.dataset, config.seed),
        'architecture': config.architecture['name'],
        'parameters': net.num_parameters(),
        'layers': [layer.spec() for layer in net.layers],
        'train_accuracy': accuracy(net, splits.train),
        'validation_accuracy': accuracy(net, splits.validation),
        'test_accuracy': accuracy(net, splits.test),
    }
    write_json(meta, meta_path)
    write_text(pd.DataFrame(history).to_json(orient='records', lines=True).rstrip('\n') + '\n',
               ctx.out / 'training_log.jsonl')
    save_config(config, ctx.out / 'config.yaml')
    logger.info(f"Baseline accuracy: train {meta['train_accuracy']:.4f}, "
                f"validation {meta['validation_accuracy']:.4f}, test {meta['test_accuracy']:.4f}")
    return digest


# ---------------------------------------------------------------------------
# relevance
# ---------------------------------------------------------------------------

def _relevance_tag(config: ExperimentConfig) -> str:
    return joblib.hash([dataset_tag(config.dataset, config.seed), config.lrp.get('max_samples')])


def matrices_for(ctx: RunContext, net: Network, digest: str,
                 layer_ids: Sequence[int]) -> Dict[int, Tuple[RelevanceScoreMatrix, Dict[str, Any]]]:
    """M_l for each layer, reused from disk when the cache key matches."""
    config = ctx.config
    params = lrp_params(config)
    tag = _relevance_tag(config)
    result = {}
    for layer_id in layer_ids:
        path = ctx.matrix_path(layer_id)
        key = cache_key(digest, layer_id, params, tag)
        if path.exists() and not ctx.force:
            m, record = load_relevance_matrix(path)
            if record.get('cache_key') == key:
                logger.info(f"Reusing cached relevance matrix for layer {layer_id}: {path}")
                result[layer_id] = (m, record)
                continue
            logger.info(f"Cached matrix {path} is stale; recomputing")

        data = ctx.splits.train
        cap = config.lrp.get('max_samples')
        if cap is not None and len(data) > cap:
            data = data.subset(stratified_subsample(data.labels, cap, config.seed))
        m = relevance_score_matrix(net, data, layer_id, params, batch_size=config.lrp['batch_size'],
                                   n_jobs=ctx.threads)
        record = save_relevance_matrix(m, path, digest, params, tag,
                                       extra={'conv_ordinal': net.conv_layer_ids().index(layer_id) + 1})
        result[layer_id] = (m, record)
    return result


def cmd_relevance(ctx: RunContext) -> Dict[int, Tuple[RelevanceScoreMatrix, Dict[str, Any]]]:
    _banner("Relevance-score matrices")
    net, digest = load_trained(ctx)
    return matrices_for(ctx, net, digest, validation_layer_ids(net, ctx.config.rac['validation_layers']))


# ---------------------------------------------------------------------------
# train-racs
# ---------------------------------------------------------------------------

def _rac_training_subset(ctx: RunContext, seed: int):
    data = ctx.splits.train
    cap = ctx.config.rac.get('max_train_samples')
    if cap is not None and len(data) > cap:
        data = data.subset(stratified_subsample(data.labels, cap, seed))
    return data


def cmd_train_racs(ctx: RunContext) -> List[Rac]:
    """Train one RAC per validation layer and log per-BLC accuracy."""
    _banner("Train auxiliary cells")
    config = ctx.config
    net, digest = load_trained(ctx)
    layer_ids = validation_layer_ids(net, config.rac['validation_layers'])
    matrices = matrices_for(ctx, net, digest, layer_ids)

    k = int(config.rac['k'])
    params = BlcParams.from_config(config.rac.get('blc', {}))
    data = _rac_training_subset(ctx, config.seed)
    train_taps = collect_taps(net, data.inputs, layer_ids)
    val_taps = collect_taps(net, ctx.splits.validation.inputs, layer_ids)

    racs: List[Rac] = []
    rows = []
    for layer_id in layer_ids:
        rac = train_rac(net, data, matrices[layer_id][0], layer_id, k, params, seed=config.seed,
                        n_jobs=ctx.threads, taps=train_taps[layer_id])
        train_acc = blc_accuracy(rac, train_taps[layer_id], data.labels)
        val_acc = blc_accuracy(rac, val_taps[layer_id], ctx.splits.validation.labels)
        for j in range(rac.num_classes):
            rows.append({'layer_id': layer_id, 'class_id': j, 'train_accuracy': train_acc[j],
                         'validation_accuracy': val_acc[j]})
        logger.info(f"Layer {layer_id}: mean BLC accuracy train {np.mean(train_acc):.4f}, "
                    f"validation {np.mean(val_acc):.4f}")
        racs.append(rac)

    provenance = {
        'model_hash': digest,
        'matrix_hashes': {str(l): matrices[l][1]['matrix_hash'] for l in layer_ids},
        'k': k,
        'validation_layers': [int(o) for o in config.rac['validation_layers']],
        'layer_ids': layer_ids,
        'seed': int(config.seed),
    }
    save_rac_bundle(racs, ctx.racs_path, provenance)
    summary = dict(provenance)
    summary['racs'] = [
        {'layer_id': r.layer_id, 'k': r.k, 'tap_shape': list(r.tap_shape),
         'parameters': r.parameter_count, 'flops': r.flops}
        for r in racs
    ]
    summary['added_parameters'] = int(sum(r.parameter_count for r in racs))
    summary['baseline_parameters'] = net.num_parameters()
    write_json(summary, ctx.out / 'racs.json')
    write_text(pd.DataFrame(rows).to_json(orient='records', lines=True).rstrip('\n') + '\n', ctx.out / 'rac_accuracy.jsonl')
    logger.info(f"Added parameters: {summary['added_parameters']} "
                f"({100.0 * summary['added_parameters'] / net.num_parameters():.2f}% of the baseline)")
    return racs


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def policy_for(config: ExperimentConfig, racs: Sequence[Rac], delta_th: Optional[float] = None) -> InferencePolicy:
    return InferencePolicy(validation_layers=tuple(r.layer_id for r in racs),
                           delta_th=float(config.inference['delta_th'] if delta_th is None else delta_th))


def cmd_eval(ctx: RunContext) -> Dict[str, Any]:
    """Detection and FLOPs report on the test split, plus the MSR comparison."""
    _banner("Evaluate" + (" (baseline only)" if ctx.baseline_only else ""))
    net, digest = load_trained(ctx)
    test = ctx.splits.test
    test_logits = predict_logits(net, test.inputs, ctx.batch_size)
    baseline = test_logits.argmax(axis=1)

    rows = {}
    report: Dict[str, Any] = {'model_hash': digest, 'samples': len(test),
                              'baseline_accuracy': float(np.mean(baseline == test.labels) * 100.0)}
    if ctx.baseline_only:
        outcomes = baseline_outcomes(net, test.inputs, ctx.batch_size)
        name = 'Baseline'
    else:
        racs, provenance = load_racs(ctx, net, digest)
        policy = policy_for(ctx.config, racs)
        outcomes = infer_batch(net, racs, policy, test.inputs, ctx.batch_size)
        report['racs'] = provenance
        report['delta_th'] = policy.delta_th
        name = 'RAC'

    detection = detection_metrics(baseline, test.labels, outcomes)
    flops = flops_from_outcomes(net, outcomes)
    rows[name] = detection
    report['detection'] = detection.to_dict()
    report['flops'] = asdict(flops)

    if not ctx.baseline_only:
        val = ctx.splits.validation
        val_logits = predict_logits(net, val.inputs, ctx.batch_size)
        val_outcomes = infer_batch(net, racs, policy, val.inputs, ctx.batch_size)
        val_report = detection_metrics(val_logits.argmax(axis=1), val.labels, val_outcomes)
        comparison = msr_comparison(val_logits, val.labels, val_report.fnr, test_logits, test.labels,
                                    detection, flops.normalized_flops)
        rows['MSR'] = comparison.msr
        report['msr'] = comparison.to_dict()
        if comparison.comparable:
            logger.info(f"At matched FNR: RAC TNR {detection.tnr} with {flops.normalized_flops:.2f}x fewer FLOPs, "
                        f"MSR TNR {comparison.msr.tnr} at 1.00x")

    eval_dir = ctx.out / 'eval'
    write_outcome_log(eval_dir / 'outcomes.jsonl', outcomes, test.labels, baseline)
    write_json(report, eval_dir / 'report.json')
    table = format_table(detection_table(rows))
    table += (f"\nnormalized #FLOPs: {flops.normalized_flops:.4f}"
              f"\nearly exit: {100.0 * flops.early_exit_fraction:.2f}%\n")
    write_text(table, eval_dir / 'report.txt')
    logger.info(f"TNR {detection.tnr}, FNR {detection.fnr}, normalized #FLOPs {flops.normalized_flops:.4f}, "
                f"early exit {100.0 * flops.early_exit_fraction:.2f}%")
    return report


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def sweep_points(config: ExperimentConfig) -> List[Dict[str, Any]]:
    """Every (axis, layer pair, k, delta_th) grid point; other axes held at the configured values."""
    sw = config.sweep
    base_pair = [int(o) for o in config.rac['validation_layers']]
    base_k = int(config.rac['k'])
    base_delta = float(config.inference['delta_th'])
    points = [{'axis': 'layers', 'layers': [int(o) for o in pair], 'k': base_k, 'delta_th': base_delta}
              for pair in sw['layer_pairs']]
    points += [{'axis': 'k', 'layers': base_pair, 'k': int(k), 'delta_th': base_delta} for k in sw['k']]
    points += [{'axis': 'delta_th', 'layers': base_pair, 'k': base_k, 'delta_th': float(d)}
               for d in sw['delta_th']]
    return points


def _evaluate_point(net: Network, racs: Sequence[Rac], delta_th: float, inputs: np.ndarray,
                    truths: np.ndarray, baseline: np.ndarray, batch_size: int) -> Dict[str, Any]:
    policy = InferencePolicy(tuple(r.layer_id for r in racs), delta_th)
    outcomes = infer_batch(net, racs, policy, inputs, batch_size)
    det = detection_metrics(baseline, truths, outcomes)
    flops = flops_from_outcomes(net, outcomes)
    return {'tnr': det.tnr, 'fnr': det.fnr, 'normalized_flops': flops.normalized_flops,
            'early_exit_pct': det.early_exit_pct, 'pct_correct': det.pct_correct, 'pct_nd': det.pct_nd,
            'pct_bad': det.pct_bad}


def nonincreasing(values: Sequence[Optional[float]]) -> bool:
    """Monotone nonincreasing over the defined values, ties allowed."""
    vals = [v for v in values if v is not None and not np.isnan(v)]
    return all(b <= a + TREND_TOLERANCE for a, b in zip(vals, vals[1:]))


def pareto_set(rows: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """Rows not dominated in (higher TNR, lower FNR)."""
    defined = [r for r in rows if _none_if_nan(r.get('tnr')) is not None and _none_if_nan(r.get('fnr')) is not None]
    front = []
    for r in defined:
        dominated = any(
            q['tnr'] >= r['tnr'] and q['fnr'] <= r['fnr'] and (q['tnr'] > r['tnr'] or q['fnr'] < r['fnr'])
            for q in defined
        )
        if not dominated:
            front.append(r)
    return front


def _medians(df: pd.DataFrame, key: str) -> pd.DataFrame:
    metrics = ['tnr', 'fnr', 'normalized_flops', 'early_exit_pct', 'pct_correct', 'pct_nd', 'pct_bad']
    frame = df.copy()
    frame[metrics] = frame[metrics].astype(float)
    frame[key] = frame[key].map(lambda v: tuple(v) if isinstance(v, list) else v)
    med = frame.groupby(key, sort=False)[metrics].median()
    med['seeds'] = frame.groupby(key, sort=False)['seed'].count()
    return med.reset_index()


def cmd_sweep(ctx: RunContext) -> Dict[str, Any]:
    """
    Evaluate the three hyper-parameter grids on the validation split for every sweep seed.

    Infeasible points (k larger than the channel count of a layer) are
    recorded as skipped. Trend checks over the per-point medians are logged,
    never fatal.
    """
    _banner("Hyper-parameter sweep")
    config = ctx.config
    net, digest = load_trained(ctx)
    seeds = [int(s) for s in config.sweep['seeds']]
    params = BlcParams.from_config(config.rac.get('blc', {}))

    feasible, skipped = [], []
    for point in sweep_points(config):
        layer_ids = validation_layer_ids(net, point['layers'])
        too_small = [(o, net.tap_shape(l)[0]) for o, l in zip(point['layers'], layer_ids)
                     if point['k'] > net.tap_shape(l)[0]]
        if too_small:
            reason = ', '.join(f"k={point['k']} > r={r} at conv {o}" for o, r in too_small)
            logger.warning(f"Skipping {point['axis']} grid point {point}: {reason}")
            skipped.append(dict(point, reason=reason))
            continue
        feasible.append(dict(point, layer_ids=layer_ids))

    needed_layers = sorted({l for p in feasible for l in p['layer_ids']})
    matrices = matrices_for(ctx, net, digest, needed_layers)

    # a RAC depends on its layer, k and seed only, so each is trained once
    rac_keys = sorted({(l, p['k'], s) for p in feasible for l in p['layer_ids'] for s in seeds})
    logger.info(f"{len(feasible)} grid points x {len(seeds)} seeds, {len(rac_keys)} distinct RACs to train")
    trained = Parallel(n_jobs=ctx.threads)(
        delayed(train_rac)(net, _rac_training_subset(ctx, s), matrices[l][0], l, k, params, seed=s,
                           n_jobs=1)
        for l, k, s in rac_keys
    )
    rac_table = dict(zip(rac_keys, trained))

    val = ctx.splits.validation
    baseline = predict(net, val.inputs, ctx.batch_size)
    jobs = [(p, s) for p in feasible for s in seeds]
    metrics = Parallel(n_jobs=ctx.threads)(
        delayed(_evaluate_point)(net, [rac_table[(l, p['k'], s)] for l in p['layer_ids']], p['delta_th'],
                                 val.inputs, val.labels, baseline, ctx.batch_size)
        for p, s in jobs
    )

    records = []
    for (p, s), m in zip(jobs, metrics):
        record = {'axis': p['axis'], 'layers': p['layers'], 'k': p['k'], 'delta_th': p['delta_th'], 'seed': s}
        record.update(m)
        records.append(record)
        logger.info(f"[{p['axis']}] layers={p['layers']} k={p['k']} delta_th={p['delta_th']} seed={s}: "
                    f"TNR {m['tnr']}, FNR {m['fnr']}, normalized #FLOPs {m['normalized_flops']:.3f}")

    sweep_dir = ctx.out / 'sweep'
    axis_key = {'layers': 'layers', 'k': 'k', 'delta_th': 'delta_th'}
    trends: Dict[str, Dict[str, bool]] = {}
    pareto: List[Dict[str, Any]] = []
    frame = pd.DataFrame(records)
    for axis in SWEEP_AXES:
        df = frame[frame['axis'] == axis] if len(frame) else frame
        write_text((df.to_json(orient='records', lines=True).rstrip('\n') + '\n') if len(df) else '',
                   sweep_dir / f'{axis}.jsonl')
        if not len(df):
            write_text('no feasible grid points\n', sweep_dir / f'{axis}.txt')
            continue
        med = _medians(df, axis_key[axis])
        write_text(format_table(med), sweep_dir / f'{axis}.txt')
        if axis == 'layers':
            trends[axis] = {'tnr_nonincreasing': nonincreasing(med['tnr'].tolist()),
                            'fnr_nonincreasing': nonincreasing(med['fnr'].tolist())}
            pareto = [
                {'layers': list(r['layers']), 'tnr': r['tnr'], 'fnr': r['fnr'],
                 'normalized_flops': r['normalized_flops']}
                for r in pareto_set(med.to_dict(orient='records'))
            ]
        elif axis == 'k':
            trends[axis] = {'fnr_nonincreasing': nonincreasing(med['fnr'].tolist())}
        else:
            trends[axis] = {'normalized_flops_nonincreasing': nonincreasing(med['normalized_flops'].tolist())}
        for name, ok in trends[axis].items():
            if ok:
                logger.info(f"Trend check {axis}.{name}: holds")
            else:
                logger.warning(f"Trend check {axis}.{name}: does not hold over the grid medians")

    summary = {
        'model_hash': digest,
        'seeds': seeds,
        'grid_points': len(feasible) + len(skipped),
        'records': len(records),
        'skipped': skipped,
        'trends': trends,
        'pareto_layers': pareto,
    }
    write_json(summary, sweep_dir / 'summary.json')
    logger.info(f"Sweep complete: {len(records)} records, {len(skipped)} skipped grid points")
    return summary


# ---------------------------------------------------------------------------
# attack
# ---------------------------------------------------------------------------

def attack_config(config: ExperimentConfig, mode: str) -> AttackConfig:
    at = config.attack
    return AttackConfig(
        mode=mode,
        target=at['target'],
        max_iterations=int(at['max_iterations']),
        learning_rate=float(at['learning_rate']),
        initial_const=float(at['initial_const']),
        const_steps=int(at['const_steps']),
        const_growth=float(at['const_growth']),
        confidence=float(at['confidence']),
        rac_loss_weight=float(at['rac_loss_weight']),
        clip_min=float(at['clip_min']),
        clip_max=float(at['clip_max']),
        batch_size=int(at['batch_size']),
        seed=int(config.seed),
    )


def cmd_attack(ctx: RunContext) -> Dict[str, Any]:
    _banner("Adversarial attacks")
    config = ctx.config
    net, digest = load_trained(ctx)
    racs, _ = load_racs(ctx, net, digest)
    policy = policy_for(config, racs)
    test = ctx.splits.test
    data = test.subset(stratified_subsample(test.labels, int(config.attack['samples']), config.seed))

    val = ctx.splits.validation
    val_logits = predict_logits(net, val.inputs, ctx.batch_size)
    val_report = detection_metrics(val_logits.argmax(axis=1), val.labels,
                                   infer_batch(net, racs, policy, val.inputs, ctx.batch_size))
    threshold, gap, comparable = fit_msr_threshold(val_logits, val.labels, val_report.fnr)

    modes = ['zero_knowledge', 'full_knowledge'] if config.attack.get('paired') else [config.attack['mode']]
    reports = {}
    for mode in modes:
        _, reports[mode] = generate_adversarial(net, data, attack_config(config, mode), racs, policy,
                                                msr_threshold=threshold)

    result: Dict[str, Any] = {
        'model_hash': digest,
        'reports': {m: asdict(r) for m, r in reports.items()},
        'msr': {'threshold': threshold, 'validation_fnr_gap': gap, 'comparable': comparable},
    }
    if 'zero_knowledge' in reports:
        result['adversarial_tnr'] = reports['zero_knowledge'].adv_tnr
        result['msr_adversarial_tnr'] = reports['zero_knowledge'].msr_adversarial_tnr
    table = pd.DataFrame([
        {'attack': m, 'attempted': r.attempted, 'success %': r.success_rate, 'mean L2': r.mean_l2,
         'adversarial TNR': r.adv_tnr, 'MSR adversarial TNR': r.msr_adversarial_tnr,
         '% early exit': r.early_exit_pct, 'normalized #FLOPs': r.normalized_flops}
        for m, r in reports.items()
    ])
    text = format_table(table)
    if len(reports) == 2:
        comparison = compare_attacks(reports['zero_knowledge'], reports['full_knowledge'])
        result['comparison'] = comparison
        text += (f"\nmean L2: zero knowledge {comparison['zero_knowledge_mean_l2']}, "
                 f"full knowledge {comparison['full_knowledge_mean_l2']}\n")
        if comparison['full_knowledge_needs_more_distortion'] is False:
            logger.warning("Full-knowledge attack needed less distortion than zero-knowledge")
    write_json(result, ctx.out / 'attack' / 'report.json')
    write_text(text, ctx.out / 'attack' / 'report.txt')
    return result


# ---------------------------------------------------------------------------
# ood
# ---------------------------------------------------------------------------

def cmd_ood(ctx: RunContext) -> Dict[str, Any]:
    _banner("Out-of-distribution evaluation")
    config = ctx.config
    net, digest = load_trained(ctx)
    racs, _ = load_racs(ctx, net, digest)
    policy = policy_for(config, racs)
    n = int(config.ood['samples'])

    reports = []
    for i, source in enumerate(config.ood.get('sources') or []):
        name = source.get('name') or source['kind']
        x = ood_inputs(source, net.input_shape, n, seed=config.seed + i)
        reports.append(ood_eval(net, racs, policy, x, name, ctx.batch_size))

    result = {'model_hash': digest, 'delta_th': policy.delta_th, 'sources': [asdict(r) for r in reports]}
    table = pd.DataFrame([
        {'source': r.source, 'samples': r.samples, 'TNR': r.tnr, '% early exit': r.early_exit_pct,
         'normalized #FLOPs': r.normalized_flops}
        for r in reports
    ])
    write_json(result, ctx.out / 'ood' / 'report.json')
    write_text(format_table(table) if len(table) else 'no OOD sources configured\n', ctx.out / 'ood' / 'report.txt')
    return result


def cmd_pipeline(ctx: RunContext) -> Dict[str, Any]:
    cmd_train(ctx)
    cmd_relevance(ctx)
    cmd_train_racs(ctx)
    return cmd_eval(ctx)


COMMANDS = {
    'train': cmd_train,
    'relevance': cmd_relevance,
    'train-racs': cmd_train_racs,
    'eval': cmd_eval,
    'sweep': cmd_sweep,
    'attack': cmd_attack,
    'ood': cmd_ood,
    'pipeline': cmd_pipeline,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _common_flags() -> argparse.ArgumentParser:
    # SUPPRESS defaults let the flags appear before or after the subcommand
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument('--config', type=Path, help='Experiment config (YAML), merged over the defaults')
    common.add_argument('--seed', type=int, help='Override the run seed')
    common.add_argument('--out', type=Path, help='Override output_dir')
    common.add_argument('--force', action='store_true', help='Recompute artifacts even if cached')
    common.add_argument('--baseline-only', action='store_true', help='eval: disable the RACs')
    common.add_argument('--threads', type=int, help='Parallel workers')
    common.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help='Logging level')
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog='racnet',
        description='racnet: relevant-feature auxiliary cells for error detection and early exit',
        parents=[common],
    )
    sub = parser.add_subparsers(dest='command', required=True)
    helps = {
        'train': 'Train the baseline network',
        'relevance': 'Compute relevance-score matrices for the validation layers',
        'train-racs': 'Train the auxiliary cells',
        'eval': 'Detection and FLOPs report on the test split',
        'sweep': 'Validation-layer, k and delta_th sweeps on the validation split',
        'attack': 'Targeted L2 attacks and adversarial TNR',
        'ood': 'Out-of-distribution TNR per source',
        'pipeline': 'train, relevance, train-racs and eval in one run',
    }
    for name, text in helps.items():
        sub.add_parser(name, help=text, parents=[common])
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if 'seed' in args:
        overrides['seed'] = args.seed
    if 'out' in args:
        overrides['output_dir'] = str(args.out)
    if 'threads' in args:
        overrides['threads'] = args.threads
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')

    try:
        config = load_config(getattr(args, 'config', None), overrides_from_args(args))
        setup_logging(config, getattr(args, 'log_level', None))
        ctx = RunContext(config=config, force=getattr(args, 'force', False),
                         baseline_only=getattr(args, 'baseline_only', False))
        COMMANDS[args.command](ctx)
    except (ValidationError, ModelFileError, FileNotFoundError, LrpError, RacError, TrainingError,
            ArtifactMismatchError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1

    logger.info("=" * 60)
    logger.info(f"{args.command} complete! Output directory: {ctx.out}")
    logger.info("=" * 60)
    return 0


if __name__ == '__main__':
    sys.exit(main())
