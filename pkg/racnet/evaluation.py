#!/usr/bin/env python3
"""
racnet - Evaluation

Detection metrics for the RAC system, the maximal-softmax-response (MSR)
baseline at a matched false-negative rate, out-of-distribution evaluation
and targeted L2 attacks in the Carlini-Wagner style against the baseline
alone (zero knowledge) or against baseline and RACs (full knowledge).

Negatives are inputs the baseline network misclassifies, positives are the
ones it gets right. TNR is the No-Decision rate among negatives, FNR the
No-Decision rate among positives. Rates are percentages.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit, softmax

from racnet.datasets import load_dataset, load_image_folder
from racnet.inference import InferencePolicy, Outcome, flops_from_outcomes, infer_batch
from racnet.network import (
    LabeledDataset,
    MarginLoss,
    Network,
    ShapeError,
    predict_logits,
    value_and_input_gradient,
)
from racnet.rac import Rac
from racnet.validation import ATTACK_MODES, TARGET_RULES, ValidationError

logger = logging.getLogger(__name__)

FNR_MATCH_TOLERANCE = 0.5


def _pct(num: int, den: int) -> Optional[float]:
    return None if den == 0 else 100.0 * num / den


# ---------------------------------------------------------------------------
# Detection metrics
# ---------------------------------------------------------------------------

@dataclass
class DetectionReport:
    """Natural-error detection results; tnr / fnr are None when undefined."""

    samples: int
    correct: int
    nd: int
    bad: int
    positives: int
    negatives: int
    nd_positives: int
    nd_negatives: int
    early: int
    pct_correct: float
    pct_nd: float
    pct_bad: float
    tnr: Optional[float]
    fnr: Optional[float]
    early_exit_pct: float

    @property
    def pct_good(self) -> float:
        return self.pct_correct + self.pct_nd

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['pct_good'] = self.pct_good
        return d


def detection_metrics(baseline_predictions: Sequence[int], truths: Sequence[int],
                      outcomes: Sequence[Outcome]) -> DetectionReport:
    """
    Detection report from aligned baseline predictions, true labels and outcomes.

    Raises:
        ValidationError: On misaligned or empty inputs
    """
    baseline = np.asarray(baseline_predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if not len(baseline) == len(truths) == len(outcomes):
        raise ValidationError(f"misaligned inputs: {len(baseline)} baseline predictions, "
                              f"{len(truths)} truths, {len(outcomes)} outcomes")
    n = len(truths)
    if n == 0:
        raise ValidationError("detection metrics need at least one sample")

    nd = np.array([o.no_decision for o in outcomes])
    labels = np.array([-1 if o.label is None else o.label for o in outcomes])
    early = np.array([o.early for o in outcomes])
    positive = baseline == truths
    correct = ~nd & (labels == truths)
    bad = ~nd & (labels != truths)

    return DetectionReport(
        samples=n,
        correct=int(correct.sum()),
        nd=int(nd.sum()),
        bad=int(bad.sum()),
        positives=int(positive.sum()),
        negatives=int((~positive).sum()),
        nd_positives=int((nd & positive).sum()),
        nd_negatives=int((nd & ~positive).sum()),
        early=int(early.sum()),
        pct_correct=100.0 * correct.sum() / n,
        pct_nd=100.0 * nd.sum() / n,
        pct_bad=100.0 * bad.sum() / n,
        tnr=_pct(int((nd & ~positive).sum()), int((~positive).sum())),
        fnr=_pct(int((nd & positive).sum()), int(positive.sum())),
        early_exit_pct=100.0 * early.sum() / n,
    )


# ---------------------------------------------------------------------------
# Maximal softmax response
# ---------------------------------------------------------------------------

def msr_scores(logits: np.ndarray) -> np.ndarray:
    return softmax(np.asarray(logits, dtype=np.float64), axis=-1).max(axis=-1)


def msr_detect(logits: np.ndarray, threshold: float):
    """True (No Decision) where the maximal softmax probability is below threshold."""
    flags = msr_scores(logits) < threshold
    return bool(flags) if np.ndim(flags) == 0 else flags


def msr_outcomes(logits: np.ndarray, threshold: float, flops: int = 0) -> List[Outcome]:
    """MSR as a detector: top-1 label unless flagged; always runs the full network."""
    flags = msr_detect(logits, threshold)
    flags = np.atleast_1d(flags)
    labels = np.asarray(logits).reshape(len(flags), -1).argmax(axis=1)
    return [Outcome(classified=not f, label=None if f else int(l), exit_point=-1, early=False, flops_spent=flops)
            for f, l in zip(flags, labels)]


def msr_threshold_for_fnr(logits: np.ndarray, baseline_correct: np.ndarray,
                          target_fnr: float) -> Tuple[float, Optional[float]]:
    """
    Threshold whose FNR on the given data is closest to target_fnr.

    FNR(t) = share of positives with score < t is nondecreasing in t, so the
    search bisects over the sorted positive confidences.

    Returns:
        (threshold, achieved FNR); FNR is None when there are no positives
    """
    scores = msr_scores(logits)
    pos = np.sort(scores[np.asarray(baseline_correct, dtype=bool)])
    if pos.size == 0:
        return 0.0, None
    candidates = np.concatenate([[0.0], pos, [np.nextafter(pos[-1], np.inf)]])
    fnr = 100.0 * np.searchsorted(pos, candidates, side='left') / pos.size
    i = int(np.searchsorted(fnr, target_fnr, side='left'))
    best = min((j for j in (i - 1, i) if 0 <= j < len(candidates)), key=lambda j: abs(fnr[j] - target_fnr))
    return float(candidates[best]), float(fnr[best])


def fit_msr_threshold(val_logits: np.ndarray, val_truths: np.ndarray,
                      val_rac_fnr: Optional[float]) -> Tuple[float, Optional[float], bool]:
    """
    MSR threshold fitted on validation data to the RAC validation FNR.

    Returns:
        (threshold, |achieved FNR - RAC FNR| or None, whether the gap is within tolerance)
    """
    val_correct = np.asarray(val_logits).argmax(axis=1) == np.asarray(val_truths)
    target = 0.0 if val_rac_fnr is None else val_rac_fnr
    threshold, achieved = msr_threshold_for_fnr(val_logits, val_correct, target)
    gap = None if achieved is None or val_rac_fnr is None else abs(achieved - val_rac_fnr)
    comparable = gap is not None and gap <= FNR_MATCH_TOLERANCE
    if not comparable:
        logger.warning(f"MSR threshold could not match the RAC FNR within {FNR_MATCH_TOLERANCE} points "
                       f"(gap {gap}); comparison flagged as not comparable")
    return threshold, gap, comparable


def msr_adversarial_tnr(adversarial_logits: np.ndarray, threshold: float) -> Optional[float]:
    """Share (%) of adversarial inputs MSR flags at threshold; every adversary is a negative."""
    if len(adversarial_logits) == 0:
        return None
    return 100.0 * float(np.mean(msr_scores(adversarial_logits) < threshold))


@dataclass
class MsrComparison:
    threshold: float
    validation_fnr_gap: Optional[float]
    comparable: bool
    msr: DetectionReport
    rac: DetectionReport
    msr_normalized_flops: float = 1.0
    rac_normalized_flops: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'threshold': self.threshold,
            'validation_fnr_gap': self.validation_fnr_gap,
            'comparable': self.comparable,
            'msr': self.msr.to_dict(),
            'rac': self.rac.to_dict(),
            'msr_normalized_flops': self.msr_normalized_flops,
            'rac_normalized_flops': self.rac_normalized_flops,
        }


def msr_comparison(val_logits: np.ndarray, val_truths: np.ndarray, val_rac_fnr: Optional[float],
                   test_logits: np.ndarray, test_truths: np.ndarray, rac_report: DetectionReport,
                   rac_normalized_flops: Optional[float] = None) -> MsrComparison:
    """
    Compare MSR against the RAC system at a matched FNR.

    The threshold is fitted on validation data to the RAC validation FNR; both
    detectors are then reported on the test data.
    """
    threshold, gap, comparable = fit_msr_threshold(val_logits, val_truths, val_rac_fnr)
    baseline = np.asarray(test_logits).argmax(axis=1)
    msr = detection_metrics(baseline, test_truths, msr_outcomes(test_logits, threshold))
    return MsrComparison(threshold=threshold, validation_fnr_gap=gap, comparable=comparable, msr=msr,
                         rac=rac_report, rac_normalized_flops=rac_normalized_flops)


# ---------------------------------------------------------------------------
# Out-of-distribution
# ---------------------------------------------------------------------------

@dataclass
class OodReport:
    source: str
    samples: int
    nd: int
    tnr: float
    early_exit_pct: float
    normalized_flops: float


def uniform_noise(n: int, shape: Sequence[int], seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(n,) + tuple(shape)).astype(np.float32)


def gaussian_noise(n: int, shape: Sequence[int], seed: int = 0, mean: float = 0.5, std: float = 0.25) -> np.ndarray:
    x = np.random.default_rng(seed).normal(mean, std, size=(n,) + tuple(shape))
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def ood_inputs(source: Dict[str, Any], input_shape: Sequence[int], n: int, seed: int = 0) -> np.ndarray:
    """
    Materialize one configured OOD source.

    Kinds: uniform, gaussian (mean, std), dataset (another dataset config whose
    test split is used), images (folder of PNG/JPEG files resized to the input shape).
    """
    kind = source.get('kind')
    if kind == 'uniform':
        return uniform_noise(n, input_shape, seed)
    if kind == 'gaussian':
        return gaussian_noise(n, input_shape, seed, source.get('mean', 0.5), source.get('std', 0.25))
    if kind == 'images':
        return load_image_folder(source['path'], input_shape, limit=n)
    if kind == 'dataset':
        spec = {k: v for k, v in source.items() if k not in ('kind', 'name')}
        x = load_dataset(spec, seed).test.inputs[:n]
        if tuple(x.shape[1:]) != tuple(input_shape):
            raise ValidationError(f"OOD dataset {source.get('path')} has inputs {x.shape[1:]}, network expects "
                                  f"{tuple(input_shape)}; export it as an image folder to resize it")
        return x
    raise ValidationError(f"unknown OOD source kind {kind!r}")


def ood_eval(net: Network, racs: Sequence[Rac], policy: InferencePolicy, ood_data: np.ndarray,
             source: str = 'ood', batch_size: int = 128) -> OodReport:
    """
    Every OOD input is a negative; TNR is the share flagged No Decision.

    Raises:
        ValidationError: If the set is empty
        ShapeError: If inputs do not match the network
    """
    if len(ood_data) == 0:
        raise ValidationError(f"OOD source {source!r} is empty")
    if tuple(ood_data.shape[1:]) != tuple(net.input_shape):
        raise ShapeError(f"OOD inputs {ood_data.shape[1:]} do not match network input {net.input_shape}")
    outcomes = infer_batch(net, racs, policy, ood_data, batch_size)
    nd = sum(o.no_decision for o in outcomes)
    flops = flops_from_outcomes(net, outcomes)
    report = OodReport(source=source, samples=len(outcomes), nd=int(nd), tnr=100.0 * nd / len(outcomes),
                       early_exit_pct=100.0 * flops.early_exit_fraction, normalized_flops=flops.normalized_flops)
    logger.info(f"OOD {source}: TNR {report.tnr:.2f}% over {report.samples} samples")
    return report


# ---------------------------------------------------------------------------
# Adversarial examples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackConfig:
    """Targeted L2 attack settings."""

    mode: str = 'zero_knowledge'
    target: str = 'next'
    max_iterations: int = 200
    learning_rate: float = 0.01
    initial_const: float = 1.0
    const_steps: int = 3
    const_growth: float = 10.0
    confidence: float = 0.0
    rac_loss_weight: float = 1.0
    clip_min: float = 0.0
    clip_max: float = 1.0
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ATTACK_MODES:
            raise ValidationError(f"attack.mode must be one of {ATTACK_MODES}, got {self.mode!r}")
        if self.target not in TARGET_RULES:
            raise ValidationError(f"attack.target must be one of {TARGET_RULES}, got {self.target!r}")
        if self.mode == 'full_knowledge' and not self.rac_loss_weight > 0:
            raise ValidationError("attack.rac_loss_weight must be > 0 for a full-knowledge attack")
        if not self.clip_max > self.clip_min:
            raise ValidationError("attack.clip_max must exceed attack.clip_min")


@dataclass
class AdversarialSet:
    inputs: np.ndarray
    originals: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    success: np.ndarray
    l2: np.ndarray


@dataclass
class AdversarialReport:
    mode: str
    attempted: int
    successes: int
    success_rate: float
    mean_l2: Optional[float]
    adv_tnr: Optional[float] = None
    msr_adversarial_tnr: Optional[float] = None
    early_exit_pct: Optional[float] = None
    normalized_flops: Optional[float] = None


class RacBceLoss:
    """
    Summed binary cross-entropy of every BLC toward the attack target,
    differentiated with respect to the RAC taps.
    """

    def __init__(self, racs: Sequence[Rac], targets: np.ndarray, weight: float = 1.0):
        self.racs = list(racs)
        self.targets = np.asarray(targets, dtype=np.int64)
        self.weight = float(weight)
        self.tap_layers = [r.layer_id for r in self.racs]

    def __call__(self, logits, taps):
        n = logits.shape[0]
        loss = np.zeros(n)
        dtaps = {}
        for rac in self.racs:
            tap = taps[rac.layer_id]
            grad = np.zeros_like(tap)
            for j, blc in enumerate(rac.blcs):
                idx = rac.features.indices[j]
                x = tap[:, idx].reshape(n, -1)
                p = expit(x @ blc.weight + blc.bias)
                y = (self.targets == j).astype(np.float64)
                p_safe = np.clip(p, 1e-12, 1 - 1e-12)
                loss -= y * np.log(p_safe) + (1 - y) * np.log(1 - p_safe)
                grad[:, idx] += ((p - y)[:, None] * blc.weight[None, :]).reshape((n, len(idx)) + tap.shape[2:])
            dtaps[rac.layer_id] = self.weight * grad
        return self.weight * loss, np.zeros_like(logits), dtaps


class _AttackObjective:
    """const * (margin [+ RAC loss]); keeps the last logits for the success check."""

    def __init__(self, targets: np.ndarray, const: np.ndarray, confidence: float,
                 rac_loss: Optional[RacBceLoss] = None):
        self.margin = MarginLoss(targets, confidence)
        self.const = const
        self.rac_loss = rac_loss
        self.tap_layers = rac_loss.tap_layers if rac_loss is not None else ()
        self.last_logits: Optional[np.ndarray] = None

    def __call__(self, logits, taps):
        self.last_logits = logits
        loss, dlogits, _ = self.margin(logits, taps)
        dtaps = {}
        if self.rac_loss is not None:
            rl, _, dtaps = self.rac_loss(logits, taps)
            loss = loss + rl
        scale = self.const.reshape((-1,) + (1,) * (logits.ndim - 1))
        dtaps = {k: v * self.const.reshape((-1,) + (1,) * (v.ndim - 1)) for k, v in dtaps.items()}
        return self.const * loss, dlogits * scale, dtaps


def choose_targets(logits: np.ndarray, labels: np.ndarray, rule: str, seed: int = 0) -> np.ndarray:
    """Attack targets: next ((y+1) mod c), random (seeded, never y) or least_likely (argmin logit)."""
    labels = np.asarray(labels, dtype=np.int64)
    c = logits.shape[1]
    if rule == 'next':
        return (labels + 1) % c
    if rule == 'random':
        shift = np.random.default_rng(seed).integers(1, c, size=labels.size)
        return (labels + shift) % c
    if rule == 'least_likely':
        return np.asarray(logits).argmin(axis=1)
    raise ValidationError(f"unknown target rule {rule!r}")


def _attack_chunk(net: Network, x0: np.ndarray, targets: np.ndarray, cfg: AttackConfig,
                  racs: Optional[Sequence[Rac]]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mid = (cfg.clip_max + cfg.clip_min) / 2.0
    half = (cfg.clip_max - cfg.clip_min) / 2.0
    w0 = np.arctanh(np.clip((x0 - mid) / half, -1 + 1e-6, 1 - 1e-6))
    n = x0.shape[0]
    axes = tuple(range(1, x0.ndim))

    best_adv = x0.copy()
    best_l2 = np.full(n, np.inf)
    success = np.zeros(n, dtype=bool)
    const = np.full(n, float(cfg.initial_const))

    for stage in range(cfg.const_steps):
        active = np.flatnonzero(~success)
        if active.size == 0 or cfg.max_iterations == 0:
            break
        w = w0[active].copy()
        rac_loss = None
        if cfg.mode == 'full_knowledge':
            rac_loss = RacBceLoss(racs, targets[active], cfg.rac_loss_weight)
        objective = _AttackObjective(targets[active], const[active], cfg.confidence, rac_loss)
        for _ in range(cfg.max_iterations):
            x = mid + half * np.tanh(w)
            _, grad_f = value_and_input_gradient(net, x, objective)
            delta = x - x0[active]
            l2 = np.sqrt((delta ** 2).sum(axis=axes))
            hit = objective.last_logits.argmax(axis=1) == targets[active]
            better = hit & (l2 < best_l2[active])
            if better.any():
                rows = active[better]
                best_l2[rows] = l2[better]
                best_adv[rows] = x[better]
                success[rows] = True
            grad_x = 2.0 * delta + grad_f
            w = w - cfg.learning_rate * grad_x * half * (1.0 - np.tanh(w) ** 2)
        logger.debug(f"attack stage {stage + 1}: {success.sum()}/{n} successful")
        const[~success] *= cfg.const_growth
    return best_adv, success, best_l2


def generate_adversarial(net: Network, data: LabeledDataset, cfg: AttackConfig,
                         racs: Optional[Sequence[Rac]] = None,
                         policy: Optional[InferencePolicy] = None,
                         msr_threshold: Optional[float] = None) -> Tuple[AdversarialSet, AdversarialReport]:
    """
    Targeted L2 attack with a tanh box constraint and plain gradient descent.

    Only inputs the baseline classifies correctly are attacked. Success means the
    baseline's top-1 label becomes the target; the lowest-L2 successful iterate
    is kept. When racs and policy are given, successful adversaries are run
    through the RAC system to measure the adversarial TNR. When msr_threshold is
    given, the MSR adversarial TNR is measured on the same adversaries.

    Raises:
        ValidationError: If a full-knowledge attack has no RACs
    """
    if cfg.mode == 'full_knowledge' and not racs:
        raise ValidationError("a full-knowledge attack needs the RACs")
    logits = predict_logits(net, data.inputs)
    correct = logits.argmax(axis=1) == data.labels
    if not correct.all():
        logger.info(f"Attacking {int(correct.sum())} of {len(data)} inputs (baseline-correct only)")
    x_all = data.inputs[correct].astype(np.float64)
    labels = data.labels[correct]
    targets = choose_targets(logits[correct], labels, cfg.target, cfg.seed)

    adv = np.empty_like(x_all)
    success = np.zeros(len(x_all), dtype=bool)
    l2 = np.full(len(x_all), np.inf)
    for start in range(0, len(x_all), cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        adv[sl], success[sl], l2[sl] = _attack_chunk(net, x_all[sl], targets[sl], cfg, racs)

    attempted = len(x_all)
    successes = int(success.sum())
    report = AdversarialReport(
        mode=cfg.mode,
        attempted=attempted,
        successes=successes,
        success_rate=_pct(successes, attempted) or 0.0,
        mean_l2=float(l2[success].mean()) if successes else None,
    )
    if successes and racs and policy is not None:
        outcomes = infer_batch(net, racs, policy, adv[success])
        nd = sum(o.no_decision for o in outcomes)
        flops = flops_from_outcomes(net, outcomes)
        report.adv_tnr = 100.0 * nd / successes
        report.early_exit_pct = 100.0 * flops.early_exit_fraction
        report.normalized_flops = flops.normalized_flops
    if successes and msr_threshold is not None:
        report.msr_adversarial_tnr = msr_adversarial_tnr(predict_logits(net, adv[success]), msr_threshold)

    logger.info(f"{cfg.mode} attack: success {report.success_rate:.1f}% of {attempted}, "
                f"mean L2 {report.mean_l2}, adversarial TNR {report.adv_tnr}, MSR {report.msr_adversarial_tnr}")
    adv_set = AdversarialSet(inputs=adv[success].astype(np.float32), originals=x_all[success].astype(np.float32),
                             labels=labels[success], targets=targets[success], success=success, l2=l2[success])
    return adv_set, report


def compare_attacks(zero: AdversarialReport, full: AdversarialReport) -> Dict[str, Any]:
    """Paired zero- vs full-knowledge summary line."""
    ge = None
    if zero.mean_l2 is not None and full.mean_l2 is not None:
        ge = full.mean_l2 >= zero.mean_l2
    return {
        'zero_knowledge_mean_l2': zero.mean_l2,
        'full_knowledge_mean_l2': full.mean_l2,
        'zero_knowledge_success_rate': zero.success_rate,
        'full_knowledge_success_rate': full.success_rate,
        'full_knowledge_needs_more_distortion': ge,
    }


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def _nan_if_none(value: Optional[float]) -> float:
    return np.nan if value is None else value


def detection_table(rows: Dict[str, DetectionReport]) -> pd.DataFrame:
    return pd.DataFrame([
        {'technique': name, '% correct': r.pct_correct, '% ND': r.pct_nd, '% bad': r.pct_bad,
         'TNR': _nan_if_none(r.tnr), 'FNR': _nan_if_none(r.fnr), '% early exit': r.early_exit_pct}
        for name, r in rows.items()
    ])


def format_table(df: pd.DataFrame) -> str:
    """Aligned plain-text table; undefined values print as '-'."""
    return df.to_string(index=False, na_rep='-', float_format=lambda v: f"{v:.2f}") + '\n'
