"""
Unit tests for racnet.evaluation
"""

import imageio
import numpy as np
import pytest

from racnet.evaluation import (
    AdversarialReport,
    AttackConfig,
    RacBceLoss,
    choose_targets,
    compare_attacks,
    detection_metrics,
    detection_table,
    fit_msr_threshold,
    format_table,
    gaussian_noise,
    generate_adversarial,
    msr_adversarial_tnr,
    msr_comparison,
    msr_detect,
    msr_outcomes,
    msr_scores,
    msr_threshold_for_fnr,
    ood_eval,
    ood_inputs,
    uniform_noise,
)
from racnet.inference import InferencePolicy, Outcome
from racnet.network import ShapeError
from racnet.validation import ValidationError
from tests.test_rac import make_rac


def classified(label):
    return Outcome(classified=True, label=label, exit_point=7, early=True, flops_spent=1)


def nd():
    return Outcome(classified=False, label=None, exit_point=7, early=True, flops_spent=1)


@pytest.fixture
def ranked_logits():
    """Two-class logits whose softmax confidence increases row by row; every row predicts 0."""
    return np.array([[0.5, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])


class TestDetectionMetrics:
    """Test detection rates."""

    def test_four_sample_example(self):
        report = detection_metrics([0, 1, 0, 1], [0, 1, 2, 0],
                                   [classified(0), classified(1), nd(), classified(2)])
        assert report.tnr == pytest.approx(50.0)
        assert report.fnr == pytest.approx(0.0)
        assert report.pct_correct == pytest.approx(50.0)
        assert report.pct_nd == pytest.approx(25.0)
        assert report.pct_bad == pytest.approx(25.0)
        assert report.pct_good == pytest.approx(75.0)

    def test_percentages_add_up(self):
        report = detection_metrics([0, 1, 1], [0, 0, 1], [nd(), classified(1), classified(0)])
        assert report.pct_correct + report.pct_nd + report.pct_bad == pytest.approx(100.0)

    def test_always_no_decision(self):
        report = detection_metrics([0, 1, 0, 1], [0, 1, 2, 0], [nd()] * 4)
        assert report.tnr == 100.0
        assert report.fnr == 100.0
        assert report.pct_nd == 100.0

    def test_never_no_decision(self):
        report = detection_metrics([0, 1, 0], [0, 1, 2], [classified(0), classified(1), classified(0)])
        assert report.tnr == 0.0
        assert report.fnr == 0.0

    def test_no_negatives(self):
        report = detection_metrics([0, 1], [0, 1], [classified(0), nd()])
        assert report.tnr is None
        assert report.fnr == pytest.approx(50.0)

    def test_misaligned(self):
        with pytest.raises(ValidationError):
            detection_metrics([0, 1], [0], [nd(), nd()])

    def test_empty(self):
        with pytest.raises(ValidationError):
            detection_metrics([], [], [])

    def test_table_prints_undefined_as_dash(self):
        report = detection_metrics([0, 1], [0, 1], [classified(0), classified(1)])
        text = format_table(detection_table({'RAC': report}))
        assert 'RAC' in text
        assert '-' in text
        assert '100.00' in text

    @pytest.mark.parametrize('seed', range(4))
    def test_rates_match_brute_force_counts(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(250):
            n = int(rng.integers(1, 40))
            c = int(rng.integers(2, 6))
            truths = rng.integers(0, c, size=n)
            baseline = np.where(rng.random(n) < 0.7, truths, rng.integers(0, c, size=n))
            outcomes = []
            for b in baseline:
                if rng.random() < 0.3:
                    outcomes.append(nd())
                else:
                    outcomes.append(classified(int(b) if rng.random() < 0.8 else int(rng.integers(c))))
            report = detection_metrics(baseline, truths, outcomes)

            assert report.pct_correct + report.pct_nd + report.pct_bad == pytest.approx(100.0)
            neg = [o.no_decision for o, b, t in zip(outcomes, baseline, truths) if b != t]
            pos = [o.no_decision for o, b, t in zip(outcomes, baseline, truths) if b == t]
            if neg:
                assert report.tnr == pytest.approx(100.0 * sum(neg) / len(neg))
            else:
                assert report.tnr is None
            if pos:
                assert report.fnr == pytest.approx(100.0 * sum(pos) / len(pos))
            else:
                assert report.fnr is None
            right = sum(o.classified and o.label == t for o, t in zip(outcomes, truths))
            assert report.correct == right


class TestMsr:
    """Test the maximal-softmax-response baseline."""

    def test_uniform_logits(self):
        assert msr_scores(np.zeros((2, 4))).tolist() == pytest.approx([0.25, 0.25])

    def test_single_input(self):
        assert msr_detect(np.zeros(4), 0.3) is True
        assert msr_detect(np.array([10.0, 0.0, 0.0, 0.0]), 0.3) is False

    def test_outcomes(self):
        outcomes = msr_outcomes(np.array([[5.0, 0.0], [0.0, 0.0]]), 0.6, flops=10)
        assert outcomes[0].classified and outcomes[0].label == 0
        assert outcomes[1].no_decision
        assert all(not o.early and o.flops_spent == 10 for o in outcomes)

    def test_threshold_hits_target(self, ranked_logits):
        threshold, fnr = msr_threshold_for_fnr(ranked_logits, np.ones(4, dtype=bool), 25.0)
        assert fnr == pytest.approx(25.0)
        assert msr_detect(ranked_logits, threshold).tolist() == [True, False, False, False]

    def test_zero_target(self, ranked_logits):
        threshold, fnr = msr_threshold_for_fnr(ranked_logits, np.ones(4, dtype=bool), 0.0)
        assert fnr == 0.0
        assert not msr_detect(ranked_logits, threshold).any()

    def test_full_target(self, ranked_logits):
        threshold, fnr = msr_threshold_for_fnr(ranked_logits, np.ones(4, dtype=bool), 100.0)
        assert fnr == pytest.approx(100.0)
        assert msr_detect(ranked_logits, threshold).all()

    def test_no_positives(self, ranked_logits):
        assert msr_threshold_for_fnr(ranked_logits, np.zeros(4, dtype=bool), 10.0) == (0.0, None)

    def test_comparison_matched(self, ranked_logits):
        rac = detection_metrics([0] * 4, [0] * 4, [nd()] + [classified(0)] * 3)
        result = msr_comparison(ranked_logits, np.zeros(4), 25.0, ranked_logits, np.zeros(4), rac, 1.4)
        assert result.comparable
        assert result.validation_fnr_gap == pytest.approx(0.0)
        assert result.msr.fnr == pytest.approx(25.0)
        assert result.to_dict()['rac_normalized_flops'] == 1.4

    def test_comparison_unmatched(self, ranked_logits):
        rac = detection_metrics([0] * 4, [0] * 4, [classified(0)] * 4)
        result = msr_comparison(ranked_logits, np.zeros(4), 10.0, ranked_logits, np.zeros(4), rac)
        assert not result.comparable
        assert result.validation_fnr_gap == pytest.approx(10.0)

    def test_fitted_threshold_is_the_comparison_threshold(self, ranked_logits):
        rac = detection_metrics([0] * 4, [0] * 4, [nd()] + [classified(0)] * 3)
        threshold, gap, comparable = fit_msr_threshold(ranked_logits, np.zeros(4), 25.0)
        result = msr_comparison(ranked_logits, np.zeros(4), 25.0, ranked_logits, np.zeros(4), rac)
        assert (threshold, gap, comparable) == (result.threshold, result.validation_fnr_gap, result.comparable)

    def test_adversarial_tnr(self, ranked_logits):
        threshold, _ = msr_threshold_for_fnr(ranked_logits, np.ones(4, dtype=bool), 25.0)
        assert msr_adversarial_tnr(ranked_logits, threshold) == pytest.approx(25.0)
        assert msr_adversarial_tnr(ranked_logits, 0.0) == 0.0
        assert msr_adversarial_tnr(ranked_logits, 1.5) == 100.0
        assert msr_adversarial_tnr(np.zeros((0, 2)), 0.5) is None


class TestOod:
    """Test out-of-distribution sources and evaluation."""

    def test_noise_sources(self):
        u = uniform_noise(5, (1, 8, 8), seed=1)
        g = gaussian_noise(5, (1, 8, 8), seed=1)
        assert u.shape == g.shape == (5, 1, 8, 8)
        assert u.min() >= 0.0 and u.max() <= 1.0
        assert g.min() >= 0.0 and g.max() <= 1.0
        assert np.array_equal(u, uniform_noise(5, (1, 8, 8), seed=1))

    def test_image_source(self, temp_dir):
        folder = temp_dir / 'images'
        folder.mkdir()
        for i in range(3):
            imageio.imwrite(folder / f'{i}.png', np.full((16, 16, 3), 60 * i, dtype=np.uint8))
        x = ood_inputs({'kind': 'images', 'path': str(folder)}, (1, 8, 8), n=2)
        assert x.shape == (2, 1, 8, 8)
        assert x[0].max() == pytest.approx(0.0)

    def test_dataset_source(self):
        source = {'kind': 'dataset', 'name': 'other', 'format': 'synthetic', 'val_fraction': 0.2,
                  'test_fraction': 0.2, 'synthetic': {'num_classes': 2, 'shape': [1, 8, 8], 'samples': 40}}
        assert ood_inputs(source, (1, 8, 8), n=5).shape == (5, 1, 8, 8)

    def test_dataset_source_shape_mismatch(self):
        source = {'kind': 'dataset', 'format': 'synthetic',
                  'synthetic': {'num_classes': 2, 'shape': [3, 8, 8], 'samples': 40}}
        with pytest.raises(ValidationError):
            ood_inputs(source, (1, 8, 8), n=5)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            ood_inputs({'kind': 'svhn'}, (1, 8, 8), n=5)

    def test_eval(self, rac_system):
        net, racs = rac_system
        report = ood_eval(net, racs, InferencePolicy((4, 7), 0.9), uniform_noise(20, (1, 8, 8)), 'uniform')
        assert report.samples == 20
        assert 0.0 <= report.tnr <= 100.0
        assert report.tnr == pytest.approx(100.0 * report.nd / 20)
        assert report.normalized_flops > 0

    def test_empty(self, rac_system):
        net, racs = rac_system
        with pytest.raises(ValidationError):
            ood_eval(net, racs, InferencePolicy((4, 7)), np.zeros((0, 1, 8, 8)))

    def test_wrong_shape(self, rac_system):
        net, racs = rac_system
        with pytest.raises(ShapeError):
            ood_eval(net, racs, InferencePolicy((4, 7)), np.zeros((3, 1, 6, 6)))


class TestAttack:
    """Test targeted L2 attacks."""

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            AttackConfig(mode='white_box')
        with pytest.raises(ValidationError):
            AttackConfig(target='furthest')
        with pytest.raises(ValidationError):
            AttackConfig(mode='full_knowledge', rac_loss_weight=0.0)

    def test_targets(self):
        logits = np.array([[0.0, 1.0, 2.0], [3.0, 1.0, 2.0], [1.0, 0.0, 2.0]])
        labels = np.array([0, 1, 2])
        assert choose_targets(logits, labels, 'next').tolist() == [1, 2, 0]
        assert choose_targets(logits, labels, 'least_likely').tolist() == [0, 1, 1]
        random = choose_targets(np.zeros((200, 3)), np.zeros(200, dtype=int), 'random', seed=2)
        assert (random != 0).all()
        assert set(random.tolist()) == {1, 2}

    def test_zero_iterations(self, tiny_net, toy_data):
        _, report = generate_adversarial(tiny_net, toy_data.subset(np.arange(30)), AttackConfig(max_iterations=0))
        assert report.successes == 0
        assert report.success_rate == 0.0
        assert report.mean_l2 is None

    def test_attack_flips_untrained_network(self, tiny_net, toy_data):
        cfg = AttackConfig(max_iterations=50, learning_rate=0.05, const_steps=3, batch_size=8)
        adv, report = generate_adversarial(tiny_net, toy_data.subset(np.arange(30)), cfg)
        assert report.attempted > 0
        assert report.successes > 0
        assert report.successes == len(adv.inputs)
        assert (adv.l2 > 0).all()
        assert (adv.targets != adv.labels).all()
        assert adv.inputs.min() >= 0.0 and adv.inputs.max() <= 1.0

    def test_full_knowledge_needs_racs(self, tiny_net, toy_data):
        with pytest.raises(ValidationError):
            generate_adversarial(tiny_net, toy_data, AttackConfig(mode='full_knowledge'))

    def test_zero_knowledge_msr_adversarial_tnr(self, tiny_net, toy_data):
        cfg = AttackConfig(max_iterations=50, learning_rate=0.05, const_steps=3, batch_size=8)
        data = toy_data.subset(np.arange(30))
        adv, never = generate_adversarial(tiny_net, data, cfg, msr_threshold=0.0)
        _, always = generate_adversarial(tiny_net, data, cfg, msr_threshold=1.5)
        _, unset = generate_adversarial(tiny_net, data, cfg)
        assert never.successes > 0
        assert never.msr_adversarial_tnr == 0.0
        assert always.msr_adversarial_tnr == 100.0
        assert unset.msr_adversarial_tnr is None
        assert len(adv.inputs) == never.successes

    def test_full_knowledge_runs_rac_system(self, rac_system, toy_data):
        net, racs = rac_system
        cfg = AttackConfig(mode='full_knowledge', max_iterations=20, learning_rate=0.05, const_steps=2)
        _, report = generate_adversarial(net, toy_data.subset(np.arange(12)), cfg, racs, InferencePolicy((4, 7)))
        assert report.mode == 'full_knowledge'
        if report.successes:
            assert 0.0 <= report.adv_tnr <= 100.0
        else:
            assert report.adv_tnr is None

    def test_rac_loss_gradient(self):
        rng = np.random.default_rng(0)
        rac = make_rac(c=3, k=2, tap_shape=(6, 4, 4))
        for blc in rac.blcs:
            blc.weight = rng.normal(scale=0.3, size=blc.weight.shape)
            blc.bias = float(rng.normal())
        rac.features.indices[:] = np.array([[0, 3], [1, 5], [3, 2]])
        loss_fn = RacBceLoss([rac], targets=np.array([1, 2]), weight=0.7)
        tap = rng.uniform(size=(2, 6, 4, 4))
        logits = np.zeros((2, 3))
        _, dlogits, dtaps = loss_fn(logits, {4: tap})
        assert np.array_equal(dlogits, np.zeros((2, 3)))
        h = 1e-6
        for pos in [(0, 0, 1, 1), (1, 5, 2, 3), (0, 3, 0, 0), (1, 4, 1, 1)]:
            plus, minus = tap.copy(), tap.copy()
            plus[pos] += h
            minus[pos] -= h
            numeric = (loss_fn(logits, {4: plus})[0].sum() - loss_fn(logits, {4: minus})[0].sum()) / (2 * h)
            assert dtaps[4][pos] == pytest.approx(numeric, rel=1e-4, abs=1e-8)

    def test_compare_attacks(self):
        zero = AdversarialReport('zero_knowledge', 10, 9, 90.0, 0.8)
        full = AdversarialReport('full_knowledge', 10, 6, 60.0, 1.3)
        summary = compare_attacks(zero, full)
        assert summary['full_knowledge_needs_more_distortion'] is True
        none = AdversarialReport('full_knowledge', 10, 0, 0.0, None)
        assert compare_attacks(zero, none)['full_knowledge_needs_more_distortion'] is None
