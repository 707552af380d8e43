import numpy as np
import pytest

from fairmeta import metrics
from fairmeta import network as net

from conftest import assert_grad_close, central_diff, random_problem


def brute_force_md(values, groups):
    pos = [v for v, g in zip(values, groups) if g]
    neg = [v for v, g in zip(values, groups) if not g]
    return abs(sum(pos) / len(pos) - sum(neg) / len(neg))


def brute_force_auc(values, groups):
    pos = [v for v, g in zip(values, groups) if g]
    neg = [v for v, g in zip(values, groups) if not g]
    score = 0.0
    for a in pos:
        for b in neg:
            score += 1.0 if a > b else (0.5 if a == b else 0.0)
    return score / (len(pos) * len(neg))


def brute_force_ir(values, groups):
    pos = [v for v, g in zip(values, groups) if g]
    neg = [v for v, g in zip(values, groups) if not g]
    return (sum(pos) / len(pos)) / (sum(neg) / len(neg))


def random_sample(rng):
    n = int(rng.integers(2, 51))
    values = np.round(rng.normal(size=n), 2)  # rounding provokes ties
    groups = np.zeros(n, dtype=int)
    groups[rng.permutation(n)[: int(rng.integers(1, n))]] = 1
    return values, groups


class TestMeanDifference:
    def test_hand_example(self):
        values = [1.0, 2.0, 3.0, 2.0, 4.0]
        groups = [1, 1, 1, 0, 0]
        assert metrics.mean_difference(values, groups) == 1.0

    def test_equal_means(self):
        assert metrics.mean_difference([1.0, 3.0, 2.0], [1, 1, 0]) == 0.0

    def test_singletons(self):
        assert metrics.mean_difference([0.0, 5.0], [1, 0]) == 5.0

    def test_empty_group_named(self):
        with pytest.raises(ValueError, match="protected group is empty"):
            metrics.mean_difference([1.0, 2.0], [0, 0])
        with pytest.raises(ValueError, match="unprotected group is empty"):
            metrics.mean_difference([1.0, 2.0], [1, 1])

    def test_label_swap_and_permutation_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            values, groups = random_sample(rng)
            md = metrics.mean_difference(values, groups)
            assert metrics.mean_difference(values, 1 - groups) == md
            perm = rng.permutation(values.size)
            assert metrics.mean_difference(values[perm], groups[perm]) == pytest.approx(
                md, abs=1e-12
            )


class TestAuc:
    def test_dominating_pair(self):
        assert metrics.auc([2.0, 1.0], [1, 0]) == 1.0

    def test_dominated_pair(self):
        assert metrics.auc([1.0, 2.0], [1, 0]) == 0.0

    def test_identical_multisets(self):
        values = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
        groups = [1, 1, 1, 0, 0, 0]
        assert metrics.auc(values, groups) == 0.5

    def test_matches_brute_force_bit_for_bit(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            values, groups = random_sample(rng)
            assert metrics.auc(values, groups) == brute_force_auc(values, groups)

    def test_label_swap_complements(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            values, groups = random_sample(rng)
            assert metrics.auc(values, 1 - groups) == pytest.approx(
                1.0 - metrics.auc(values, groups), abs=1e-15
            )


class TestImpactRatio:
    def test_hand_examples(self):
        assert metrics.impact_ratio([4.0, 5.0], [1, 0]) == 0.8
        assert metrics.impact_ratio([3.0, 3.0], [1, 0]) == 1.0
        assert metrics.impact_ratio([2.0, 1.0], [1, 0]) == 2.0

    def test_nonpositive_unprotected_mean_rejected(self):
        with pytest.raises(ValueError, match="must be > 0"):
            metrics.impact_ratio([1.0, 0.0], [1, 0])
        with pytest.raises(ValueError, match="must be > 0"):
            metrics.impact_ratio([1.0, -2.0], [1, 0])

    def test_unity_iff_zero_mean_difference(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            values, groups = random_sample(rng)
            values = values - values.min() + 1.0  # both means positive
            ir = metrics.impact_ratio(values, groups)
            md = metrics.mean_difference(values, groups)
            assert (abs(ir - 1.0) < 1e-12) == (md < 1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            values, groups = random_sample(rng)
            values = values - values.min() + 1.0
            assert metrics.impact_ratio(values, groups) == pytest.approx(
                brute_force_ir(values, groups), abs=1e-12
            )


class TestEightyPercentFlag:
    def test_below_threshold(self):
        assert metrics.eighty_percent_flag(0.79) is True

    def test_parity(self):
        assert metrics.eighty_percent_flag(1.0) is False

    def test_reciprocal_side(self):
        assert metrics.eighty_percent_flag(1.3) is True  # 1/1.3 < 0.8
        assert metrics.eighty_percent_flag(1.2) is False

    def test_one_sided_mode(self):
        assert metrics.eighty_percent_flag(1.3, two_sided=False) is False
        assert metrics.eighty_percent_flag(0.5, two_sided=False) is True

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            metrics.eighty_percent_flag(0.0)

    def test_parity_ir(self):
        assert metrics.parity_ir([4.0, 5.0], [1, 0]) == 0.8
        assert metrics.parity_ir([5.0, 4.0], [1, 0]) == 0.8


class TestPredictionMd:
    def test_zero_params_zero_md(self):
        params, X, _, s = random_problem(10)
        zero = params.with_flat(np.zeros(params.dim))
        assert metrics.prediction_md(zero, X, s) == 0.0

    def test_reduces_to_mean_difference(self):
        # identity-on-positives net reproduces the hand mean_difference example
        config = net.NetConfig(1, (1, 1))
        params = net.MLPParams.zeros(config)
        params.w1[...] = params.w2[...] = params.w3[...] = 1.0
        X = np.array([[1.0], [2.0], [3.0], [2.0], [4.0]])
        s = [1, 1, 1, 0, 0]
        assert metrics.prediction_md(params, X, s) == 1.0

    def test_constant_network_invariance(self):
        params, X, _, s = random_problem(12)
        constant = params.copy()
        constant.w3[...] = 0.0
        constant.b3[...] = 3.7
        assert metrics.prediction_md(constant, X, s) == 0.0

    def test_gradient_matches_finite_differences(self):
        for seed in range(5):
            params, X, _, s = random_problem(40 + seed)
            objective = metrics.prediction_md_objective(X, s)
            analytic = net.grad(objective, params)
            fd = central_diff(
                lambda v: metrics.prediction_md(params.with_flat(v), X, s),
                params.flat(),
            )
            assert_grad_close(analytic, fd)

    def test_single_group_batch_rejected(self):
        params, X, _, _ = random_problem(13)
        with pytest.raises(ValueError, match="unprotected group is empty"):
            metrics.prediction_md(params, X, np.ones(X.shape[0]))

    def test_graph_value_matches(self):
        params, X, _, s = random_problem(14)
        node = metrics.md_from_predictions_graph(
            net.forward_graph(params.as_nodes(), X), s
        )
        assert node.item() == metrics.prediction_md(params, X, s)

    def test_md_matches_brute_force(self):
        rng = np.random.default_rng(15)
        for _ in range(100):
            values, groups = random_sample(rng)
            assert metrics.mean_difference(values, groups) == pytest.approx(
                brute_force_md(values, groups), abs=1e-12
            )
