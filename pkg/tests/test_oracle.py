"""Black-box boundary tests: margin values, defense noising, query accounting."""

import math

import numpy as np
import pytest

from bbarena.netmod import MlpModel
from bbarena.numkit import RngStream, Vector
from bbarena.oracle import (
    AttackChannel,
    BudgetExhausted,
    DefensePolicy,
    MarginOracle,
    OutputSpace,
    QueryLedger,
    eot_query,
    margin,
    observed_success,
    query,
    query_batch,
)


def fixed_logit_model(logits):
    """Zero-weight model whose biases pin the logits for every input."""
    logits = np.asarray(logits, dtype=np.float64)
    k = len(logits)
    return MlpModel((2, k), [np.zeros((2, k))], [logits.copy()])


def linear_margin_model(c, offset):
    """Two-class model with margin(x) = c.x + offset for label 0."""
    c = np.asarray(c, dtype=np.float64)
    w = np.zeros((len(c), 2))
    w[:, 0] = c
    return MlpModel((len(c), 2), [w], [np.array([offset, 0.0])])


class TestMargin:
    def test_direct_substitution(self):
        oracle = MarginOracle(fixed_logit_model([2.0, 5.0, 1.0]), true_label=1)
        assert margin(oracle, Vector([0.0, 0.0])) == pytest.approx(3.0)

    def test_lowest_logit_gives_negative_margin(self):
        oracle = MarginOracle(fixed_logit_model([0.0, 4.0, 4.0]), true_label=0)
        assert margin(oracle, Vector([0.0, 0.0])) == pytest.approx(-4.0)

    def test_matches_forward_recomputation(self):
        from bbarena.netmod import forward, init_model

        model = init_model([5, 6, 3], seed=17)
        rng = RngStream(18, 0)
        for _ in range(20):
            x = Vector(rng.uniform(size=5))
            y = int(rng.integers(0, 3))
            logits = forward(model, x)
            rest = np.delete(logits, y)
            expected = logits[y] - rest.max()
            assert abs(margin(MarginOracle(model, y), x) - expected) < 1e-12

    def test_linear_model_margin(self):
        c = np.array([1.0, -2.0, 0.5])
        oracle = MarginOracle(linear_margin_model(c, 0.25), true_label=0)
        x = Vector([0.2, 0.1, 0.4])
        assert margin(oracle, x) == pytest.approx(c @ x.values + 0.25)

    def test_targeted_margin_sign_convention(self):
        oracle = MarginOracle(
            fixed_logit_model([2.0, 5.0, 1.0]), true_label=1, target_label=0
        )
        # target class must dominate for a negative value
        assert margin(oracle, Vector([0.0, 0.0])) == pytest.approx(5.0 - 2.0)

    def test_softmax_output_space(self):
        oracle = MarginOracle(
            fixed_logit_model([0.0, 1.0]), true_label=1, output_space=OutputSpace.SOFTMAX
        )
        p1 = 1.0 / (1.0 + math.exp(-1.0))
        assert margin(oracle, Vector([0.0, 0.0])) == pytest.approx(p1 - (1 - p1))

    def test_dimension_check(self):
        oracle = MarginOracle(fixed_logit_model([1.0, 2.0]), true_label=0)
        with pytest.raises(ValueError):
            margin(oracle, Vector([0.0, 0.0, 0.0]))

    def test_label_range_check(self):
        with pytest.raises(ValueError):
            MarginOracle(fixed_logit_model([1.0, 2.0]), true_label=2)


class TestDefendedQuery:
    def test_nu_zero_equals_margin_exactly(self):
        oracle = MarginOracle(linear_margin_model([1.0, 2.0], 0.1), 0)
        defense = DefensePolicy(0.0, RngStream(1, 0))
        ledger = QueryLedger(10)
        x = Vector([0.3, 0.4])
        assert query(oracle, defense, ledger, x) == margin(oracle, x)

    def test_fresh_noise_every_call(self):
        oracle = MarginOracle(linear_margin_model([1.0, 2.0], 0.1), 0)
        defense = DefensePolicy(0.05, RngStream(1, 0))
        ledger = QueryLedger(3000)
        x = Vector([0.3, 0.4])
        values = [query(oracle, defense, ledger, x) for _ in range(1000)]
        pairs = list(zip(values, values[1:]))
        assert all(a != b for a, b in pairs)

    def test_count_increments_by_one_per_query(self):
        oracle = MarginOracle(linear_margin_model([1.0, 2.0], 0.1), 0)
        defense = DefensePolicy(0.0, RngStream(1, 0))
        ledger = QueryLedger(10)
        x = Vector([0.3, 0.4])
        for _ in range(3):
            query(oracle, defense, ledger, x)
        assert ledger.count == 3

    def test_linear_pushforward_moments(self):
        # affine margin + Gaussian input noise => N(f(x), nu^2 ||c||^2)
        c = np.array([0.6, -0.8, 0.2, 0.4])
        nu = 0.05
        oracle = MarginOracle(linear_margin_model(c, 0.3), 0)
        defense = DefensePolicy(nu, RngStream(77, 0))
        n = 100_000
        ledger = QueryLedger(n)
        x = np.full((n, 4), 0.5)
        values = query_batch(oracle, defense, ledger, x)
        mean_true = float(c @ x[0] + 0.3)
        sd_true = nu * float(np.linalg.norm(c))
        assert abs(values.mean() - mean_true) < 3 * sd_true / math.sqrt(n)
        assert abs(values.std(ddof=1) - sd_true) < 3 * sd_true / math.sqrt(2 * n)

    def test_batch_equals_sequential_queries(self):
        oracle = MarginOracle(linear_margin_model([1.0, -1.0, 0.5], 0.2), 0)
        xs = RngStream(3, 0).uniform(size=(6, 3))
        batch = query_batch(
            oracle, DefensePolicy(0.1, RngStream(9, 4)), QueryLedger(100), xs
        )
        defense = DefensePolicy(0.1, RngStream(9, 4))
        ledger = QueryLedger(100)
        seq = [query(oracle, defense, ledger, Vector(row)) for row in xs]
        assert np.array_equal(batch, np.array(seq))

    def test_budget_exhaustion(self):
        oracle = MarginOracle(linear_margin_model([1.0], 0.0), 0)
        defense = DefensePolicy(0.0, RngStream(1, 0))
        ledger = QueryLedger(2)
        x = Vector([0.5])
        query(oracle, defense, ledger, x)
        query(oracle, defense, ledger, x)
        with pytest.raises(BudgetExhausted):
            query(oracle, defense, ledger, x)
        assert ledger.count == 2

    def test_history_log(self):
        oracle = MarginOracle(linear_margin_model([1.0, 2.0], 0.1), 0)
        defense = DefensePolicy(0.0, RngStream(1, 0))
        ledger = QueryLedger(10, history=[])
        x = Vector([0.3, 0.4])
        v1 = query(oracle, defense, ledger, x)
        v2 = query(oracle, defense, ledger, x)
        assert ledger.history == [(1, v1), (2, v2)]


class TestEotQuery:
    def test_m1_matches_query_distributionally(self):
        oracle = MarginOracle(linear_margin_model([1.0, 1.0], 0.0), 0)
        a = eot_query(
            oracle, DefensePolicy(0.1, RngStream(5, 1)), QueryLedger(10), Vector([0.5, 0.5]), 1
        )
        b = query(
            oracle, DefensePolicy(0.1, RngStream(5, 1)), QueryLedger(10), Vector([0.5, 0.5])
        )
        assert a == b  # same stream, same draw

    def test_ledger_charged_m(self):
        oracle = MarginOracle(linear_margin_model([1.0, 1.0], 0.0), 0)
        ledger = QueryLedger(50)
        eot_query(oracle, DefensePolicy(0.1, RngStream(5, 1)), ledger, Vector([0.5, 0.5]), 7)
        assert ledger.count == 7

    def test_variance_shrinks_like_one_over_m(self):
        c = np.array([1.0, -0.5])
        nu, m, trials = 0.1, 8, 10_000
        oracle = MarginOracle(linear_margin_model(c, 0.0), 0)
        defense = DefensePolicy(nu, RngStream(31, 0))
        ledger = QueryLedger(trials * m)
        x = np.full((trials, 2), 0.5)
        from bbarena.oracle import eot_query_batch

        values = eot_query_batch(oracle, defense, ledger, x, m)
        var_single = (nu * np.linalg.norm(c)) ** 2
        expected = var_single / m
        se = expected * math.sqrt(2.0 / trials)
        assert abs(values.var(ddof=1) - expected) < 3 * se

    def test_insufficient_budget_leaves_ledger_untouched(self):
        oracle = MarginOracle(linear_margin_model([1.0, 1.0], 0.0), 0)
        ledger = QueryLedger(5)
        with pytest.raises(BudgetExhausted):
            eot_query(
                oracle, DefensePolicy(0.1, RngStream(5, 1)), ledger, Vector([0.5, 0.5]), 6
            )
        assert ledger.count == 0


class TestObservedSuccess:
    def test_noiseless_negative(self):
        oracle = MarginOracle(fixed_logit_model([0.0, 0.5]), true_label=0)
        defense = DefensePolicy(0.0, RngStream(1, 0))
        assert observed_success(oracle, defense, QueryLedger(5), Vector([0.0, 0.0]))

    def test_noiseless_positive(self):
        oracle = MarginOracle(fixed_logit_model([0.5, 0.0]), true_label=0)
        defense = DefensePolicy(0.0, RngStream(1, 0))
        assert not observed_success(oracle, defense, QueryLedger(5), Vector([0.0, 0.0]))

    def test_zero_margin_flips_half_the_time(self):
        c = np.array([1.0, 1.0])
        oracle = MarginOracle(linear_margin_model(c, -1.0), 0)  # f(0.5, 0.5) = 0
        defense = DefensePolicy(0.05, RngStream(13, 0))
        n = 10_000
        ledger = QueryLedger(n)
        x = Vector([0.5, 0.5])
        hits = sum(observed_success(oracle, defense, ledger, x) for _ in range(n))
        assert abs(hits / n - 0.5) < 3 * math.sqrt(0.25 / n)


class TestChannelIsolation:
    def test_channel_exposes_no_exact_margin(self):
        oracle = MarginOracle(linear_margin_model([1.0, 1.0], 0.0), 0)
        channel = AttackChannel(oracle, DefensePolicy(0.1, RngStream(1, 0)), QueryLedger(5))
        assert not hasattr(channel, "margin")
        assert not any("margin" in name for name in vars(channel) if not name.startswith("_"))

    def test_attacks_module_never_imports_margin(self):
        import inspect

        import bbarena.attacks as attacks

        source = inspect.getsource(attacks)
        assert "margin(" not in source
        assert "MarginOracle" not in source

    def test_defense_requires_nonnegative_nu(self):
        with pytest.raises(ValueError):
            DefensePolicy(-0.1, RngStream(1, 0))
