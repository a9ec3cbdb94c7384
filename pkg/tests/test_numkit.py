"""Numeric kernel tests: stream determinism, Gaussian moments, projections."""

import math

import numpy as np
import pytest

from bbarena.numkit import (
    Norm,
    NormBall,
    RngStream,
    Vector,
    clamp01,
    feasible,
    norm,
    project,
    sample_gaussian,
)


class TestRngStream:
    def test_same_stream_same_sequence(self):
        a = RngStream(42, 5)
        b = RngStream(42, 5)
        assert np.array_equal(a.normal(16), b.normal(16))

    def test_counter_advances_by_scalars_drawn(self):
        r = RngStream(1, 0)
        r.normal(7)
        r.normal((3, 4))
        r.uniform(size=5)
        assert r.counter == 7 + 12 + 5

    def test_distinct_streams_differ(self):
        a = RngStream(42, 1).normal(64)
        b = RngStream(42, 2).normal(64)
        assert not np.allclose(a, b)

    def test_child_derivation_reproducible(self):
        a = RngStream(9, 3).child(17).normal(8)
        b = RngStream(9, 3).child(17).normal(8)
        assert np.array_equal(a, b)

    def test_children_with_distinct_keys_differ(self):
        base = RngStream(9, 3)
        assert not np.allclose(base.child(1).normal(8), base.child(2).normal(8))

    def test_batched_draws_match_sequential(self):
        # batched query noising relies on row-major stream equivalence
        big = RngStream(7, 1).normal((5, 11))
        r = RngStream(7, 1)
        seq = np.stack([r.normal(11) for _ in range(5)])
        assert np.array_equal(big, seq)

    def test_cross_stream_independence(self):
        n = 100_000
        a = RngStream(1234, 1).normal(n)
        b = RngStream(1234, 2).normal(n)
        corr = float(np.corrcoef(a, b)[0, 1])
        assert abs(corr) < 4.0 / math.sqrt(n)

    def test_gaussian_moments(self):
        # mean within 3 sigma = 3/sqrt(n) and variance within (0.99, 1.01)
        d, n = 10, 100_000
        draws = RngStream(2024, 0).normal((n, d))
        assert np.all(np.abs(draws.mean(axis=0)) < 3.0 / math.sqrt(n))
        var = draws.var(axis=0, ddof=1)
        assert np.all(var > 0.99) and np.all(var < 1.01)


class TestVector:
    def test_dimension_required(self):
        with pytest.raises(ValueError):
            Vector(np.array([]))

    def test_shape_product_must_match(self):
        Vector(np.zeros(12), shape=(2, 2, 3))
        with pytest.raises(ValueError):
            Vector(np.zeros(12), shape=(2, 2, 2))

    def test_values_read_only(self):
        v = Vector(np.zeros(4))
        with pytest.raises(ValueError):
            v.values[0] = 1.0

    def test_sample_gaussian_returns_d_draws(self):
        v = sample_gaussian(RngStream(3, 0), 6)
        assert v.d == 6
        with pytest.raises(ValueError):
            sample_gaussian(RngStream(3, 0), 0)


class TestNorms:
    def test_l2(self):
        assert norm(Vector([3.0, 4.0]), Norm.L2) == pytest.approx(5.0)

    def test_linf(self):
        assert norm(Vector([3.0, -4.0]), Norm.LINF) == pytest.approx(4.0)

    def test_zero_vector(self):
        z = Vector(np.zeros(5))
        assert norm(z, Norm.L2) == 0.0
        assert norm(z, Norm.LINF) == 0.0


class TestProjection:
    def test_linf_coordinate_clamp(self):
        ball = NormBall(Vector([0.5, 0.5]), 0.05, Norm.LINF)
        out = project(ball, Vector([1.0, 0.48]))
        assert np.allclose(out.values, [0.55, 0.48])

    def test_l2_radial_scaling(self):
        ball = NormBall(Vector([0.0, 0.0]), 1.0, Norm.L2)
        out = project(ball, Vector([3.0, 4.0]))
        assert np.allclose(out.values, [0.6, 0.8])

    def test_inside_point_unchanged(self):
        ball = NormBall(Vector([0.0, 0.0]), 1.0, Norm.L2)
        x = Vector([0.1, -0.2])
        assert np.array_equal(project(ball, x).values, x.values)

    def test_center_point_is_fixed(self):
        ball = NormBall(Vector([0.3, 0.3, 0.3]), 0.5, Norm.L2)
        out = project(ball, Vector([0.3, 0.3, 0.3]))
        assert np.array_equal(out.values, ball.center.values)

    def test_dimension_mismatch_rejected(self):
        ball = NormBall(Vector([0.0, 0.0]), 1.0, Norm.L2)
        with pytest.raises(ValueError):
            project(ball, Vector([1.0, 2.0, 3.0]))

    @pytest.mark.parametrize("kind", [Norm.L2, Norm.LINF])
    def test_idempotence_and_membership(self, kind):
        rng = RngStream(11, 0)
        center = Vector(rng.uniform(size=16))
        ball = NormBall(center, 0.3, kind)
        for _ in range(50):
            x = Vector(center.values + rng.normal(16))
            once = project(ball, x)
            twice = project(ball, once)
            assert np.max(np.abs(twice.values - once.values)) < 1e-12
            assert norm(Vector(once.values - center.values), kind) <= 0.3 + 1e-9

    def test_radius_must_be_positive(self):
        with pytest.raises(ValueError):
            NormBall(Vector([0.0]), 0.0, Norm.L2)


class TestClamp:
    def test_basic(self):
        out = clamp01(Vector([-0.2, 0.5, 1.3]))
        assert np.allclose(out.values, [0.0, 0.5, 1.0])

    def test_in_range_unchanged(self):
        x = Vector([0.0, 0.25, 1.0])
        assert np.array_equal(clamp01(x).values, x.values)

    def test_idempotent(self):
        rng = RngStream(5, 0)
        for _ in range(20):
            x = Vector(rng.normal(8) * 2)
            once = clamp01(x)
            assert np.array_equal(clamp01(once).values, once.values)

    def test_feasible_pipeline_stays_in_ball_and_box(self):
        rng = RngStream(6, 0)
        center = Vector(rng.uniform(0.2, 0.8, size=12))
        for kind in (Norm.L2, Norm.LINF):
            ball = NormBall(center, 0.15, kind)
            for _ in range(50):
                x = Vector(center.values + rng.normal(12))
                out = feasible(ball, x)
                assert norm(Vector(out.values - center.values), kind) <= 0.15 + 1e-9
                assert out.values.min() >= 0.0 and out.values.max() <= 1.0
