"""
Tests for the scaling analysis

This script tests grid box counts, log-log exponent fits, the subadditivity
audit, the duration and position snapping operators and the loop-matching
diagnostic.
"""

import math
import unittest

import numpy as np

from brownian_loop_soup import loop_records
from errors import (
    InsufficientScalesError,
    NonPositiveValuesError,
    PreconditionError,
    SchemaMismatchError,
)
from scaling_analysis import (
    BallTarget,
    SegmentSetTarget,
    box_dimension,
    delta_ladder,
    fit_exponent,
    greedy_match,
    grid_counts,
    positions_at,
    psi1_snap,
    psi2_snap,
    rescale_and_match,
    rescale_discrete_path,
    rescaled_lattice_loops,
    subadditivity_audit,
)


def _axis_segment_count(a, b, delta):
    return math.floor((b + delta) / (2 * delta)) - math.ceil((a - delta) / (2 * delta)) + 1


def _rooted_record(vertices, loop_id, N):
    vertices = np.asarray(vertices, dtype=np.int64)
    n = vertices.shape[0] - 1
    return {"schema_version": 1, "layer": "rooted", "N": N, "loop_id": loop_id, "root": vertices[0].tolist(),
            "duration": float(n), "vertices": vertices.tolist(), "jump_times": np.arange(1, n + 1).tolist()}


def _walk_there_and_back(gen, steps):
    moves = np.zeros((steps, 3), dtype=np.int64)
    axes = gen.integers(0, 3, steps)
    moves[np.arange(steps), axes] = gen.choice([-1, 1], steps)
    out = np.vstack([np.zeros((1, 3), dtype=np.int64), np.cumsum(moves, axis=0)])
    return np.vstack([out, out[-2::-1]])


class TestGridCounts(unittest.TestCase):
    """Test box counting on calibration targets"""

    def setUp(self):
        """Set up test environment"""
        self.center = (0.0, 0.0, 0.0)

    def test_window_ball_target(self):
        """Test that the window ball meets every window box"""
        count = grid_counts(BallTarget(self.center, 1.0), 1.0 / 64, self.center, 1.0)
        self.assertEqual(count.psi_count, count.phi_count)
        expected = 4.0 / 3.0 * math.pi * 32 ** 3
        self.assertLess(count.phi_count, 8 * expected)
        self.assertGreater(count.phi_count, expected / 8)

    def test_single_point(self):
        """Test that a point meets between 1 and 8 closed boxes"""
        delta = 0.125
        self.assertEqual(grid_counts(SegmentSetTarget.from_points([0, 0, 0]), delta, self.center, 1.0).psi_count, 1)
        self.assertEqual(grid_counts(SegmentSetTarget.from_points([delta, delta, delta]), delta, self.center, 1.0).psi_count, 8)
        gen = np.random.default_rng(0)
        for point in gen.uniform(-0.5, 0.5, size=(20, 3)):
            psi = grid_counts(SegmentSetTarget.from_points(point), delta, self.center, 1.0).psi_count
            self.assertIn(psi, range(1, 9))

    def test_axis_segment(self):
        """Test an axis segment against the exact count and its slope"""
        target = SegmentSetTarget.segment([-0.5, 0, 0], [0.5, 0, 0])
        counts = []
        for delta in delta_ladder(1.0, 4):
            count = grid_counts(target, delta, self.center, 1.0)
            self.assertEqual(count.psi_count, _axis_segment_count(-0.5, 0.5, delta))
            self.assertLessEqual(count.psi_count, count.phi_count)
            counts.append(count)
        self.assertAlmostEqual(box_dimension(counts).slope, 1.0, delta=0.1)

    def test_target_clipped_to_window(self):
        """Test that only the part of the target inside the window counts"""
        inside = grid_counts(SegmentSetTarget.segment([-0.5, 0, 0], [0.5, 0, 0]), 1.0 / 256, self.center, 1.0)
        longer = grid_counts(SegmentSetTarget.segment([-0.5, 0, 0], [3.0, 0, 0]), 1.0 / 256, self.center, 1.0)
        self.assertEqual(longer.psi_count, _axis_segment_count(-0.5, 1.0, 1.0 / 256))
        self.assertGreater(longer.psi_count, inside.psi_count)
        outside = grid_counts(SegmentSetTarget.from_points([2.0, 0, 0]), 1.0 / 256, self.center, 1.0)
        self.assertEqual(outside.psi_count, 0)

    def test_refinement_monotone(self):
        """Test that halving delta never decreases the count of a closed target"""
        gen = np.random.default_rng(1)
        polyline = np.cumsum(gen.normal(scale=0.05, size=(200, 3)), axis=0)
        target = SegmentSetTarget.from_polyline(polyline)
        previous = 0
        for delta in delta_ladder(1.0, 4, coarsest=1.0 / 16):
            psi = grid_counts(target, delta, self.center, 1.0).psi_count
            self.assertGreaterEqual(psi, previous)
            previous = psi

    def test_ball_dimension(self):
        """Test that a solid ball has slope 3"""
        counts = [grid_counts(BallTarget(self.center, 1.0), delta, self.center, 1.0) for delta in delta_ladder(1.0, 4)]
        fit = box_dimension(counts)
        self.assertAlmostEqual(fit.slope, 3.0, delta=0.05)
        self.assertEqual(fit.label, "upper box-counting dimension proxy")

    def test_insufficient_scales(self):
        """Test that fewer than four grid scales are rejected"""
        counts = [grid_counts(BallTarget(self.center, 1.0), delta, self.center, 1.0) for delta in (0.1, 0.05, 0.025)]
        with self.assertRaises(InsufficientScalesError):
            box_dimension(counts)

    def test_invalid_window(self):
        """Test that an empty window is rejected"""
        with self.assertRaises(PreconditionError):
            grid_counts(BallTarget(self.center, 1.0), 0.1, self.center, 0.0)


class TestFitExponent(unittest.TestCase):
    """Test log-log fits"""

    def setUp(self):
        """Set up test environment"""
        self.scales = np.array([8.0, 16.0, 32.0, 64.0])

    def test_identity_and_constant(self):
        """Test exact power laws"""
        fit = fit_exponent(self.scales, self.scales)
        self.assertAlmostEqual(fit.slope, 1.0, places=12)
        self.assertLess(fit.max_residual, 1e-12)
        self.assertAlmostEqual(fit_exponent(self.scales, np.full(4, 0.3)).slope, 0.0, places=12)

    def test_noisy_power_law(self):
        """Test a power law with one percent noise and its errors"""
        gen = np.random.default_rng(2)
        values = 2.0 * self.scales ** -0.5 * (1 + 0.01 * gen.standard_normal(4))
        fit = fit_exponent(self.scales, values, errors=0.01 * values)
        self.assertAlmostEqual(fit.slope, -0.5, delta=0.02)
        self.assertLessEqual(fit.ci_lo, fit.slope)
        self.assertGreaterEqual(fit.ci_hi, fit.slope)

    def test_refit_reproduces_slope(self):
        """Test that refitting the stored data reproduces the slope exactly"""
        values = [0.5, 0.3, 0.2, 0.11]
        fit = fit_exponent(self.scales, values, errors=[0.01, 0.01, 0.02, 0.01])
        again = fit_exponent(fit.scales, fit.values, errors=fit.errors)
        self.assertEqual(fit.slope, again.slope)
        self.assertEqual(fit.ci_lo, again.ci_lo)

    def test_scale_equivariance(self):
        """Test that multiplying the values moves only the intercept"""
        values = np.array([0.5, 0.3, 0.2, 0.11])
        a = fit_exponent(self.scales, values)
        b = fit_exponent(self.scales, 7.0 * values)
        self.assertAlmostEqual(a.slope, b.slope, places=12)
        self.assertAlmostEqual(b.intercept - a.intercept, math.log(7.0), places=12)

    def test_replica_bootstrap(self):
        """Test the bootstrap over replica-level samples"""
        gen = np.random.default_rng(3)
        samples = [gen.random(2000) < 4.0 / s for s in self.scales]
        means = [obs.mean() for obs in samples]
        fit = fit_exponent(self.scales, means, samples=samples, n_boot=200)
        self.assertEqual(fit.replicas, (2000,) * 4)
        self.assertLess(fit.ci_lo, fit.slope)
        self.assertGreater(fit.ci_hi, fit.slope)
        self.assertAlmostEqual(fit.slope, -1.0, delta=0.15)

    def test_errors(self):
        """Test nonpositive values and too few scales"""
        with self.assertRaises(NonPositiveValuesError):
            fit_exponent(self.scales, [1.0, 0.0, 0.5, 0.2])
        with self.assertRaises(InsufficientScalesError):
            fit_exponent([1.0, 2.0], [1.0, 2.0])

    def test_record_fields(self):
        """Test the JSON form of a fit"""
        record = fit_exponent(self.scales, self.scales ** 2).as_dict()
        for key in ("scales", "values", "slope", "ci_lo", "ci_hi", "n_boot"):
            self.assertIn(key, record)


class TestSubadditivityAudit(unittest.TestCase):
    """Test the subadditivity audit"""

    def setUp(self):
        """Set up test environment"""
        self.zeta = 0.7
        self.q = [2.0 ** (-self.zeta * k) for k in range(1, 7)]

    def test_power_law(self):
        """Test the analytic minimal constant on an exact power law"""
        audit = subadditivity_audit(self.q, base=2.0)
        self.assertAlmostEqual(audit.c_star, -2 * self.zeta * math.log(2.0), places=12)
        self.assertTrue(audit.feasible(2 * self.zeta * math.log(2.0)))
        np.testing.assert_allclose(audit.cesaro, -self.zeta * math.log(2.0), rtol=1e-12)
        np.testing.assert_allclose(audit.zeta_path, self.zeta, rtol=1e-12)
        self.assertIn((2, 2), audit.slack)
        self.assertIn((2, 4), audit.slack)
        self.assertNotIn((2, 5), audit.slack)

    def test_bootstrap_interval(self):
        """Test the interval of the minimal constant under resampling"""
        audit = subadditivity_audit(self.q, stderr=[0.01 * q for q in self.q], n_boot=200)
        lo, hi = audit.c_star_ci
        self.assertLessEqual(lo, hi)
        self.assertTrue(math.isfinite(hi))

    def test_errors(self):
        """Test too few scales and nonpositive estimates"""
        with self.assertRaises(InsufficientScalesError):
            subadditivity_audit(self.q[:3])
        with self.assertRaises(NonPositiveValuesError):
            subadditivity_audit([0.5, 0.2, 0.0, 0.01])


class TestSnapping(unittest.TestCase):
    """Test the duration and position snapping operators"""

    def test_psi1(self):
        """Test the half-open snapping intervals"""
        N = 8
        for k in (3, 10):
            self.assertAlmostEqual(psi1_snap(k / N ** 2, N), k / N ** 2)
            self.assertAlmostEqual(psi1_snap((k + 0.6) / N ** 2, N), k / N ** 2)
            self.assertAlmostEqual(psi1_snap((k - 0.375) / N ** 2, N), k / N ** 2)
            self.assertAlmostEqual(psi1_snap((k + 0.7) / N ** 2, N), (k + 1) / N ** 2)

    def test_psi1_interval_ends(self):
        """Test that the snapping interval is closed below and open above"""
        N = 8
        n2 = N ** 2
        for k in (1, 3, 10):
            self.assertEqual(psi1_snap((k - 0.375) / n2, N), k / n2)
            self.assertEqual(psi1_snap((k + 0.625) / n2, N), (k + 1) / n2)
            self.assertEqual(psi1_snap(np.nextafter((k + 0.625) / n2, 0.0), N), k / n2)
        np.testing.assert_array_equal(psi1_snap(np.array([2.625, 2.5]) / n2, N), np.array([3.0, 2.0]) / n2)

    def test_psi2(self):
        """Test snapping to the lattice and the l1 fallback"""
        points, within = psi2_snap(np.array([[0.26, 0.0, 0.0], [0.1, 0.1, 0.0]]), 4)
        self.assertEqual(points.tolist(), [[1, 0, 0], [0, 0, 0]])
        self.assertEqual(within.tolist(), [True, False])

    def test_rescaled_step_path(self):
        """Test the step polyline of a rescaled lattice path"""
        times, points = rescale_discrete_path(np.array([[0, 0, 0], [1, 0, 0], [0, 0, 0]]), 1, 3)
        np.testing.assert_allclose(times, [0, 1 / 3, 1 / 3, 2 / 3, 2 / 3])
        at = positions_at(times, points, np.array([0.1, 0.5, 2 / 3]))
        np.testing.assert_allclose(at, [[0, 0, 0], [1, 0, 0], [0, 0, 0]])


class TestMatching(unittest.TestCase):
    """Test the loop-matching diagnostic"""

    def setUp(self):
        """Set up test environment"""
        gen = np.random.default_rng(4)
        self.N = 4
        self.records = [_rooted_record(_walk_there_and_back(gen, 20 + 5 * i), i, self.N) for i in range(5)]

    def test_round_trip_has_zero_gaps(self):
        """Test a lattice dump against its own rescaled copy"""
        continuum = loop_records(rescaled_lattice_loops(self.records, self.N))
        report = rescale_and_match(self.records, continuum, self.N, 1.0, 1.0)
        self.assertEqual(report.pairs.shape[0], 5)
        self.assertEqual(report.unmatched_discrete, 0)
        np.testing.assert_allclose(report.sup_distances, 0.0, atol=1e-12)
        np.testing.assert_allclose(report.time_gaps, 0.0, atol=1e-12)
        np.testing.assert_array_equal(report.pairs[:, 0], report.pairs[:, 1])
        self.assertEqual(report.as_dict()["fraction_within_time_bound"], 1.0)

    def test_greedy_match_is_injective(self):
        """Test that no row or column is used twice"""
        gen = np.random.default_rng(5)
        cost = gen.random((6, 4))
        pairs = greedy_match(cost, np.zeros_like(cost))
        self.assertEqual(pairs.shape[0], 4)
        self.assertEqual(np.unique(pairs[:, 0]).size, 4)
        self.assertEqual(np.unique(pairs[:, 1]).size, 4)
        self.assertEqual(tuple(pairs[0]), np.unravel_index(np.argmin(cost), cost.shape))

    def test_preconditions(self):
        """Test theta range and schema checks"""
        continuum = loop_records(rescaled_lattice_loops(self.records, self.N))
        with self.assertRaises(PreconditionError):
            rescale_and_match(self.records, continuum, self.N, 1.0, 2.5)
        bad = [dict(self.records[0], layer="fundamental")]
        with self.assertRaises(SchemaMismatchError):
            rescale_and_match(bad, continuum, self.N, 1.0, 1.0)


if __name__ == "__main__":
    unittest.main()
