"""
Tests for the lattice core

This script tests box geometry, Green's functions, heat kernels, bridges and
the random-stream plumbing.
"""

import math
import unittest

import numpy as np
from scipy import integrate

from lattice_core import (
    RngStream,
    as_generator,
    build_box,
    free_kernel_1d,
    green_column,
    green_dirichlet,
    heat_kernel,
    heat_kernel_vector,
    run_replicas,
    sample_ct_bridge,
    stream_id_for,
    transition_matrix,
)
from errors import (
    KernelRangeError,
    PreconditionError,
    SizeCapExceededError,
    UnsupportedParametersError,
)


def _first_uniform(stream):
    return float(stream.generator().uniform())


class TestLatticeBox(unittest.TestCase):
    """Test box construction and indexing"""

    def setUp(self):
        """Set up test environment"""
        self.box = build_box(3, 3)

    def test_interior_sizes(self):
        """Test interior sizes for small boxes"""
        self.assertEqual(build_box(3, 1).size, 1)
        self.assertEqual(build_box(3, 2).size, 27)
        self.assertEqual(build_box(3, 1, "free").size, 27)

    def test_rejects_unsupported_parameters(self):
        """Test that d < 3, N < 1 and unknown modes are rejected"""
        with self.assertRaises(UnsupportedParametersError):
            build_box(2, 3)
        with self.assertRaises(UnsupportedParametersError):
            build_box(3, 0)
        with self.assertRaises(UnsupportedParametersError):
            build_box(3, 2, "periodic")

    def test_index_bijection(self):
        """Test that index_of inverts the coordinate table"""
        for i in range(self.box.size):
            self.assertEqual(self.box.index_of(tuple(self.box.coords[i])), i)
        self.assertEqual(self.box.coords[self.box.origin_index].tolist(), [0, 0, 0])

    def test_boundary_vertex_is_not_interior(self):
        """Test that boundary vertices of a Dirichlet box have no index"""
        with self.assertRaises(PreconditionError):
            self.box.index_of((3, 0, 0))
        self.assertEqual(self.box.indices_of(np.array([[3, 0, 0], [0, 0, 0]])).tolist(), [-1, self.box.origin_index])

    def test_neighbor_table(self):
        """Test that neighbours are unit steps and boundary steps are killed"""
        table = self.box.neighbor_table
        self.assertEqual(table.shape, (125, 6))
        for i in range(self.box.size):
            for direction in range(6):
                j = table[i, direction]
                axis, sign = direction // 2, 1 - 2 * (direction % 2)
                target = self.box.coords[i].copy()
                target[axis] += sign
                if j < 0:
                    self.assertEqual(np.abs(target).max(), 3)
                else:
                    self.assertEqual(self.box.coords[j].tolist(), target.tolist())

    def test_edges_and_half_edges(self):
        """Test edge count and half-edge consistency"""
        side = self.box.side
        self.assertEqual(self.box.n_edges, 3 * side ** 2 * (side - 1))
        lower, upper = self.box.edges[:, 0], self.box.edges[:, 1]
        diff = self.box.coords[upper] - self.box.coords[lower]
        self.assertTrue(np.all(diff.sum(axis=1) == 1))
        self.assertTrue(np.all(diff.max(axis=1) == 1))
        he = self.box.half_edge_ids
        for e in range(0, self.box.n_edges, 17):
            axis = self.box.edge_axis[e]
            self.assertEqual(he[lower[e], 2 * axis], e)
            self.assertEqual(he[upper[e], 2 * axis + 1], e)


class TestGreenFunction(unittest.TestCase):
    """Test Green's function computations"""

    def setUp(self):
        """Set up test environment"""
        self.box = build_box(3, 3)
        self.green = green_dirichlet(self.box)

    def test_single_vertex_box(self):
        """Test that G(0,0) = 1 when the walk dies on its first jump"""
        green = green_dirichlet(build_box(3, 1))
        self.assertAlmostEqual(green((0, 0, 0), (0, 0, 0)), 1.0, places=12)

    def test_symmetry_and_residual(self):
        """Test symmetry and the defining linear system"""
        values = self.green.values
        self.assertTrue(np.array_equal(values, values.T))
        self.assertLess(self.green.residual(), 1e-9)
        self.assertTrue(np.all(self.green.diagonal() >= 1.0))
        self.assertGreater(np.linalg.eigvalsh(values).min(), 0.0)

    def test_origin_value_grows_towards_infinite_lattice(self):
        """Test that G(0,0) increases with N and stays below the lattice value"""
        values = [green_dirichlet(build_box(3, n))((0, 0, 0), (0, 0, 0)) for n in (2, 3, 4, 5)]
        self.assertTrue(all(a < b for a, b in zip(values, values[1:])))
        self.assertGreater(values[-1], 1.3)
        self.assertLess(values[-1], 1.5164)

    def test_green_column_matches_dense(self):
        """Test that the sparse column solve matches the dense table"""
        column = green_column(self.box, (1, 0, -1))
        j = self.box.index_of((1, 0, -1))
        np.testing.assert_allclose(column, self.green.values[:, j], rtol=1e-10, atol=1e-12)

    def test_size_cap(self):
        """Test the dense size cap"""
        with self.assertRaises(SizeCapExceededError):
            green_dirichlet(self.box, max_vertices=100)

    def test_free_box_rejected(self):
        """Test that Green's functions need a Dirichlet box"""
        with self.assertRaises(UnsupportedParametersError):
            green_dirichlet(build_box(3, 2, "free"))


class TestHeatKernel(unittest.TestCase):
    """Test heat kernels"""

    def setUp(self):
        """Set up test environment"""
        self.box = build_box(3, 2)
        self.free = build_box(3, 4, "free")

    def test_time_zero(self):
        """Test q_0(x, y) = 1{x = y}"""
        self.assertEqual(heat_kernel(self.box, 0.0, (0, 0, 0), (0, 0, 0)), 1.0)
        self.assertEqual(heat_kernel(self.box, 0.0, (0, 0, 0), (1, 0, 0)), 0.0)
        self.assertEqual(heat_kernel(self.free, 0.0, (0, 0, 0), (0, 0, 0)), 1.0)

    def test_single_vertex_survival(self):
        """Test q_t(0,0) = exp(-t) on the box with one interior vertex"""
        box = build_box(3, 1)
        for t in (0.1, 1.0, 5.0):
            self.assertAlmostEqual(heat_kernel(box, t, (0, 0, 0), (0, 0, 0)), math.exp(-t), places=12)

    def test_free_conservation(self):
        """Test that the free kernel sums to one"""
        k = np.arange(-25, 26)
        axis_mass = free_kernel_1d(1.0, k, 3).sum()
        self.assertAlmostEqual(axis_mass ** 3, 1.0, delta=1e-12)
        total = sum(
            heat_kernel(self.free, 1.0, (0, 0, 0), (a, b, c))
            for a in range(-10, 11) for b in range(-10, 11) for c in range(-10, 11)
        )
        self.assertAlmostEqual(total, 1.0, delta=1e-12)

    def test_dirichlet_symmetry_and_sub_conservation(self):
        """Test symmetry and mass loss of the killed kernel"""
        a = heat_kernel(self.box, 1.3, (1, 0, 0), (0, -1, 1))
        b = heat_kernel(self.box, 1.3, (0, -1, 1), (1, 0, 0))
        self.assertAlmostEqual(a, b, places=14)
        self.assertLess(heat_kernel_vector(self.box, 1.3, (0, 0, 0)).sum(), 1.0)

    def test_integral_matches_green(self):
        """Test that the time integral of the kernel reproduces G"""
        green = green_dirichlet(self.box)
        x, y = (0, 0, 0), (1, 1, 0)
        j = self.box.index_of(y)
        value, _ = integrate.quad(
            lambda t: heat_kernel_vector(self.box, t, x)[j], 0.0, 120.0, limit=400, epsabs=1e-13, epsrel=1e-10
        )
        self.assertAlmostEqual(value / green(x, y), 1.0, delta=1e-6)

    def test_range_guard(self):
        """Test the overflow guard on very long times"""
        with self.assertRaises(KernelRangeError):
            heat_kernel(self.box, 1e6, (0, 0, 0), (0, 0, 0))


class TestBridge(unittest.TestCase):
    """Test continuous-time bridge sampling"""

    def setUp(self):
        """Set up test environment"""
        self.box = build_box(3, 2)
        self.rng = RngStream(2024)

    def _check_path(self, path, x, y, t):
        self.assertEqual(path.vertices[0].tolist(), list(x))
        self.assertEqual(path.vertices[-1].tolist(), list(y))
        self.assertEqual(path.duration, t)
        steps = np.abs(np.diff(path.vertices, axis=0)).sum(axis=1)
        self.assertTrue(np.all(steps == 1))
        self.assertTrue(np.all(path.holding_times() >= 0))
        self.assertAlmostEqual(path.holding_times().sum(), t, places=12)

    def test_endpoints_dirichlet(self):
        """Test that Dirichlet bridges start at x and end at y"""
        gen = self.rng.generator()
        for _ in range(50):
            path = sample_ct_bridge(self.box, (1, 0, 0), (0, 1, -1), 2.5, gen)
            self._check_path(path, (1, 0, 0), (0, 1, -1), 2.5)
            self.assertTrue(np.all(np.abs(path.vertices) <= 1))

    def test_endpoints_free(self):
        """Test that free bridges start at x and end at y"""
        box = build_box(3, 4, "free")
        gen = self.rng.generator()
        for _ in range(50):
            path = sample_ct_bridge(box, (0, 0, 0), (2, -1, 0), 3.0, gen)
            self._check_path(path, (0, 0, 0), (2, -1, 0), 3.0)

    def test_single_vertex_bridge_has_no_jumps(self):
        """Test that the only bridge on the one-vertex box stays put"""
        path = sample_ct_bridge(build_box(3, 1), (0, 0, 0), (0, 0, 0), 0.7, self.rng)
        self.assertEqual(path.n_jumps, 0)
        self.assertEqual(path.duration, 0.7)

    def test_zero_density_rejected(self):
        """Test that impossible endpoint pairs raise"""
        with self.assertRaises(PreconditionError):
            sample_ct_bridge(self.box, (0, 0, 0), (1, 0, 0), 0.0, self.rng)

    def test_jump_count_mean(self):
        """Test the mean jump count against the uniformized weights"""
        t = 2.0
        x = self.box.origin_index
        p = transition_matrix(self.box).toarray()
        weights, power = [], np.eye(self.box.size)
        for n in range(60):
            weights.append(t ** n / math.factorial(n) * power[x, x])
            power = power @ p
        weights = np.array(weights)
        exact = float((np.arange(60) * weights).sum() / weights.sum())

        gen = self.rng.generator()
        counts = np.array([sample_ct_bridge(self.box, (0, 0, 0), (0, 0, 0), t, gen).n_jumps for _ in range(3000)])
        stderr = counts.std() / math.sqrt(counts.size)
        self.assertLess(abs(counts.mean() - exact), 4 * stderr)

    def test_occupation_consistency(self):
        """Test the mean occupation of a vertex against the bridge formula"""
        t, x, z = 2.0, (0, 0, 0), (1, 0, 0)
        zi, xi = self.box.index_of(z), self.box.index_of(x)
        numerator, _ = integrate.quad(
            lambda s: heat_kernel_vector(self.box, s, x)[zi] * heat_kernel_vector(self.box, t - s, z)[xi],
            0.0, t, epsabs=1e-12,
        )
        exact = numerator / heat_kernel(self.box, t, x, x)

        gen = self.rng.child("occupation").generator()
        samples = np.array([sample_ct_bridge(self.box, x, x, t, gen).occupation(z) for _ in range(3000)])
        stderr = samples.std() / math.sqrt(samples.size)
        self.assertLess(abs(samples.mean() - exact), 4 * stderr)


class TestRngStream(unittest.TestCase):
    """Test random streams and replica dispatch"""

    def setUp(self):
        """Set up test environment"""
        self.stream = RngStream(99, 5)

    def test_reproducible(self):
        """Test that equal (seed, stream id) pairs give equal draws"""
        self.assertEqual(_first_uniform(self.stream), _first_uniform(RngStream(99, 5)))
        self.assertNotEqual(_first_uniform(self.stream), _first_uniform(RngStream(99, 6)))
        self.assertEqual(_first_uniform(self.stream.child(3)), _first_uniform(RngStream(99, 5).child(3)))
        self.assertNotEqual(_first_uniform(self.stream.child(3)), _first_uniform(self.stream.child(4)))

    def test_stream_id_labels(self):
        """Test that labels are typed and 64-bit"""
        self.assertEqual(stream_id_for("a", 1), stream_id_for("a", np.int64(1)))
        self.assertNotEqual(stream_id_for("a", 1), stream_id_for("a", 1.0))
        self.assertLess(stream_id_for("x"), 2 ** 64)

    def test_as_generator(self):
        """Test generator coercion"""
        gen = np.random.default_rng(1)
        self.assertIs(as_generator(gen), gen)
        self.assertIsInstance(as_generator(self.stream), np.random.Generator)
        with self.assertRaises(TypeError):
            as_generator(3)

    def test_rejects_out_of_range_seed(self):
        """Test that seeds must be 64-bit unsigned"""
        with self.assertRaises(PreconditionError):
            RngStream(-1)

    def test_replicas_independent_of_batching(self):
        """Test that replica results do not depend on batch size or workers"""
        a = run_replicas(_first_uniform, self.stream, 23, batch_size=4)
        b = run_replicas(_first_uniform, self.stream, 23, batch_size=50)
        c = run_replicas(_first_uniform, self.stream, 23, n_jobs=2, batch_size=5)
        self.assertEqual(a, b)
        self.assertEqual(a, c)
        self.assertEqual(a[7], _first_uniform(self.stream.child(7)))


if __name__ == "__main__":
    unittest.main()
