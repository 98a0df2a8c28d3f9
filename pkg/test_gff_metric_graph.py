"""
Tests for the cluster bookkeeping and the metric-graph GFF backend

This script tests ClusterSet, GFF sampling, the edge extension, sign clusters,
the arcsin two-point oracle and the connectivity estimators.
"""

import math
import unittest
from unittest.mock import MagicMock

import numpy as np

from cluster_set import ClusterSet, brute_force_partition
from gff_metric_graph import (
    ConnectivityQuery,
    GffField,
    GffSampler,
    arcsin_two_point,
    binomial_estimate,
    connectivity_estimate,
    edge_open_probability,
    enclosing_radius,
    extend_to_edges,
    sample_gff,
    sign_clusters,
    submultiplicativity_ratio,
    two_point_estimates,
)
from lattice_core import GreenTable, RngStream, build_box, green_dirichlet
from errors import FactorizationError, PreconditionError, ReplicaUnderflowError


class TestClusterSet(unittest.TestCase):
    """Test the union-find partition"""

    def setUp(self):
        """Set up test environment"""
        self.rng = np.random.default_rng(11)

    def test_union_and_find(self):
        """Test basic unions"""
        clusters = ClusterSet(6)
        self.assertTrue(clusters.union(0, 3))
        self.assertTrue(clusters.union(3, 5))
        self.assertFalse(clusters.union(0, 5))
        self.assertEqual(clusters.n_clusters, 4)
        self.assertTrue(clusters.connected(0, 5))
        self.assertEqual(clusters.find(5), clusters.find(clusters.find(5)))
        self.assertEqual(clusters.labels().tolist(), [0, 1, 2, 0, 3, 0])

    def test_empty(self):
        """Test the empty partition"""
        clusters = ClusterSet(0)
        self.assertEqual(clusters.labels().size, 0)
        self.assertEqual(clusters.components(), [])

    def test_from_pairs_matches_unions(self):
        """Test that the one-pass builder matches incremental unions"""
        for _ in range(20):
            n = 30
            pairs = self.rng.integers(0, n, size=(25, 2))
            incremental = ClusterSet(n)
            incremental.union_many(pairs)
            bulk = ClusterSet.from_pairs(n, pairs)
            self.assertTrue(bulk.same_partition(incremental))
            self.assertEqual(bulk.n_clusters, incremental.n_clusters)
            bulk.union(0, n - 1)
            self.assertTrue(bulk.connected(0, n - 1))

    def test_brute_force_equivalence(self):
        """Test the partition against a Warshall closure"""
        for _ in range(50):
            n = 20
            adjacency = np.triu(self.rng.random((n, n)) < 0.08, 1)
            adjacency = adjacency | adjacency.T
            clusters = ClusterSet.from_pairs(n, np.argwhere(adjacency))
            expected = brute_force_partition(n, lambda i, j: adjacency[i, j])
            self.assertEqual(clusters.labels().tolist(), expected.tolist())

    def test_refines(self):
        """Test the refinement relation"""
        fine = ClusterSet.from_pairs(5, [(0, 1)])
        coarse = ClusterSet.from_pairs(5, [(0, 1), (1, 2)])
        self.assertTrue(fine.refines(coarse))
        self.assertFalse(coarse.refines(fine))
        self.assertTrue(coarse.refines(coarse))

    def test_summarize(self):
        """Test cluster volumes and sup-norm diameters"""
        coords = np.array([[0, 0, 0], [1, 0, 0], [3, 2, 0], [5, 5, 5]])
        clusters = ClusterSet.from_pairs(4, [(0, 1), (1, 2)])
        summary = clusters.summarize(coords)
        self.assertEqual([entry["volume"] for entry in summary], [3, 1])
        self.assertEqual(summary[0]["diameter"], 3.0)
        self.assertEqual(summary[1]["diameter"], 0.0)


class TestGffSampler(unittest.TestCase):
    """Test GFF sampling"""

    def setUp(self):
        """Set up test environment"""
        self.box = build_box(3, 2)
        self.green = green_dirichlet(self.box)
        self.rng = RngStream(31)

    def test_single_vertex_variance(self):
        """Test that the one-vertex field is standard normal"""
        green = green_dirichlet(build_box(3, 1))
        gen = self.rng.generator()
        draws = np.array([sample_gff(green, gen).phi[0] for _ in range(20000)])
        self.assertLess(abs(draws.mean()), 4 / math.sqrt(draws.size))
        self.assertLess(abs(draws.var() - 1.0), 4 * math.sqrt(2.0 / draws.size))

    def _check_covariance(self, sampler):
        gen = self.rng.child(sampler.method).generator()
        n = 20000
        draws = np.array([sampler.sample(gen).phi for _ in range(n)])
        g = self.green.values
        tolerance = 4 * np.sqrt((np.outer(np.diag(g), np.diag(g)) + g ** 2) / n)
        self.assertTrue(np.all(np.abs(draws.T @ draws / n - g) < tolerance))
        self.assertTrue(np.all(np.abs(draws.mean(axis=0)) < 4 * np.sqrt(np.diag(g) / n)))

    def test_cholesky_covariance(self):
        """Test the empirical covariance of the dense sampler"""
        self._check_covariance(GffSampler(self.box, "cholesky", green=self.green))

    def test_spectral_covariance(self):
        """Test the empirical covariance of the spectral sampler"""
        self._check_covariance(GffSampler(self.box, "spectral"))

    def test_spectral_factor_is_exact(self):
        """Test that the spectral map L satisfies L L^T = G"""
        sampler = GffSampler(build_box(3, 3), "spectral")
        n = sampler.box.size
        fake = MagicMock(spec=np.random.Generator)
        fake.standard_normal.side_effect = list(np.eye(n))
        columns = np.stack([sampler.sample(fake).phi for _ in range(n)], axis=1)
        green = green_dirichlet(sampler.box).values
        np.testing.assert_allclose(columns @ columns.T, green, atol=1e-10)

    def test_auto_method(self):
        """Test method selection"""
        self.assertEqual(GffSampler(self.box).method, "spectral")
        self.assertEqual(GffSampler(self.box, green=self.green).method, "cholesky")
        with self.assertRaises(PreconditionError):
            GffSampler(build_box(3, 2, "free"))


class TestEdgeExtension(unittest.TestCase):
    """Test the metric-graph edge extension and sign clusters"""

    def setUp(self):
        """Set up test environment"""
        self.box = build_box(3, 2)
        self.rng = RngStream(5)

    def test_opposite_signs_closed(self):
        """Test that edges between opposite signs never open"""
        phi = np.where(self.box.coords.sum(axis=1) % 2 == 0, 1.0, -1.0)
        gff = extend_to_edges(GffField(self.box, phi), self.rng)
        self.assertFalse(gff.edge_open.any())
        self.assertEqual(sign_clusters(gff).n_clusters, self.box.size)

    def test_open_frequency(self):
        """Test the open frequency for constant fields"""
        gen = self.rng.generator()
        for a in (0.5, 1.0, 2.0):
            phi = np.full(self.box.size, a)
            opened = np.concatenate([extend_to_edges(GffField(self.box, phi), gen).edge_open for _ in range(2000)])
            p = 1.0 - math.exp(-a * a / 3.0)
            self.assertLess(abs(opened.mean() - p), 4 * math.sqrt(p * (1 - p) / opened.size))

    def test_open_probability_matches_bridge_simulation(self):
        """Test 1 - exp(-ab/d) against simulated variance-2 bridges"""
        gen = np.random.default_rng(17)
        a, b, d, steps, paths = 1.0, 0.7, 3.0, 1000, 20000
        dt = d / steps
        x = np.full(paths, a)
        alive = np.ones(paths, dtype=bool)
        for k in range(steps):
            remaining = d - k * dt
            mean = x + (b - x) * dt / remaining
            var = 2.0 * dt * (remaining - dt) / remaining
            nxt = mean + math.sqrt(var) * gen.standard_normal(paths) if k < steps - 1 else np.full(paths, b)
            crossed = (x * nxt <= 0) | (gen.random(paths) < np.exp(-np.maximum(x * nxt, 0.0) / dt))
            alive &= ~crossed
            x = nxt
        p = float(edge_open_probability(a, b, d))
        self.assertLess(abs(alive.mean() - p), 4 * math.sqrt(p * (1 - p) / paths))

    def test_open_probability_monotone(self):
        """Test that the open probability increases to one"""
        values = edge_open_probability(np.array([0.5, 1.0, 2.0, 10.0]), np.array([0.5, 1.0, 2.0, 10.0]), 3)
        self.assertTrue(np.all(np.diff(values) > 0))
        self.assertAlmostEqual(values[-1], 1.0, places=12)
        self.assertEqual(float(edge_open_probability(0.0, 1.0, 3)), 0.0)

    def test_force_open_single_cluster(self):
        """Test that forcing every edge open merges the box"""
        gff = extend_to_edges(GffField(self.box, np.ones(self.box.size)), self.rng, force_open=True)
        self.assertEqual(sign_clusters(gff).n_clusters, 1)

    def test_sign_clusters_match_brute_force(self):
        """Test sign clusters against reachability over open edges"""
        green = green_dirichlet(self.box)
        gen = self.rng.generator()
        for _ in range(100):
            gff = extend_to_edges(sample_gff(green, gen), gen)
            open_set = {tuple(sorted(e)) for e in self.box.edges[gff.edge_open].tolist()}
            expected = brute_force_partition(self.box.size, lambda i, j: (i, j) in open_set)
            clusters = sign_clusters(gff)
            self.assertEqual(clusters.labels().tolist(), expected.tolist())
            signs = clusters.annotations["sign"]
            for label, members in enumerate(clusters.components()):
                self.assertTrue(np.all(np.sign(gff.phi[members]) == signs[label]))


class TestTwoPoint(unittest.TestCase):
    """Test the arcsin oracle and the Monte Carlo two-point function"""

    def setUp(self):
        """Set up test environment"""
        self.box = build_box(3, 2)
        self.green = green_dirichlet(self.box)

    def test_diagonal(self):
        """Test that a vertex is connected to itself"""
        self.assertAlmostEqual(arcsin_two_point(self.green, (0, 0, 0), (0, 0, 0)), 1.0, places=12)

    def test_uncorrelated(self):
        """Test that zero covariance gives zero"""
        table = GreenTable(self.box, np.eye(self.box.size))
        self.assertEqual(arcsin_two_point(table, (0, 0, 0), (1, 0, 0)), 0.0)

    def test_corrupted_table(self):
        """Test that correlations outside [-1, 1] raise"""
        values = np.eye(self.box.size)
        i, j = self.box.index_of((0, 0, 0)), self.box.index_of((1, 0, 0))
        values[i, j] = values[j, i] = 2.0
        with self.assertRaises(FactorizationError):
            arcsin_two_point(GreenTable(self.box, values), (0, 0, 0), (1, 0, 0))

    def test_monte_carlo_matches_oracle(self):
        """Test the sign-cluster estimate against the arcsin formula"""
        pairs = [((0, 0, 0), (1, 0, 0)), ((0, 0, 0), (1, 1, 0)), ((-1, 0, 1), (1, 0, -1))]
        results = two_point_estimates(self.box, pairs, 20000, RngStream(2718))
        for row in results:
            p = row["arcsin"]
            self.assertLess(abs(row["estimate"] - p), 4 * math.sqrt(p * (1 - p) / row["replicas"]))

    def test_pair_query_matches_oracle(self):
        """Test the pair constructor against the arcsin formula"""
        query = ConnectivityQuery.pair((0, 0, 0), (1, 0, 0), 2, 5000, RngStream(8))
        result = connectivity_estimate(query)
        p = arcsin_two_point(self.green, (0, 0, 0), (1, 0, 0))
        self.assertLess(abs(result.estimate - p), 4 * math.sqrt(p * (1 - p) / 5000))


class TestConnectivity(unittest.TestCase):
    """Test connectivity queries and estimates"""

    def setUp(self):
        """Set up test environment"""
        self.rng = RngStream(77)

    def test_query_geometry(self):
        """Test one-arm and crossing constructors"""
        query = ConnectivityQuery.one_arm(3, 100, self.rng)
        self.assertEqual(query.box.N, 6)
        self.assertEqual(query.source.tolist(), [[0, 0, 0]])
        self.assertTrue(np.all(np.abs(query.target).max(axis=1) == 3))
        crossing = ConnectivityQuery.crossing(1, 3, 100, self.rng, margin=1.0)
        self.assertEqual(crossing.box.N, 4)
        self.assertEqual(len(crossing.source), 27)
        self.assertEqual(enclosing_radius(5, 1.0), 6)

    def test_preconditions(self):
        """Test disjointness and replica checks"""
        with self.assertRaises(PreconditionError):
            ConnectivityQuery.pair((0, 0, 0), (0, 0, 0), 2, 100, self.rng)
        with self.assertRaises(ReplicaUnderflowError):
            ConnectivityQuery.one_arm(3, 99, self.rng)
        with self.assertRaises(PreconditionError):
            ConnectivityQuery.crossing(3, 3, 100, self.rng)

    def test_forced_open(self):
        """Test that the all-open diagnostic connects everything"""
        query = ConnectivityQuery.one_arm(3, 100, self.rng, force_open=True)
        self.assertEqual(connectivity_estimate(query).estimate, 1.0)

    def test_determinism(self):
        """Test bit-identical estimates under a fixed stream"""
        first = connectivity_estimate(ConnectivityQuery.one_arm(3, 200, self.rng))
        second = connectivity_estimate(ConnectivityQuery.one_arm(3, 200, self.rng), batch_size=7)
        self.assertEqual(first, second)

    def test_positive_variant_is_smaller(self):
        """Test that positive clusters connect no more often than all clusters"""
        signed = connectivity_estimate(ConnectivityQuery.one_arm(3, 400, self.rng, sign="positive"))
        unsigned = connectivity_estimate(ConnectivityQuery.one_arm(3, 400, self.rng))
        self.assertLessEqual(signed.successes, unsigned.successes)

    def test_monotone_in_radius(self):
        """Test that the one-arm estimate decreases with N"""
        near = connectivity_estimate(ConnectivityQuery.one_arm(2, 600, self.rng.child(2)))
        far = connectivity_estimate(ConnectivityQuery.one_arm(5, 600, self.rng.child(5)))
        self.assertGreaterEqual(near.estimate + 2 * near.stderr + 2 * far.stderr, far.estimate)

    def test_binomial_estimate(self):
        """Test standard errors and the zero-success bound"""
        zero = binomial_estimate(0, 200)
        self.assertTrue(zero.one_sided)
        self.assertAlmostEqual(zero.ci_hi, 1 - 0.05 ** (1 / 200))
        half = binomial_estimate(50, 100)
        self.assertAlmostEqual(half.stderr, 0.05)
        self.assertLessEqual(half.ci_lo, 0.5)
        self.assertGreaterEqual(half.ci_hi, 0.5)

    def test_submultiplicativity_ratio(self):
        """Test the K ratio"""
        self.assertAlmostEqual(submultiplicativity_ratio(0.1, 0.5, 0.4), 0.5)
        self.assertTrue(math.isnan(submultiplicativity_ratio(0.1, 0.0, 0.4)))


if __name__ == "__main__":
    unittest.main()
