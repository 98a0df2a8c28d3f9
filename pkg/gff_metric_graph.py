"""
Gaussian free field on the cable graph of Z^d

This module samples the Dirichlet GFF on a lattice box, extends it to the
edges of the metric graph by independent variance-2 Brownian bridges, and
reads off sign clusters. At intensity 1/2 the sign clusters are exactly the
lattice-visible clusters of the critical metric-graph loop soup, so this is
the exact connectivity backend for the one-arm, crossing and two-point
estimators.
"""

import math
import logging
from dataclasses import dataclass, field, replace
from functools import partial
from typing import List, Dict, Any, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.fft
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from cluster_set import ClusterSet
from config import GFF_CONFIG, LATTICE_CONFIG, RUN_CONFIG
from errors import FactorizationError, PreconditionError, ReplicaUnderflowError
from lattice_core import (
    DIRICHLET,
    GreenTable,
    LatticeBox,
    RngStream,
    as_generator,
    build_box,
    green_dirichlet,
    run_replicas,
)

logger = logging.getLogger(__name__)

GFF_METHODS = ("auto", "cholesky", "spectral")
SIGN_MODES = ("any", "positive")


@dataclass(frozen=True, eq=False)
class GffField:
    """
    One GFF sample on the interior of a Dirichlet box.

    edge_open follows the edge order of LatticeBox.edges and is None until
    extend_to_edges has run.
    """

    box: LatticeBox
    phi: np.ndarray = field(repr=False)
    edge_open: Optional[np.ndarray] = field(default=None, repr=False)

    def value(self, x) -> float:
        return float(self.phi[self.box.index_of(x)])


def _axis_slices(box: LatticeBox, axis: int) -> Tuple[Tuple[slice, ...], Tuple[slice, ...]]:
    lower = [slice(None)] * box.d
    upper = [slice(None)] * box.d
    lower[axis] = slice(0, box.side - 1)
    upper[axis] = slice(1, box.side)
    return tuple(lower), tuple(upper)


class GffSampler:
    """
    Exact sampler of the Dirichlet GFF with covariance G.

    "cholesky" multiplies by the dense Cholesky factor of G and suits small
    boxes. "spectral" uses the orthonormal DST-I eigenbasis U of the killed
    generator, phi = U diag(lambda)^{-1/2} z, and needs O(n log n) work per
    sample. Both give phi = L z with L L^T = G.
    """

    def __init__(self, box: LatticeBox, method: str = GFF_CONFIG["method"], green: Optional[GreenTable] = None):
        """
        Initialize the sampler.

        Args:
            box: Dirichlet box
            method: "auto", "cholesky" or "spectral"; "auto" uses the dense
                factor only when a Green table is supplied for a small box
            green: Optional precomputed Green table for the cholesky method
        """
        if box.mode != DIRICHLET:
            raise PreconditionError(f"the GFF is sampled on Dirichlet boxes, got {box.box_id}")
        if method not in GFF_METHODS:
            raise PreconditionError(f"GFF method must be one of {GFF_METHODS}, got {method!r}")
        if method == "auto":
            method = "cholesky" if box.size <= LATTICE_CONFIG["dense_cap"] and green is not None else "spectral"
        self.box = box
        self.method = method
        if method == "cholesky":
            green = green if green is not None else green_dirichlet(box)
            self._factor = green.cholesky_factor
        else:
            wave = np.cos(np.pi * np.arange(1, box.side + 1) / (box.side + 1))
            total = np.zeros(box.shape)
            for axis in range(box.d):
                shape = [1] * box.d
                shape[axis] = box.side
                total = total + wave.reshape(shape)
            self._inv_sqrt_eig = 1.0 / np.sqrt(1.0 - total / box.d)

    def sample(self, rng: Union[RngStream, np.random.Generator]) -> GffField:
        """
        Draw one field.

        Args:
            rng: Random stream or generator

        Returns:
            GffField with phi filled
        """
        gen = as_generator(rng)
        z = gen.standard_normal(self.box.size)
        if self.method == "cholesky":
            phi = self._factor @ z
        else:
            coeff = z.reshape(self.box.shape) * self._inv_sqrt_eig
            phi = scipy.fft.dstn(coeff, type=1, norm="ortho").ravel()
        return GffField(self.box, phi)


def sample_gff(source: Union[GreenTable, GffSampler], rng: Union[RngStream, np.random.Generator]) -> GffField:
    """
    Sample the Dirichlet GFF.

    Args:
        source: Green table (dense Cholesky) or a prepared GffSampler
        rng: Random stream or generator

    Returns:
        GffField with phi only

    Raises:
        FactorizationError: if the Green table is not positive definite
    """
    if isinstance(source, GffSampler):
        return source.sample(rng)
    gen = as_generator(rng)
    return GffField(source.box, source.cholesky_factor @ gen.standard_normal(source.box.size))


def edge_open_probability(a: np.ndarray, b: np.ndarray, d: int) -> np.ndarray:
    """
    Probability that a variance-2 bridge over an interval of length d from a to b avoids 0.

    Equals 1 - exp(-ab/d) when ab > 0 and 0 otherwise.
    """
    prod = np.asarray(a) * np.asarray(b)
    return np.where(prod > 0, -np.expm1(-np.maximum(prod, 0.0) / d), 0.0)


def extend_to_edges(
    gff: GffField,
    rng: Union[RngStream, np.random.Generator],
    force_open: bool = False,
) -> GffField:
    """
    Decide which metric-graph edges keep a constant sign.

    Args:
        gff: Field with phi present
        rng: Random stream or generator
        force_open: Diagnostic mode that opens every edge

    Returns:
        New GffField with edge_open filled
    """
    gen = as_generator(rng)
    box = gff.box
    grid = gff.phi.reshape(box.shape)
    per_axis = []
    for axis in range(box.d):
        lower, upper = _axis_slices(box, axis)
        if force_open:
            per_axis.append(np.ones(grid[lower].size, dtype=bool))
            continue
        prob = edge_open_probability(grid[lower], grid[upper], box.d).ravel()
        per_axis.append(gen.random(prob.size) < prob)
    edge_open = np.concatenate(per_axis) if per_axis else np.zeros(0, dtype=bool)
    return replace(gff, edge_open=edge_open)


def open_edge_pairs(gff: GffField) -> np.ndarray:
    """
    Endpoint indices of the open edges, in LatticeBox.edges order.

    Computed from the grid so large boxes never materialize the full edge list.
    """
    if gff.edge_open is None:
        raise PreconditionError("edge states are missing; call extend_to_edges first")
    box = gff.box
    index_grid = np.arange(box.size, dtype=np.int64).reshape(box.shape)
    strides = box.side ** np.arange(box.d - 1, -1, -1, dtype=np.int64)
    pairs, offset = [], 0
    for axis in range(box.d):
        lower, _ = _axis_slices(box, axis)
        starts = index_grid[lower].ravel()
        mask = gff.edge_open[offset:offset + starts.size]
        offset += starts.size
        chosen = starts[mask]
        pairs.append(np.stack([chosen, chosen + strides[axis]], axis=1))
    return np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)


def _component_labels(n: int, pairs: np.ndarray) -> np.ndarray:
    if pairs.shape[0] == 0:
        return np.arange(n)
    graph = sp.coo_matrix((np.ones(pairs.shape[0], dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    return connected_components(graph, directed=False)[1]


def sign_clusters(gff: GffField) -> ClusterSet:
    """
    Group vertices joined by open edges.

    Args:
        gff: Field with edge states

    Returns:
        ClusterSet over interior vertices; annotations["sign"] holds the sign
        of each cluster in label order
    """
    clusters = ClusterSet.from_pairs(gff.box.size, open_edge_pairs(gff))
    labels = clusters.labels()
    _, first = np.unique(labels, return_index=True)
    clusters.annotations["sign"] = np.sign(gff.phi[first]).astype(np.int8)
    return clusters


def arcsin_two_point(green: GreenTable, v1, v2) -> float:
    """
    Exact two-point function of the critical metric-graph loop soup.

    Args:
        green: Green table of the box
        v1: First interior vertex
        v2: Second interior vertex

    Returns:
        (2/pi) arcsin(G(v1,v2) / sqrt(G(v1,v1) G(v2,v2)))

    Raises:
        FactorizationError: if the correlation leaves [-1, 1] by more than 1e-12
    """
    ratio = green(v1, v2) / math.sqrt(green(v1, v1) * green(v2, v2))
    if abs(ratio) > 1.0 + 1e-12:
        raise FactorizationError(f"Green table is corrupted: correlation {ratio!r} at {v1}, {v2}")
    return 2.0 / math.pi * math.asin(min(1.0, max(-1.0, ratio)))


@dataclass(frozen=True)
class ConnectivityEstimate:
    """A Bernoulli-mean estimate with its normal or one-sided interval."""

    estimate: float
    stderr: float
    ci_lo: float
    ci_hi: float
    successes: int
    replicas: int
    one_sided: bool = False

    def as_dict(self) -> Dict[str, Any]:
        return {
            "estimate": self.estimate,
            "stderr": self.stderr,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "successes": self.successes,
            "replicas": self.replicas,
            "one_sided": self.one_sided,
        }


def binomial_estimate(successes: int, replicas: int) -> ConnectivityEstimate:
    """
    Turn a success count into an estimate with standard error.

    Zero successes give the one-sided 95% upper bound 1 - 0.05^(1/n).
    """
    if replicas <= 0:
        raise ReplicaUnderflowError("an estimate needs at least one replica")
    p = successes / replicas
    stderr = math.sqrt(p * (1.0 - p) / replicas)
    if successes == 0:
        upper = 1.0 - GFF_CONFIG["one_sided_alpha"] ** (1.0 / replicas)
        return ConnectivityEstimate(0.0, 0.0, 0.0, upper, 0, replicas, one_sided=True)
    z = GFF_CONFIG["z_value"]
    return ConnectivityEstimate(
        p, stderr, max(0.0, p - z * stderr), min(1.0, p + z * stderr), int(successes), replicas
    )


def enclosing_radius(N: int, margin: float) -> int:
    """Radius of the killing box used for targets on the sphere of radius N."""
    return max(int(math.ceil(margin * N)), N + 1)


@dataclass(frozen=True, eq=False)
class ConnectivityQuery:
    """
    A source/target connectivity event evaluated on a Dirichlet box.

    Sources and targets are coordinate arrays of shape (k, d). Use the
    one_arm, crossing and pair constructors for the standard events.
    """

    source: np.ndarray
    target: np.ndarray
    box: LatticeBox
    replicas: int
    rng: RngStream
    sign: str = "any"
    force_open: bool = False
    method: str = GFF_CONFIG["method"]

    def __post_init__(self):
        if self.sign not in SIGN_MODES:
            raise PreconditionError(f"sign must be one of {SIGN_MODES}, got {self.sign!r}")
        if self.replicas < GFF_CONFIG["min_replicas"]:
            raise ReplicaUnderflowError(
                f"connectivity estimates need at least {GFF_CONFIG['min_replicas']} replicas, got {self.replicas}"
            )
        if np.any(self.source_index < 0) or np.any(self.target_index < 0):
            raise PreconditionError(f"source and target must be interior to box {self.box.box_id}")
        if np.intersect1d(self.source_index, self.target_index).size:
            raise PreconditionError("source and target sets must be disjoint")

    @property
    def source_index(self) -> np.ndarray:
        return self.box.indices_of(self.source)

    @property
    def target_index(self) -> np.ndarray:
        return self.box.indices_of(self.target)

    @classmethod
    def one_arm(cls, N: int, replicas: int, rng: RngStream, d: int = 3,
                margin: float = GFF_CONFIG["margin"], **kwargs) -> "ConnectivityQuery":
        """Origin against the sphere of radius N, killed at radius ceil(margin N)."""
        return cls.crossing(0, N, replicas, rng, d=d, margin=margin, **kwargs)

    @classmethod
    def crossing(cls, n: int, N: int, replicas: int, rng: RngStream, d: int = 3,
                 margin: float = GFF_CONFIG["margin"], **kwargs) -> "ConnectivityQuery":
        """
        The ball B(n) against the sphere of radius N.

        Args:
            n: Inner radius (0 for the origin alone)
            N: Outer radius, larger than n
            replicas: Number of replicas
            rng: Random stream
            d: Dimension
            margin: Killing box radius as a multiple of N
            **kwargs: sign, force_open or method

        Returns:
            ConnectivityQuery on the enclosing box
        """
        if not 0 <= n < N:
            raise PreconditionError(f"crossing needs 0 <= n < N, got n={n}, N={N}")
        box = build_box(d, enclosing_radius(N, margin))
        ball = box.coords[box.sup_norm <= n]
        sphere = box.coords[box.sup_norm == N]
        return cls(ball, sphere, box, replicas, rng, **kwargs)

    @classmethod
    def pair(cls, v1, v2, N: int, replicas: int, rng: RngStream, **kwargs) -> "ConnectivityQuery":
        """Two distinct interior vertices of the Dirichlet box B(N)."""
        box = build_box(len(v1), N)
        return cls(np.asarray([v1]), np.asarray([v2]), box, replicas, rng, **kwargs)


def _replica_hit(sampler: GffSampler, source: np.ndarray, target: np.ndarray,
                 sign: str, force_open: bool, stream: RngStream) -> bool:
    gen = stream.generator()
    gff = extend_to_edges(sampler.sample(gen), gen, force_open=force_open)
    labels = _component_labels(gff.box.size, open_edge_pairs(gff))
    if sign == "positive":
        source = source[gff.phi[source] > 0]
    return bool(np.intersect1d(labels[source], labels[target]).size)


def connectivity_estimate(
    query: ConnectivityQuery,
    n_jobs: int = 1,
    batch_size: int = RUN_CONFIG["batch_size"],
    progress: bool = False,
) -> ConnectivityEstimate:
    """
    Estimate the probability that a sign cluster meets both source and target.

    Args:
        query: Connectivity event and replica plan
        n_jobs: joblib worker count
        batch_size: Replicas per joblib task
        progress: Show a progress bar

    Returns:
        ConnectivityEstimate with standard error sqrt(p(1-p)/n)
    """
    sampler = GffSampler(query.box, query.method)
    task = partial(_replica_hit, sampler, query.source_index, query.target_index, query.sign, query.force_open)
    hits = run_replicas(task, query.rng, query.replicas, n_jobs=n_jobs, batch_size=batch_size,
                        progress=progress, desc=f"connectivity {query.box.box_id}")
    result = binomial_estimate(int(np.sum(hits)), query.replicas)
    logger.debug("connectivity on %s: %d/%d", query.box.box_id, result.successes, query.replicas)
    return result


def _replica_pairs(sampler: GffSampler, pairs: np.ndarray, stream: RngStream) -> np.ndarray:
    gen = stream.generator()
    gff = extend_to_edges(sampler.sample(gen), gen)
    labels = _component_labels(gff.box.size, open_edge_pairs(gff))
    return labels[pairs[:, 0]] == labels[pairs[:, 1]]


def two_point_estimates(
    box: LatticeBox,
    pairs: Sequence[Tuple[Sequence[int], Sequence[int]]],
    replicas: int,
    rng: RngStream,
    n_jobs: int = 1,
    batch_size: int = RUN_CONFIG["batch_size"],
) -> List[Dict[str, Any]]:
    """
    Estimate the two-point function for many pairs from shared replicas.

    Args:
        box: Dirichlet box
        pairs: Vertex pairs
        replicas: Number of GFF replicas
        rng: Random stream
        n_jobs: joblib worker count
        batch_size: Replicas per joblib task

    Returns:
        One dictionary per pair with the estimate and the arcsin oracle
    """
    if replicas < GFF_CONFIG["min_replicas"]:
        raise ReplicaUnderflowError(f"two-point estimates need at least {GFF_CONFIG['min_replicas']} replicas")
    green = green_dirichlet(box)
    sampler = GffSampler(box, "cholesky", green=green)
    index = np.array([[box.index_of(a), box.index_of(b)] for a, b in pairs], dtype=np.int64).reshape(-1, 2)
    hits = run_replicas(partial(_replica_pairs, sampler, index), rng, replicas, n_jobs=n_jobs, batch_size=batch_size)
    counts = np.sum(hits, axis=0) if hits else np.zeros(len(pairs))
    results = []
    for (a, b), count in zip(pairs, counts):
        estimate = binomial_estimate(int(count), replicas)
        results.append({
            "pair": (tuple(int(v) for v in a), tuple(int(v) for v in b)),
            "arcsin": arcsin_two_point(green, a, b),
            **estimate.as_dict(),
        })
    return results


def submultiplicativity_ratio(rho_nN: float, rho_nm: float, rho_mN: float) -> float:
    """
    Ratio K = rho(n,N) / (rho(n,m) rho(m,N)), reported as computed.

    Returns nan when the denominator vanishes.
    """
    denominator = rho_nm * rho_mN
    if denominator <= 0:
        logger.warning("submultiplicativity ratio undefined: rho(n,m) rho(m,N) = %r", denominator)
        return float("nan")
    return rho_nN / denominator


if __name__ == "__main__":
    # Example usage
    box = build_box(3, 2)
    green = green_dirichlet(box)
    print(f"arcsin two-point (0,e1) on N=2: {arcsin_two_point(green, (0, 0, 0), (1, 0, 0)):.6f}")
    query = ConnectivityQuery.one_arm(4, 200, RngStream(1))
    print(f"one-arm N=4: {connectivity_estimate(query).as_dict()}")
