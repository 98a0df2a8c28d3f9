"""
Loop soups on the lattice and on its cable graph

This module samples the three independent layers of the metric-graph loop
soup on a Dirichlet box: fundamental loops (discrete loops visiting at least
two vertices, decorated with Brownian excursions at every visit), point loops
(excursions from a single vertex, summarized by their local time and their
reach along each half-edge) and edge loops (Brownian loops inside a single
cable). Loops are joined into clusters when their ranges meet, which gives
the edge-loop removal experiment, the staged partial clusters of the
exploration argument, discrete loop percolation and the occupation field.

Cables have intrinsic length d, so a variance-2 Brownian bridge across an
edge matches the GFF extension used in gff_metric_graph.
"""

import math
import logging
from dataclasses import dataclass, field
from functools import lru_cache, partial
from typing import List, Dict, Any, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse.linalg as spla
from scipy import integrate

from cluster_set import ClusterSet
from config import LOOP_CONFIG, GFF_CONFIG, RUN_CONFIG, SCALING_CONFIG
from errors import (
    FactorizationError,
    InconsistentBoxError,
    PreconditionError,
    ReplicaUnderflowError,
    SchemaMismatchError,
)
from gff_metric_graph import ConnectivityEstimate, binomial_estimate, enclosing_radius
from lattice_core import (
    DIRICHLET,
    FREE,
    GreenTable,
    LatticeBox,
    RngStream,
    as_generator,
    build_box,
    cholmod_cholesky,
    free_kernel_1d,
    killed_generator,
    run_replicas,
    sample_ct_bridge,
)

logger = logging.getLogger(__name__)

FUNDAMENTAL = "fundamental"
POINT = "point"
EDGE = "edge"
ROOTED = "rooted"

RandomSource = Union[RngStream, np.random.Generator]


# ---------------------------------------------------------------------------
# Layer types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiscreteLoop:
    """
    A fundamental loop.

    vertices holds interior indices of the closed walk (first = last);
    holdings[k] and reaches[k] belong to the visit at vertices[k].
    """

    vertices: np.ndarray
    holdings: np.ndarray
    reaches: np.ndarray = field(repr=False)
    loop_id: int = 0
    box_id: str = ""

    @property
    def duration(self) -> float:
        return float(self.holdings.sum())

    @property
    def visits(self) -> np.ndarray:
        return self.vertices[:-1]

    def coords(self, box: LatticeBox) -> np.ndarray:
        return box.coords[self.vertices]


@dataclass(frozen=True)
class PointLoopBundle:
    """All point loops at one vertex: total local time and per-half-edge reach."""

    vertex: Tuple[int, ...]
    total_local_time: float
    reaches: Tuple[float, ...]


@dataclass(frozen=True, eq=False)
class PointLoopLayer:
    """
    Point loops of a whole box, one bundle per interior vertex.

    Behaves as a sequence of PointLoopBundle objects in vertex-index order.
    """

    box: LatticeBox
    local_time: np.ndarray
    reaches: np.ndarray = field(repr=False)

    @property
    def box_id(self) -> str:
        return self.box.box_id

    @property
    def vertex_index(self) -> np.ndarray:
        return np.arange(self.box.size)

    def __len__(self) -> int:
        return int(self.local_time.size)

    def __getitem__(self, i: int) -> PointLoopBundle:
        return PointLoopBundle(
            tuple(int(c) for c in self.box.coords[i]),
            float(self.local_time[i]),
            tuple(float(u) for u in self.reaches[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))


@dataclass(frozen=True)
class EdgeLoopSample:
    """
    An edge loop on the cable of one edge.

    lo and hi are the minimum and maximum of the loop in intrinsic
    coordinates, measured from the lower endpoint of the edge.
    """

    edge: int
    lo: float
    hi: float
    duration: float
    in_special_family: bool
    box_id: str = ""


def is_special(lo, hi, d: float = 3.0):
    """Membership in the trisection family, by closed inequalities."""
    return (np.asarray(lo) <= d / 3.0) & (np.asarray(hi) >= 2.0 * d / 3.0)


@dataclass(frozen=True, eq=False)
class EdgeLoopLayer:
    """Edge loops of a whole box as parallel arrays."""

    box: LatticeBox
    edge: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    duration: np.ndarray
    eta: float

    @property
    def box_id(self) -> str:
        return self.box.box_id

    @property
    def special(self) -> np.ndarray:
        return is_special(self.lo, self.hi, self.box.d)

    def __len__(self) -> int:
        return int(self.edge.size)

    def __getitem__(self, i: int) -> EdgeLoopSample:
        return EdgeLoopSample(int(self.edge[i]), float(self.lo[i]), float(self.hi[i]),
                              float(self.duration[i]), bool(self.special[i]), self.box_id)

    def __iter__(self):
        return (self[i] for i in range(len(self)))


@dataclass(frozen=True, eq=False)
class LoopLayers:
    """The three layers of one replica on one box."""

    box: LatticeBox
    fundamental: List[DiscreteLoop]
    points: Optional[PointLoopLayer]
    edges: Optional[EdgeLoopLayer]


def _layer_generator(rng: RandomSource, name: str) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.child(name).generator()
    return as_generator(rng)


# ---------------------------------------------------------------------------
# Excursion reaches
# ---------------------------------------------------------------------------

def excursion_reach(local_time, rng: RandomSource, d: float = 3.0, conditioned: bool = True) -> np.ndarray:
    """
    Maximal reach along one half-edge of the excursions spent at a vertex.

    Excursions of reach at least u arrive at rate 1/(2u) per unit local time
    on each half-edge. The unconditioned reach is U = L/(2E) with E standard
    exponential, so P(U >= u) = 1 - exp(-L/(2u)) and U >= d means the
    neighbour was hit. The conditioned reach is the same law given that no
    excursion reaches d, which is U = L/(2E + L/d).

    Args:
        local_time: Array of local times, one per half-edge draw
        rng: Random stream or generator
        d: Cable length
        conditioned: Condition on not hitting the neighbour

    Returns:
        Array of reaches with the shape of local_time
    """
    gen = as_generator(rng)
    local_time = np.asarray(local_time, dtype=float)
    e = gen.exponential(1.0, size=local_time.shape)
    if conditioned:
        return local_time / (2.0 * e + local_time / d)
    return local_time / (2.0 * e)


def sample_point_loops(box: LatticeBox, alpha: float, rng: RandomSource) -> PointLoopLayer:
    """
    Sample the point-loop layer.

    Args:
        box: Lattice box
        alpha: Soup intensity
        rng: Random stream or generator

    Returns:
        PointLoopLayer with Gamma(alpha, 1) local times and conditioned reaches
    """
    if not alpha > 0:
        raise PreconditionError(f"alpha must be positive, got {alpha}")
    gen = as_generator(rng)
    local_time = gen.gamma(alpha, 1.0, size=box.size)
    reaches = excursion_reach(np.repeat(local_time[:, None], 2 * box.d, axis=1), gen, d=box.d)
    return PointLoopLayer(box, local_time, reaches)


# ---------------------------------------------------------------------------
# Fundamental loops
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReducedGreen:
    """
    Green values of the walk killed on leaving the box or on reaching an earlier vertex.

    order[j] is the vertex at position j, and positions run against the
    elimination order of the factor. The pivot 1/L_kk^2 at elimination step k
    is the Green value of the domain of steps <= k, so values[v] is the Green
    value of v in the domain of positions >= rank[v]. The first position
    carries the full Green value and the last carries 1.
    """

    box: LatticeBox
    order: np.ndarray
    rank: np.ndarray
    values: np.ndarray


def _positions_from_permutation(order: np.ndarray) -> np.ndarray:
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return rank


@lru_cache(maxsize=8)
def reduced_green(box: LatticeBox) -> ReducedGreen:
    """
    Factor the killed Laplacian once per box and read off the reduced Green values.

    Small boxes use a dense factor in reversed index order. Larger boxes use
    a fill-reducing ordering from cholmod, or from SuperLU when cholmod is
    missing.

    Raises:
        FactorizationError: if a reduced Green value falls below 1
    """
    if box.mode != DIRICHLET:
        raise PreconditionError(f"fundamental loops live on Dirichlet boxes, got {box.box_id}")
    q = killed_generator(box)
    n = box.size
    if n <= LOOP_CONFIG["dense_factor_cap"]:
        order = np.arange(n)[::-1].copy()
        try:
            factor = np.linalg.cholesky(q.toarray()[np.ix_(order, order)])
        except np.linalg.LinAlgError as e:
            raise FactorizationError(f"killed Laplacian of {box.box_id} is not positive definite: {e}")
        pivots = 1.0 / np.diag(factor) ** 2
    elif cholmod_cholesky is not None:
        factor = cholmod_cholesky(q)
        order = np.asarray(factor.P(), dtype=np.int64)
        pivots = 1.0 / factor.L().diagonal() ** 2
    else:
        lu = spla.splu(q, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        if not np.array_equal(lu.perm_r, lu.perm_c):
            logger.warning("SuperLU pivoted on box %s, falling back to natural ordering", box.box_id)
            lu = spla.splu(q, permc_spec="NATURAL", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise FactorizationError(f"no symmetric factorization found for box {box.box_id}")
        order = np.argsort(lu.perm_c)
        pivots = 1.0 / lu.U.diagonal()

    order = order[::-1].copy()
    pivots = pivots[::-1]
    rank = _positions_from_permutation(order)
    values = pivots[rank]
    if np.any(values < 1.0 - LOOP_CONFIG["reduced_green_floor"]):
        raise FactorizationError(f"reduced Green value {values.min()!r} below 1 on box {box.box_id}")
    return ReducedGreen(box, order, rank, np.maximum(values, 1.0))


class _DirectionStream:
    """Buffered uniform neighbour directions."""

    def __init__(self, gen: np.random.Generator, n_directions: int, block: int = 4096):
        self._gen = gen
        self._n = n_directions
        self._block = block
        self._buffer = gen.integers(0, n_directions, size=block)
        self._pos = 0

    def next(self) -> int:
        if self._pos == self._block:
            self._buffer = self._gen.integers(0, self._n, size=self._block)
            self._pos = 0
        value = self._buffer[self._pos]
        self._pos += 1
        return int(value)


def _sample_excursion(table: np.ndarray, rank: np.ndarray, v: int, directions: _DirectionStream) -> List[int]:
    """
    One excursion from v back to v among vertices of factor position >= that of v.

    Walks that are killed first are rejected, which leaves the walk
    conditioned to return, the h-transform of the reduced chain.
    """
    limit = rank[v]
    max_steps = LOOP_CONFIG["max_excursion_steps"]
    steps = 0
    while True:
        path = [v]
        w = v
        while True:
            w = table[w, directions.next()]
            steps += 1
            if w < 0 or rank[w] < limit:
                break
            path.append(w)
            if w == v:
                return path
        if steps > max_steps:
            raise FactorizationError(f"excursion from vertex {v} exceeded {max_steps} steps")


def sample_fundamental_loops(
    box: LatticeBox,
    green: Optional[GreenTable],
    alpha: float,
    rng: RandomSource,
) -> List[DiscreteLoop]:
    """
    Sample the fundamental-loop layer by the minimal-vertex decomposition.

    Every vertex v roots Poisson(alpha ln G_v) loops, G_v its reduced Green
    value. A loop visits v a log-series number of times with parameter
    1 - 1/G_v, its excursions are conditioned returns inside the reduced
    domain, every visit holds for an Exp(1) time, and every visit is decorated
    with conditioned excursion reaches.

    Args:
        box: Dirichlet box
        green: Optional Green table, only checked against the box
        alpha: Soup intensity
        rng: Random stream or generator

    Returns:
        Loops ordered by factor position of their minimal vertex
    """
    if not alpha > 0:
        raise PreconditionError(f"alpha must be positive, got {alpha}")
    if green is not None and green.box.box_id != box.box_id:
        raise InconsistentBoxError(f"Green table of {green.box.box_id} used on box {box.box_id}")
    reduced = reduced_green(box)
    gen = as_generator(rng)
    counts_by_position = gen.poisson(alpha * np.log(reduced.values[reduced.order]))
    table = box.neighbor_table
    directions = _DirectionStream(gen, 2 * box.d)
    loops: List[DiscreteLoop] = []
    for position in np.flatnonzero(counts_by_position):
        v = int(reduced.order[position])
        r = 1.0 - 1.0 / reduced.values[v]
        for _ in range(int(counts_by_position[position])):
            path = [v]
            for _ in range(int(gen.logseries(r))):
                path.extend(_sample_excursion(table, reduced.rank, v, directions)[1:])
            vertices = np.asarray(path, dtype=np.int64)
            holdings = gen.exponential(1.0, size=vertices.size - 1)
            reaches = excursion_reach(np.repeat(holdings[:, None], 2 * box.d, axis=1), gen, d=box.d)
            loops.append(DiscreteLoop(vertices, holdings, reaches, len(loops), box.box_id))
    return loops


# ---------------------------------------------------------------------------
# Edge loops
# ---------------------------------------------------------------------------

def edge_loop_mass(eta: float, d: float = 3.0) -> float:
    """
    Closed-form mass of Brownian loops inside (0, d) with diameter at least eta.

    The (min, max) of such loops has density (b - a)^-2, which integrates to
    d/eta - 1 - ln(d/eta).
    """
    if eta >= d:
        return 0.0
    return d / eta - 1.0 - math.log(d / eta)


def special_family_mass(d: float = 3.0) -> float:
    """Mass of loops inside (0, d) covering both trisection points; ln(4/3) for every d."""
    return math.log(4.0 / 3.0)


def _duration_window(eta: float, d: float) -> Tuple[float, float]:
    return eta * eta / 200.0, 8.0 * d * d


def _proposal_mass(eta: float, d: float) -> float:
    t_lo, t_hi = _duration_window(eta, d)
    return d / math.sqrt(2.0 * math.pi) * 2.0 * (t_lo ** -0.5 - t_hi ** -0.5)


def _edge_loop_proposals(size: int, eta: float, d: float, gen: np.random.Generator) -> Tuple[np.ndarray, ...]:
    """
    Proposals for edge loops: uniform root, duration density t^(-3/2) and a
    bridge on a fixed grid whose per-segment extremes are drawn exactly.
    """
    grid = LOOP_CONFIG["edge_grid"]
    t_lo, t_hi = _duration_window(eta, d)
    a, b = t_lo ** -0.5, t_hi ** -0.5
    duration = (a - gen.random(size) * (a - b)) ** -2
    root = gen.uniform(0.0, d, size)
    dt = (duration / grid)[:, None]
    walk = np.zeros((size, grid + 1))
    walk[:, 1:] = np.cumsum(gen.standard_normal((size, grid)) * np.sqrt(dt), axis=1)
    bridge = walk - (np.arange(grid + 1) / grid)[None, :] * walk[:, -1:]
    x0, x1 = bridge[:, :-1], bridge[:, 1:]
    gap = (x1 - x0) ** 2
    seg_max = 0.5 * (x0 + x1 + np.sqrt(gap - 2.0 * dt * np.log(gen.random((size, grid)))))
    seg_min = 0.5 * (x0 + x1 - np.sqrt(gap - 2.0 * dt * np.log(gen.random((size, grid)))))
    return root + seg_min.min(axis=1), root + seg_max.max(axis=1), duration


def _accept(lo: np.ndarray, hi: np.ndarray, eta: float, d: float) -> np.ndarray:
    return (lo > 0.0) & (hi < d) & (hi - lo >= eta)


@dataclass(frozen=True)
class EdgeLoopIntensity:
    """Measure estimate of edge loops per edge, before multiplying by alpha."""

    eta: float
    d: float
    mass: float
    stderr: float
    special_mass: float
    special_stderr: float
    acceptance: float
    proposals: int


@lru_cache(maxsize=32)
def edge_loop_intensity(eta: float, d: float = 3.0, proposals: Optional[int] = None,
                        seed: Optional[int] = None) -> EdgeLoopIntensity:
    """
    Estimate the loop measure of edge loops of diameter at least eta.

    Runs the proposal sampler in measure-estimation mode with a fixed seed
    and caches the result per (eta, d).

    Args:
        eta: Diameter cutoff
        d: Cable length
        proposals: Number of proposals, defaults to LOOP_CONFIG["edge_proposals"]
        seed: Seed of the estimation stream

    Returns:
        EdgeLoopIntensity with the total and trisection-family masses
    """
    total = LOOP_CONFIG["edge_proposals"] if proposals is None else int(proposals)
    gen = RngStream(LOOP_CONFIG["edge_seed"] if seed is None else seed,
                    0).child("edge-intensity", float(eta), float(d)).generator()
    accepted = special_count = done = 0
    while done < total:
        size = min(LOOP_CONFIG["edge_batch"], total - done)
        lo, hi, _ = _edge_loop_proposals(size, eta, d, gen)
        ok = _accept(lo, hi, eta, d)
        accepted += int(ok.sum())
        special_count += int((_accept(lo, hi, 0.0, d) & is_special(lo, hi, d)).sum())
        done += size
    scale = _proposal_mass(eta, d)
    p, q = accepted / total, special_count / total
    return EdgeLoopIntensity(
        eta, d, scale * p, scale * math.sqrt(p * (1 - p) / total),
        scale * q, scale * math.sqrt(q * (1 - q) / total), p, total,
    )


def _draw_edge_loops(count: int, eta: float, d: float, acceptance: float,
                     gen: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    los, his, durations = [], [], []
    have = 0
    while have < count:
        size = int(min(LOOP_CONFIG["edge_batch"], 1.5 * (count - have) / max(acceptance, 1e-6) + 64))
        lo, hi, duration = _edge_loop_proposals(size, eta, d, gen)
        ok = _accept(lo, hi, eta, d)
        los.append(lo[ok])
        his.append(hi[ok])
        durations.append(duration[ok])
        have += int(ok.sum())
    if not los:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    return np.concatenate(los)[:count], np.concatenate(his)[:count], np.concatenate(durations)[:count]


def _check_eta(eta: float, d: float, special_family: bool = False) -> None:
    if not eta > 0:
        raise PreconditionError(f"eta must be positive, got {eta}")
    if special_family and eta > d / 3.0:
        raise PreconditionError(f"the trisection family needs eta <= d/3 = {d / 3.0}, got {eta}")


def sample_edge_loops(
    edge: int,
    alpha: float,
    eta: float,
    rng: RandomSource,
    d: int = 3,
    special_family: bool = False,
    box_id: str = "",
) -> List[EdgeLoopSample]:
    """
    Sample the edge loops of diameter at least eta on one cable.

    Args:
        edge: Edge id
        alpha: Soup intensity
        eta: Diameter cutoff
        rng: Random stream or generator
        d: Cable length
        special_family: Return only loops of the trisection family
        box_id: Box identifier stamped on the samples

    Returns:
        Edge loops in sampling order
    """
    _check_eta(eta, d, special_family)
    if eta >= d:
        return []
    gen = as_generator(rng)
    intensity = edge_loop_intensity(float(eta), float(d))
    count = int(gen.poisson(alpha * intensity.mass))
    lo, hi, duration = _draw_edge_loops(count, eta, d, intensity.acceptance, gen)
    samples = [EdgeLoopSample(int(edge), float(a), float(b), float(t), bool(is_special(a, b, d)), box_id)
               for a, b, t in zip(lo, hi, duration)]
    if special_family:
        return [s for s in samples if s.in_special_family]
    return samples


def sample_edge_layer(box: LatticeBox, alpha: float, eta: float, rng: RandomSource) -> EdgeLoopLayer:
    """
    Sample edge loops on every cable between interior vertices.

    Args:
        box: Lattice box
        alpha: Soup intensity
        eta: Diameter cutoff
        rng: Random stream or generator

    Returns:
        EdgeLoopLayer ordered by edge id
    """
    d = box.d
    _check_eta(eta, d)
    empty = np.zeros(0)
    if eta >= d or box.n_edges == 0:
        return EdgeLoopLayer(box, np.zeros(0, dtype=np.int64), empty, empty, empty, float(eta))
    gen = as_generator(rng)
    intensity = edge_loop_intensity(float(eta), float(d))
    counts = gen.poisson(alpha * intensity.mass, size=box.n_edges)
    lo, hi, duration = _draw_edge_loops(int(counts.sum()), eta, d, intensity.acceptance, gen)
    edge = np.repeat(np.arange(box.n_edges, dtype=np.int64), counts)
    return EdgeLoopLayer(box, edge, lo, hi, duration, float(eta))


def classify_special(samples: Iterable[EdgeLoopSample], d: float = 3.0) -> Tuple[List[EdgeLoopSample], List[EdgeLoopSample]]:
    """
    Split edge loops into the trisection family and the rest, preserving order.
    """
    special_loops, rest = [], []
    for sample in samples:
        (special_loops if is_special(sample.lo, sample.hi, d) else rest).append(sample)
    return special_loops, rest


def sample_layers(box: LatticeBox, alpha: float, eta: Optional[float], rng: RandomSource,
                  green: Optional[GreenTable] = None) -> LoopLayers:
    """
    Sample the three independent layers of one replica.

    Each layer draws from its own child stream. Pass eta=None to skip the
    edge-loop layer.
    """
    fundamental = sample_fundamental_loops(box, green, alpha, _layer_generator(rng, FUNDAMENTAL))
    points = sample_point_loops(box, alpha, _layer_generator(rng, POINT))
    edges = None if eta is None else sample_edge_layer(box, alpha, eta, _layer_generator(rng, EDGE))
    return LoopLayers(box, fundamental, points, edges)


# ---------------------------------------------------------------------------
# Coverage and clusters
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MetricCoverage:
    """
    The ranges of a set of loops on the cable graph.

    Vertex rows say which element touches which vertex; interval rows say
    which element covers [lo, hi] of which edge, in intrinsic coordinates
    from the lower endpoint. Elements are numbered
    [fundamental loops, point bundles, kept edge loops].
    """

    box: LatticeBox
    n_elements: int
    vertex_owner: np.ndarray
    vertex_id: np.ndarray
    interval_owner: np.ndarray
    interval_edge: np.ndarray
    interval_lo: np.ndarray
    interval_hi: np.ndarray

    def merge(self, other: "MetricCoverage") -> "MetricCoverage":
        """Union of two coverages over a common element numbering."""
        if other.box.box_id != self.box.box_id:
            raise InconsistentBoxError(f"cannot merge coverage of {other.box.box_id} into {self.box.box_id}")
        return MetricCoverage(
            self.box,
            max(self.n_elements, other.n_elements),
            np.concatenate([self.vertex_owner, other.vertex_owner]),
            np.concatenate([self.vertex_id, other.vertex_id]),
            np.concatenate([self.interval_owner, other.interval_owner]),
            np.concatenate([self.interval_edge, other.interval_edge]),
            np.concatenate([self.interval_lo, other.interval_lo]),
            np.concatenate([self.interval_hi, other.interval_hi]),
        )

    def normalized(self) -> Dict[int, List[Tuple[float, float, Tuple[int, ...]]]]:
        """
        Disjoint covered sub-intervals per edge with their owners.

        Closed intervals that touch are merged.
        """
        result: Dict[int, List[Tuple[float, float, Tuple[int, ...]]]] = {}
        order = np.lexsort((self.interval_lo, self.interval_edge))
        for k in order:
            e, lo, hi, owner = (int(self.interval_edge[k]), float(self.interval_lo[k]),
                                float(self.interval_hi[k]), int(self.interval_owner[k]))
            runs = result.setdefault(e, [])
            if runs and lo <= runs[-1][1]:
                prev_lo, prev_hi, owners = runs[-1]
                runs[-1] = (prev_lo, max(prev_hi, hi), tuple(sorted(set(owners) | {owner})))
            else:
                runs.append((lo, hi, (owner,)))
        return result

    def union_pairs(self, vertex_mask: Optional[np.ndarray] = None,
                    interval_mask: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Element pairs whose ranges meet.

        Vertex rows are grouped by vertex; interval rows are swept per edge in
        order of lo, joining each interval to the running record holder when
        it starts before the running maximum of hi.

        Args:
            vertex_mask: Optional subset of vertex rows to use
            interval_mask: Optional subset of interval rows to use

        Returns:
            Integer array of shape (k, 2)
        """
        pairs = []
        v_owner, v_id = self.vertex_owner, self.vertex_id
        if vertex_mask is not None:
            v_owner, v_id = v_owner[vertex_mask], v_id[vertex_mask]
        if v_id.size > 1:
            order = np.lexsort((v_owner, v_id))
            same = v_id[order][1:] == v_id[order][:-1]
            pairs.append(np.stack([v_owner[order][:-1][same], v_owner[order][1:][same]], axis=1))

        owner, edge, lo, hi = self.interval_owner, self.interval_edge, self.interval_lo, self.interval_hi
        if interval_mask is not None:
            owner, edge, lo, hi = owner[interval_mask], edge[interval_mask], lo[interval_mask], hi[interval_mask]
        if edge.size > 1:
            shift = edge * (3.0 * self.box.d)
            order = np.lexsort((hi + shift, lo + shift))
            s_lo, s_hi, s_owner = (lo + shift)[order], (hi + shift)[order], owner[order]
            running = np.maximum.accumulate(s_hi)
            index = np.arange(s_hi.size)
            holder = np.maximum.accumulate(np.where(s_hi >= running, index, 0))
            touch = np.flatnonzero(s_lo[1:] <= running[:-1]) + 1
            pairs.append(np.stack([s_owner[touch], s_owner[holder[touch - 1]]], axis=1))
        if not pairs:
            return np.zeros((0, 2), dtype=np.int64)
        return np.concatenate(pairs).astype(np.int64)

    def element_extent(self) -> np.ndarray:
        """Largest sup-norm reached by each element's range, -1 for empty elements."""
        extent = np.full(self.n_elements, -1.0)
        if self.vertex_id.size:
            np.maximum.at(extent, self.vertex_owner, self.box.sup_norm[self.vertex_id].astype(float))
        if self.interval_edge.size:
            box = self.box
            lower = box.edges[self.interval_edge, 0]
            axis = box.edge_axis[self.interval_edge]
            base = box.coords[lower].astype(float)
            along = base[np.arange(lower.size), axis]
            other = np.abs(base)
            other[np.arange(lower.size), axis] = 0.0
            reach = np.maximum(np.abs(along + self.interval_lo / box.d), np.abs(along + self.interval_hi / box.d))
            np.maximum.at(extent, self.interval_owner, np.maximum(other.max(axis=1), reach))
        return extent


def _half_edge_intervals(box: LatticeBox, vertices: np.ndarray, reaches: np.ndarray,
                         owners: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Intervals covered by excursion reaches, restricted to interior edges."""
    he = box.half_edge_ids[vertices]
    direction = np.broadcast_to(np.arange(2 * box.d), he.shape)
    keep = (he >= 0) & (reaches > 0)
    u = np.minimum(reaches[keep], box.d)
    from_lower = direction[keep] % 2 == 0
    lo = np.where(from_lower, 0.0, box.d - u)
    hi = np.where(from_lower, u, float(box.d))
    return np.broadcast_to(owners[:, None], he.shape)[keep], he[keep], lo, hi


def _traversed_edges(box: LatticeBox, vertices: np.ndarray) -> np.ndarray:
    start, end = vertices[:-1], vertices[1:]
    diff = box.coords[end] - box.coords[start]
    axis = np.argmax(np.abs(diff), axis=1)
    step = diff[np.arange(diff.shape[0]), axis]
    direction = 2 * axis + (step < 0)
    return box.half_edge_ids[start, direction]


def _points_as_arrays(box: LatticeBox, points) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if points is None:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, 2 * box.d))
    if isinstance(points, PointLoopLayer):
        return points.vertex_index, points.local_time, points.reaches
    points = list(points)
    if not points:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, 2 * box.d))
    vertices = np.array([box.index_of(b.vertex) for b in points], dtype=np.int64)
    return (vertices, np.array([b.total_local_time for b in points]),
            np.array([b.reaches for b in points], dtype=float))


def _edges_as_arrays(edges) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if edges is None:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0)
    if isinstance(edges, EdgeLoopLayer):
        return edges.edge, edges.lo, edges.hi
    edges = list(edges)
    return (np.array([s.edge for s in edges], dtype=np.int64),
            np.array([s.lo for s in edges], dtype=float),
            np.array([s.hi for s in edges], dtype=float))


def _resolve_box(box: Optional[LatticeBox], fund, points, edges) -> LatticeBox:
    ids = set()
    ids.update(loop.box_id for loop in fund)
    if points is not None and isinstance(points, PointLoopLayer):
        ids.add(points.box_id)
    if edges is not None:
        if isinstance(edges, EdgeLoopLayer):
            ids.add(edges.box_id)
        else:
            ids.update(s.box_id for s in edges if s.box_id)
    if box is not None:
        ids.add(box.box_id)
    ids.discard("")
    if len(ids) > 1:
        raise InconsistentBoxError(f"loop layers come from different boxes: {sorted(ids)}")
    if box is not None:
        return box
    if not ids:
        raise PreconditionError("cannot infer the box; pass box explicitly")
    return LatticeBox.from_id(ids.pop())


def metric_coverage(fund: Sequence[DiscreteLoop], points, edges, box: LatticeBox,
                    include_special: bool = True) -> Tuple[MetricCoverage, np.ndarray]:
    """
    Build the coverage of all elements.

    Returns:
        The coverage and the indices of the kept edge loops
    """
    d = box.d
    n_fund = len(fund)
    p_vertices, _, p_reaches = _points_as_arrays(box, points)
    e_edge, e_lo, e_hi = _edges_as_arrays(edges)
    kept = np.arange(e_edge.size) if include_special else np.flatnonzero(~is_special(e_lo, e_hi, d))
    n_points = p_vertices.size
    n_elements = n_fund + n_points + kept.size

    v_owner, v_id = [], []
    i_owner, i_edge, i_lo, i_hi = [], [], [], []
    for k, loop in enumerate(fund):
        visits = loop.visits
        owners = np.full(visits.size, k, dtype=np.int64)
        v_owner.append(owners)
        v_id.append(visits)
        traversed = _traversed_edges(box, loop.vertices)
        traversed = np.unique(traversed[traversed >= 0])
        i_owner.append(np.full(traversed.size, k, dtype=np.int64))
        i_edge.append(traversed)
        i_lo.append(np.zeros(traversed.size))
        i_hi.append(np.full(traversed.size, float(d)))
        parts = _half_edge_intervals(box, visits, loop.reaches, owners)
        for bucket, part in zip((i_owner, i_edge, i_lo, i_hi), parts):
            bucket.append(part)

    if n_points:
        owners = n_fund + np.arange(n_points, dtype=np.int64)
        v_owner.append(owners)
        v_id.append(p_vertices)
        parts = _half_edge_intervals(box, p_vertices, p_reaches, owners)
        for bucket, part in zip((i_owner, i_edge, i_lo, i_hi), parts):
            bucket.append(part)

    if kept.size:
        i_owner.append(n_fund + n_points + np.arange(kept.size, dtype=np.int64))
        i_edge.append(e_edge[kept])
        i_lo.append(e_lo[kept])
        i_hi.append(e_hi[kept])

    def cat(chunks, dtype):
        return np.concatenate(chunks).astype(dtype) if chunks else np.zeros(0, dtype=dtype)

    coverage = MetricCoverage(
        box, n_elements,
        cat(v_owner, np.int64), cat(v_id, np.int64),
        cat(i_owner, np.int64), cat(i_edge, np.int64), cat(i_lo, float), cat(i_hi, float),
    )
    return coverage, kept


class MetricClusters(ClusterSet):
    """
    Loop clusters on the cable graph.

    Elements are [fundamental loops, point bundles, kept edge loops]; the
    point bundle of a vertex always covers it, so vertex labels are read from
    the bundles.
    """

    def __init__(self, n: int):
        super().__init__(n)
        self.coverage: Optional[MetricCoverage] = None
        self.n_fundamental = 0
        self.n_points = 0
        self.point_vertices = np.zeros(0, dtype=np.int64)
        self.kept_edge_loops = np.zeros(0, dtype=np.int64)

    def vertex_labels(self) -> np.ndarray:
        """Cluster label per interior vertex, -1 where no element covers it."""
        if self.coverage is None:
            return np.zeros(0, dtype=np.int64)
        cov = self.coverage
        labels = self.labels()
        out = np.full(cov.box.size, -1, dtype=np.int64)
        out[cov.vertex_id] = labels[cov.vertex_owner]
        return out

    def vertex_owner(self, vertex) -> int:
        """An element covering the given vertex, or -1."""
        index = self.coverage.box.index_of(vertex)
        hits = np.flatnonzero(self.coverage.vertex_id == index)
        return int(self.coverage.vertex_owner[hits[0]]) if hits.size else -1

    def connects(self, source: np.ndarray, target: np.ndarray) -> bool:
        """True if some cluster covers a source vertex and a target vertex."""
        labels = self.vertex_labels()
        a, b = labels[source], labels[target]
        return bool(np.intersect1d(a[a >= 0], b[b >= 0]).size)


def build_metric_clusters(
    fund: Sequence[DiscreteLoop],
    points,
    edges,
    include_special: bool = True,
    box: Optional[LatticeBox] = None,
) -> MetricClusters:
    """
    Join loops whose ranges share a vertex or overlap on a cable.

    Args:
        fund: Fundamental loops
        points: PointLoopLayer or PointLoopBundle list (may be empty)
        edges: EdgeLoopLayer or EdgeLoopSample list (may be empty)
        include_special: Keep the trisection-family edge loops
        box: Box of the layers, inferred from their box ids when omitted

    Returns:
        MetricClusters over [fundamental, point bundles, kept edge loops]

    Raises:
        InconsistentBoxError: if the layers come from different boxes
    """
    fund = list(fund)
    points_given = points is not None and len(points) > 0
    edges_given = edges is not None and len(edges) > 0
    if not fund and not points_given and not edges_given:
        clusters = MetricClusters(0)
        if box is not None:
            clusters.coverage = metric_coverage([], None, None, box)[0]
        return clusters
    box = _resolve_box(box, fund, points, edges)
    coverage, kept = metric_coverage(fund, points, edges, box, include_special)
    clusters = MetricClusters.from_pairs(coverage.n_elements, coverage.union_pairs())
    clusters.coverage = coverage
    clusters.n_fundamental = len(fund)
    clusters.point_vertices = _points_as_arrays(box, points)[0]
    clusters.n_points = clusters.point_vertices.size
    clusters.kept_edge_loops = kept
    return clusters


def discrete_loop_clusters(box: LatticeBox, loops: Sequence[DiscreteLoop]) -> ClusterSet:
    """
    Vertex clusters of discrete loop percolation.

    An edge is open iff some fundamental loop traverses it.
    """
    if loops:
        pairs = np.concatenate([np.stack([loop.vertices[:-1], loop.vertices[1:]], axis=1) for loop in loops])
    else:
        pairs = np.zeros((0, 2), dtype=np.int64)
    return ClusterSet.from_pairs(box.size, pairs)


def occupation_field(box: LatticeBox, fund: Sequence[DiscreteLoop], points: Optional[PointLoopLayer]) -> np.ndarray:
    """Total time spent at each vertex by all loops; edge loops never reach vertices."""
    total = np.zeros(box.size) if points is None else points.local_time.copy()
    for loop in fund:
        total += np.bincount(loop.visits, weights=loop.holdings, minlength=box.size)
    return total


# ---------------------------------------------------------------------------
# Experiments on the layers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RemovalResult:
    """Paired estimates with and without the trisection family."""

    p_full: float
    p_removed: float
    se_full: float
    se_removed: float
    difference: float
    se_difference: float
    ci_lo: float
    ci_hi: float
    replicas: int
    full: np.ndarray = field(repr=False)
    removed: np.ndarray = field(repr=False)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "p_full": self.p_full,
            "p_removed": self.p_removed,
            "se_full": self.se_full,
            "se_removed": self.se_removed,
            "difference": self.difference,
            "se_difference": self.se_difference,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "replicas": self.replicas,
        }


def _removal_replica(box: LatticeBox, n: int, N: int, alpha: float, eta: float,
                     stream: RngStream) -> Tuple[bool, bool]:
    layers = sample_layers(box, alpha, eta, stream)
    source = np.flatnonzero(box.sup_norm <= n)
    target = np.flatnonzero(box.sup_norm == N)
    full = build_metric_clusters(layers.fundamental, layers.points, layers.edges, True, box)
    removed = build_metric_clusters(layers.fundamental, layers.points, layers.edges, False, box)
    return full.connects(source, target), removed.connects(source, target)


def removal_experiment(
    n: int,
    N: int,
    eta: float,
    replicas: int,
    rng: RngStream,
    alpha: float = 0.5,
    margin: float = 1.0,
    d: int = 3,
    n_jobs: int = 1,
    batch_size: int = RUN_CONFIG["batch_size"],
    n_boot: int = SCALING_CONFIG["n_boot"],
    progress: bool = False,
) -> RemovalResult:
    """
    Crossing probability of B(n) to the sphere of radius N with and without
    the trisection family, on shared replicas.

    Args:
        n: Inner radius
        N: Outer radius, at least 4n
        eta: Edge-loop cutoff, at most d/3
        replicas: Number of replicas, at least 100
        rng: Random stream
        alpha: Soup intensity
        margin: Killing box radius as a multiple of N
        d: Dimension
        n_jobs: joblib worker count
        batch_size: Replicas per joblib task
        n_boot: Bootstrap resamples for the paired difference
        progress: Show a progress bar

    Returns:
        RemovalResult with paired standard errors and a bootstrap interval
    """
    if N < 4 * n:
        raise PreconditionError(f"removal needs N >= 4n, got n={n}, N={N}")
    _check_eta(eta, d, special_family=True)
    if replicas < GFF_CONFIG["min_replicas"]:
        raise ReplicaUnderflowError(f"removal needs at least {GFF_CONFIG['min_replicas']} replicas, got {replicas}")
    box = build_box(d, enclosing_radius(N, margin))
    task = partial(_removal_replica, box, n, N, alpha, eta)
    results = run_replicas(task, rng, replicas, n_jobs=n_jobs, batch_size=batch_size,
                           progress=progress, desc=f"removal n={n} N={N}")
    full = np.array([r[0] for r in results], dtype=float)
    removed = np.array([r[1] for r in results], dtype=float)
    diff = full - removed
    boot_gen = rng.child("bootstrap").generator()
    picks = boot_gen.integers(0, replicas, size=(n_boot, replicas))
    boot = diff[picks].mean(axis=1)
    level = 100.0 * (1.0 - SCALING_CONFIG["ci_level"]) / 2.0
    ci_lo, ci_hi = np.percentile(boot, [level, 100.0 - level])
    return RemovalResult(
        float(full.mean()), float(removed.mean()),
        float(full.std() / math.sqrt(replicas)), float(removed.std() / math.sqrt(replicas)),
        float(diff.mean()), float(diff.std() / math.sqrt(replicas)),
        float(ci_lo), float(ci_hi), replicas, full, removed,
    )


def _percolation_replica(box: LatticeBox, N: int, alpha: float, stream: RngStream) -> bool:
    loops = sample_fundamental_loops(box, None, alpha, stream)
    labels = discrete_loop_clusters(box, loops).labels()
    target = labels[box.sup_norm == N]
    return bool(np.isin(labels[box.origin_index], target))


def loop_percolation_estimate(
    N: int,
    replicas: int,
    rng: RngStream,
    alpha: float = 0.5,
    margin: float = GFF_CONFIG["margin"],
    d: int = 3,
    n_jobs: int = 1,
    batch_size: int = RUN_CONFIG["batch_size"],
) -> ConnectivityEstimate:
    """
    One-arm probability of discrete loop percolation at intensity alpha.
    """
    if replicas < GFF_CONFIG["min_replicas"]:
        raise ReplicaUnderflowError(f"loop percolation needs at least {GFF_CONFIG['min_replicas']} replicas")
    box = build_box(d, enclosing_radius(N, margin))
    hits = run_replicas(partial(_percolation_replica, box, N, alpha), rng, replicas,
                        n_jobs=n_jobs, batch_size=batch_size)
    return binomial_estimate(int(np.sum(hits)), replicas)


def _occupation_replica(box: LatticeBox, alpha: float, stream: RngStream) -> np.ndarray:
    layers = sample_layers(box, alpha, None, stream)
    return occupation_field(box, layers.fundamental, layers.points)


def occupation_samples(box: LatticeBox, alpha: float, replicas: int, rng: RngStream,
                       n_jobs: int = 1, batch_size: int = RUN_CONFIG["batch_size"]) -> np.ndarray:
    """Occupation fields of independent replicas, shape (replicas, interior size)."""
    rows = run_replicas(partial(_occupation_replica, box, alpha), rng, replicas,
                        n_jobs=n_jobs, batch_size=batch_size)
    return np.vstack(rows) if rows else np.zeros((0, box.size))


# ---------------------------------------------------------------------------
# Staged exploration
# ---------------------------------------------------------------------------

def stage_radii(n: int, c_dagger: float, count: int) -> np.ndarray:
    """
    Radii r_k = c_dagger^k n for k = 0..count-1.

    Raises:
        PreconditionError: if the schedule does not increase
    """
    radii = float(n) * float(c_dagger) ** np.arange(count)
    _check_radii(radii)
    return radii


def _check_radii(radii: np.ndarray) -> None:
    if radii.size == 0 or np.any(np.diff(radii) <= 0):
        raise PreconditionError("the radii schedule must be strictly increasing")


@dataclass(frozen=True, eq=False)
class PartialCluster:
    """Snapshot of the exploration after stage i."""

    stage: int
    radius: float
    elements: np.ndarray
    vertices: np.ndarray
    extent: float
    i_plus: Optional[int]


def partial_cluster(
    layers: LoopLayers,
    i: int,
    radii: Sequence[float],
    include_special: bool = True,
    start: Optional[np.ndarray] = None,
) -> PartialCluster:
    """
    Explore the cluster of B(n) using only intersections inside B(r_{2i}).

    The exploration starts from every element touching the ball B(r_0), or
    from the given start elements, and adds every element whose range meets
    the current cluster at a vertex or on a cable lying in B(r_{2i}), until
    nothing changes.

    Args:
        layers: Sampled loop layers
        i: Stage index
        radii: Strictly increasing schedule r_0 = n, r_1, ...
        include_special: Keep the trisection family
        start: Optional element ids to start from

    Returns:
        PartialCluster with its covered vertices, extent and next stage i_plus
    """
    radii = np.asarray(radii, dtype=float)
    _check_radii(radii)
    if not 0 <= 2 * i < radii.size:
        raise PreconditionError(f"stage {i} needs radius index {2 * i} in a schedule of {radii.size}")
    box = layers.box
    n, radius = radii[0], radii[2 * i]
    coverage, _ = metric_coverage(layers.fundamental, layers.points, layers.edges, box, include_special)

    vertex_sup = box.sup_norm[coverage.vertex_id]
    edge_ends = box.edges[coverage.interval_edge] if coverage.interval_edge.size else np.zeros((0, 2), dtype=np.int64)
    edge_sup = box.sup_norm[edge_ends].max(axis=1) if edge_ends.size else np.zeros(0)

    pairs = coverage.union_pairs(vertex_sup <= radius, edge_sup <= radius)
    labels = ClusterSet.from_pairs(coverage.n_elements, pairs).labels()
    if start is None:
        start = np.union1d(coverage.vertex_owner[vertex_sup <= n], coverage.interval_owner[edge_sup <= n])
    start = np.asarray(start, dtype=np.int64)
    members = np.flatnonzero(np.isin(labels, labels[start])) if start.size else np.zeros(0, dtype=np.int64)

    inner = np.flatnonzero(box.sup_norm <= n)
    touched = coverage.vertex_id[np.isin(coverage.vertex_owner, members)]
    vertices = np.union1d(inner, touched)
    extents = coverage.element_extent()
    extent = float(max(extents[members].max() if members.size else 0.0, n))

    i_plus = None
    for j in range(i + 1, (radii.size + 1) // 2 + 1):
        if 2 * j - 1 < radii.size and radii[2 * j - 1] > extent:
            i_plus = j
            break
    return PartialCluster(i, float(radius), members, vertices, extent, i_plus)


# ---------------------------------------------------------------------------
# Rooted long loops for the matching diagnostic
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RootedLatticeLoop:
    """A rooted lattice loop with its continuous-time path."""

    root: Tuple[int, ...]
    path: Any
    loop_id: int


def _duration_table(d: int, t_lo: float, t_hi: float) -> Tuple[np.ndarray, np.ndarray]:
    grid = np.geomspace(t_lo, t_hi, LOOP_CONFIG["rooted_grid"])
    density = free_kernel_1d(grid, 0, d) ** d
    # integrating q_t / t dt in log t
    cumulative = integrate.cumulative_trapezoid(density, np.log(grid), initial=0.0)
    return grid, cumulative


def sample_rooted_lattice_loops(
    N: int,
    r: float,
    theta: float,
    alpha: float,
    t_max: float,
    rng: RandomSource,
    d: int = 3,
) -> List[RootedLatticeLoop]:
    """
    Sample rooted loops of the discrete soup with more than d N^theta jumps.

    Roots are the lattice points of B(rN); durations follow t^-1 q_t(0,0) on
    [t_lo, t_max d N^2] where t_lo = d N^theta / 4, and paths are free-mode
    bridges.

    Args:
        N: Lattice scale
        r: Root radius in rescaled units
        theta: Jump-count exponent
        alpha: Soup intensity
        t_max: Largest rescaled duration
        rng: Random stream or generator
        d: Dimension

    Returns:
        Kept loops in sampling order
    """
    gen = as_generator(rng)
    threshold = d * N ** theta
    t_lo = LOOP_CONFIG["rooted_t_lo_factor"] * threshold
    t_hi = t_max * d * N * N
    if not t_hi > t_lo:
        return []
    grid, cumulative = _duration_table(d, t_lo, t_hi)
    radius = int(math.floor(r * N))
    n_roots = (2 * radius + 1) ** d
    count = int(gen.poisson(alpha * n_roots * cumulative[-1]))
    box = build_box(d, max(radius, 1), FREE)
    loops: List[RootedLatticeLoop] = []
    for _ in range(count):
        root = tuple(int(c) for c in gen.integers(-radius, radius + 1, size=d))
        t = float(np.interp(gen.random() * cumulative[-1], cumulative, grid))
        path = sample_ct_bridge(box, root, root, t, gen)
        if path.n_jumps > threshold:
            loops.append(RootedLatticeLoop(root, path, len(loops)))
    logger.debug("rooted lattice loops N=%d: %d proposed, %d kept", N, count, len(loops))
    return loops


# ---------------------------------------------------------------------------
# JSON-lines records
# ---------------------------------------------------------------------------

def layer_records(layers: LoopLayers) -> List[Dict[str, Any]]:
    """One JSON-ready record per loop, point bundle and edge loop."""
    box = layers.box
    version = LOOP_CONFIG["loop_schema_version"]
    records = []
    for loop in layers.fundamental:
        records.append({
            "schema_version": version, "layer": FUNDAMENTAL, "box_id": box.box_id, "loop_id": loop.loop_id,
            "vertices": box.coords[loop.vertices].tolist(), "holdings": loop.holdings.tolist(),
            "duration": loop.duration,
        })
    if layers.points is not None:
        for i, bundle in enumerate(layers.points):
            records.append({
                "schema_version": version, "layer": POINT, "box_id": box.box_id, "loop_id": i,
                "vertex": list(bundle.vertex), "local_time": bundle.total_local_time,
                "reaches": list(bundle.reaches), "duration": bundle.total_local_time,
            })
    if layers.edges is not None:
        for i, sample in enumerate(layers.edges):
            lower, upper = box.edges[sample.edge]
            records.append({
                "schema_version": version, "layer": EDGE, "box_id": box.box_id, "loop_id": i,
                "edge": [box.coords[lower].tolist(), box.coords[upper].tolist()],
                "lo": sample.lo, "hi": sample.hi, "duration": sample.duration,
                "special": sample.in_special_family,
            })
    return records


def rooted_loop_records(loops: Sequence[RootedLatticeLoop], N: int) -> List[Dict[str, Any]]:
    version = LOOP_CONFIG["loop_schema_version"]
    return [{
        "schema_version": version, "layer": ROOTED, "N": N, "loop_id": loop.loop_id,
        "root": list(loop.root), "duration": loop.path.duration,
        "vertices": loop.path.vertices.tolist(), "jump_times": loop.path.jump_times.tolist(),
    } for loop in loops]


def check_loop_schema(records: Iterable[Dict[str, Any]]) -> None:
    """Raise SchemaMismatchError unless every record carries the lattice loop schema."""
    for record in records:
        if record.get("schema_version") != LOOP_CONFIG["loop_schema_version"]:
            raise SchemaMismatchError(
                f"lattice loop record has schema {record.get('schema_version')!r}, "
                f"expected {LOOP_CONFIG['loop_schema_version']}"
            )


if __name__ == "__main__":
    # Example usage
    box = build_box(3, 3)
    layers = sample_layers(box, 0.5, 1.0, RngStream(3))
    clusters = build_metric_clusters(layers.fundamental, layers.points, layers.edges, box=box)
    print(f"{len(layers.fundamental)} fundamental loops, {len(layers.edges)} edge loops, "
          f"{clusters.n_clusters} clusters")
    print(f"edge-loop mass at eta=1: {edge_loop_mass(1.0):.4f}, trisection mass: {special_family_mass():.4f}")
