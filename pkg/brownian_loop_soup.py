"""
Brownian loop soup in R^3

This module samples the Brownian loop soup in a finite window with a
diameter cutoff, joins loops into clusters at a hit tolerance, estimates the
probability that the soup connects two concentric spheres, and splits
annulus-crossing loops into their alternating crossing paths.

Loops are polylines built by midpoint bridge refinement; every coordinate
has variance 1 per unit time.
"""

import math
import logging
from dataclasses import dataclass, field
from functools import cached_property, partial
from typing import List, Dict, Any, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, stats
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist

try:
    from scipy.spatial import QhullError
except ImportError:  # scipy < 1.8
    from scipy.spatial.qhull import QhullError

from cluster_set import ClusterSet
from config import BROWNIAN_CONFIG, GFF_CONFIG, RUN_CONFIG
from errors import PreconditionError, ReplicaUnderflowError, SchemaMismatchError
from gff_metric_graph import ConnectivityEstimate, binomial_estimate
from lattice_core import RngStream, as_generator, run_replicas

logger = logging.getLogger(__name__)

RandomSource = Union[RngStream, np.random.Generator]

# Neighbour offsets of a cell in the 3x3x3 block around it
_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)

_QUERY_CHUNK = 2048


@dataclass(frozen=True)
class SoupWindow:
    """
    The finite part of the soup that is sampled.

    Loops are rooted uniformly in the ball of radius root_radius with
    durations in [t_min, t_max]; loops of diameter below delta are dropped.
    Polylines use time step `step`, at most max_points points per loop, and
    two loops meet when their polylines come within rho_hit.
    """

    observation_radius: float
    root_radius: float
    t_min: float
    t_max: float
    delta: float
    step: float
    rho_hit: float
    max_points: int = BROWNIAN_CONFIG["max_loop_points"]

    def __post_init__(self):
        if not self.t_min > 0:
            raise PreconditionError(f"t_min must be positive, got {self.t_min}")
        if not self.t_max > self.t_min:
            raise PreconditionError(f"empty duration range [{self.t_min}, {self.t_max}]")
        if not 0 < self.rho_hit < self.delta / 10.0:
            raise PreconditionError(f"rho_hit must lie in (0, delta/10), got {self.rho_hit} for delta {self.delta}")
        if not 0 < self.step <= self.t_min / 20.0 * (1.0 + 1e-12):
            raise PreconditionError(f"step must lie in (0, t_min/20], got {self.step}")
        if not self.root_radius >= 2.0 * self.observation_radius:
            raise PreconditionError("root radius must be at least twice the observation radius")
        if self.max_points < 3:
            raise PreconditionError("loops need at least 3 polyline points")

    @classmethod
    def from_cutoff(
        cls,
        delta: float,
        observation_radius: float = BROWNIAN_CONFIG["observation_radius"],
        root_factor: float = BROWNIAN_CONFIG["root_factor"],
        rho_hit: Optional[float] = None,
        step: Optional[float] = None,
        max_points: int = BROWNIAN_CONFIG["max_loop_points"],
    ) -> "SoupWindow":
        """
        Build the default window for a diameter cutoff.

        Durations run from (delta/10)^2/3 to (4 observation_radius)^2, the
        step is t_min/20 and the hit tolerance defaults to delta/20.
        """
        t_min = (delta / 10.0) ** 2 / 3.0
        return cls(
            observation_radius=observation_radius,
            root_radius=root_factor * observation_radius,
            t_min=t_min,
            t_max=(4.0 * observation_radius) ** 2,
            delta=delta,
            step=t_min / 20.0 if step is None else step,
            rho_hit=delta / 20.0 if rho_hit is None else rho_hit,
            max_points=max_points,
        )

    def scaled(self, factor: float) -> "SoupWindow":
        """The same window after Brownian scaling of space by factor."""
        f2 = factor * factor
        return SoupWindow(self.observation_radius * factor, self.root_radius * factor, self.t_min * f2,
                          self.t_max * f2, self.delta * factor, self.step * f2, self.rho_hit * factor,
                          self.max_points)

    def with_cutoffs(self, delta: Optional[float] = None, rho_hit: Optional[float] = None) -> "SoupWindow":
        """Copy with a new delta or rho_hit, keeping durations valid for the smaller cutoff."""
        delta = self.delta if delta is None else delta
        rho_hit = self.rho_hit if rho_hit is None else rho_hit
        t_min = min(self.t_min, (delta / 10.0) ** 2 / 3.0)
        return SoupWindow(self.observation_radius, self.root_radius, t_min, self.t_max, delta,
                          min(self.step, t_min / 20.0), rho_hit, self.max_points)

    @property
    def root_volume(self) -> float:
        return 4.0 / 3.0 * math.pi * self.root_radius ** 3

    @property
    def short_split(self) -> float:
        """Durations below this use the reaching-event sampler."""
        return min(max(self.delta ** 2, self.t_min), self.t_max)


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def point_diameter(points: np.ndarray) -> float:
    """Largest pairwise distance, computed on the convex hull when it exists."""
    if len(points) < 2:
        return 0.0
    if len(points) > 16:
        try:
            points = points[ConvexHull(points).vertices]
        except (QhullError, ValueError):
            pass
    return float(pdist(points).max())


def segment_point_distances(p0: np.ndarray, p1: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Distance from q to every segment [p0, p1]."""
    d = p1 - p0
    length2 = np.einsum("ij,ij->i", d, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(length2 > 0, np.einsum("ij,ij->i", q - p0, d) / length2, 0.0)
    s = np.clip(s, 0.0, 1.0)
    return np.linalg.norm(p0 + d * s[:, None] - q, axis=1)


def segment_distances(p0: np.ndarray, p1: np.ndarray, q0: np.ndarray, q1: np.ndarray) -> np.ndarray:
    """
    Exact distances between paired segments [p0, p1] and [q0, q1].

    Closest points are found by clamping the unconstrained solution to the
    unit square, as in the usual segment-segment algorithm.
    """
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    b = np.einsum("ij,ij->i", d1, d2)
    c = np.einsum("ij,ij->i", d1, r)
    f = np.einsum("ij,ij->i", d2, r)
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-12 * a * e, np.clip((b * f - c * e) / denom, 0.0, 1.0), 0.0)
        s_point = np.where(a > 0, np.clip(-c / a, 0.0, 1.0), 0.0)
        s = np.where(e > 0, s, s_point)
        t = np.where(e > 0, (b * s + f) / e, 0.0)
        s = np.where(t < 0, s_point, s)
        s = np.where(t > 1, np.where(a > 0, np.clip((b - c) / a, 0.0, 1.0), 0.0), s)
    t = np.clip(t, 0.0, 1.0)
    return np.linalg.norm(p0 + d1 * s[:, None] - q0 - d2 * t[:, None], axis=1)


class SegmentHash:
    """
    Uniform grid over segment midpoints.

    With a cell size of at least rho plus the longest segment, any segment
    within rho of a query segment has its midpoint in the 27 cells around
    the query midpoint.
    """

    def __init__(self, starts: np.ndarray, ends: np.ndarray, cell: float):
        self.starts = starts
        self.ends = ends
        self.cell = float(cell)
        keys = self._keys(starts, ends)
        self._origin = keys.min(axis=0) - 1
        self._span = keys.max(axis=0) - self._origin + 2
        codes = self._encode(keys - self._origin)
        self._order = np.argsort(codes, kind="stable")
        self._codes = codes[self._order]

    def __len__(self):
        return self.starts.shape[0]

    def _keys(self, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
        return np.floor(0.5 * (starts + ends) / self.cell).astype(np.int64)

    def _encode(self, shifted: np.ndarray) -> np.ndarray:
        return (shifted[..., 0] * self._span[1] + shifted[..., 1]) * self._span[2] + shifted[..., 2]

    def candidates(self, starts: np.ndarray, ends: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Candidate pairs between query segments and hashed segments.

        Returns:
            (query index, hashed segment index) arrays of equal length
        """
        shifted = self._keys(starts, ends)[:, None, :] + _OFFSETS[None, :, :] - self._origin
        valid = np.all((shifted >= 0) & (shifted < self._span), axis=2)
        query = np.broadcast_to(np.arange(starts.shape[0])[:, None], valid.shape)[valid]
        codes = self._encode(shifted[valid])
        left = np.searchsorted(self._codes, codes, side="left")
        right = np.searchsorted(self._codes, codes, side="right")
        counts = right - left
        total = int(counts.sum())
        if total == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        run_start = np.repeat(left - np.cumsum(counts) + counts, counts)
        positions = run_start + np.arange(total)
        return np.repeat(query, counts), self._order[positions]


def _segments_within(a_starts, a_ends, b_starts, b_ends, rho: float) -> bool:
    lengths = np.concatenate([np.linalg.norm(a_ends - a_starts, axis=1), np.linalg.norm(b_ends - b_starts, axis=1)])
    grid = SegmentHash(b_starts, b_ends, rho + float(lengths.max()))
    for start in range(0, a_starts.shape[0], _QUERY_CHUNK):
        qs, qe = a_starts[start:start + _QUERY_CHUNK], a_ends[start:start + _QUERY_CHUNK]
        qi, si = grid.candidates(qs, qe)
        if qi.size and np.any(segment_distances(qs[qi], qe[qi], b_starts[si], b_ends[si]) <= rho):
            return True
    return False


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BrownianLoop:
    """
    A Brownian loop as a closed polyline.

    samples[0] = samples[-1] = root and times runs from 0 to duration.
    """

    root: np.ndarray
    duration: float
    samples: np.ndarray = field(repr=False)
    times: np.ndarray = field(repr=False)
    loop_id: int = 0

    @cached_property
    def diameter(self) -> float:
        return point_diameter(self.samples)

    @cached_property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.samples.min(axis=0), self.samples.max(axis=0)

    @property
    def starts(self) -> np.ndarray:
        return self.samples[:-1]

    @property
    def ends(self) -> np.ndarray:
        return self.samples[1:]

    @cached_property
    def radial_range(self) -> Tuple[float, float]:
        """Smallest and largest distance to the origin along the polyline."""
        origin = np.zeros(3)
        rmin = float(segment_point_distances(self.starts, self.ends, origin).min())
        return rmin, float(np.linalg.norm(self.samples, axis=1).max())

    def meets_sphere(self, radius: float) -> bool:
        rmin, rmax = self.radial_range
        return rmin <= radius <= rmax


def brownian_bridge(root: np.ndarray, duration: float, levels: int, rng: RandomSource) -> Tuple[np.ndarray, np.ndarray]:
    """
    Brownian bridge from root back to root by midpoint refinement.

    Each level fills the midpoints of the current intervals; the midpoint of
    an interval of length tau has conditional standard deviation sqrt(tau)/2.

    Args:
        root: Start and end point
        duration: Bridge duration
        levels: Number of halvings, giving 2**levels steps
        rng: Random stream or generator

    Returns:
        (times, points) with 2**levels + 1 rows
    """
    gen = as_generator(rng)
    root = np.asarray(root, dtype=float)
    n = 2 ** int(levels)
    path = np.zeros((n + 1, root.size))
    step = n
    while step > 1:
        half = step // 2
        left = np.arange(0, n, step)
        sd = 0.5 * math.sqrt(duration * step / n)
        path[left + half] = 0.5 * (path[left] + path[left + step]) + sd * gen.standard_normal((left.size, root.size))
        step = half
    return np.linspace(0.0, duration, n + 1), root + path


def _hit_probability(z0: np.ndarray, z1: np.ndarray, level: float, dt: np.ndarray) -> np.ndarray:
    """P(a bridge from z0 to z1 over dt reaches level), the reflection formula."""
    below = (z0 < level) & (z1 < level)
    with np.errstate(over="ignore"):
        p = np.exp(-2.0 * (level - z0) * (level - z1) / dt)
    return np.where(below, p, 1.0)


def _reaches(z: np.ndarray, level: float, dt: np.ndarray, gen: np.random.Generator) -> bool:
    p = _hit_probability(z[:-1], z[1:], level, dt)
    return bool(np.any(gen.random(p.size) < p))


class BrownianSoupSampler:
    """
    Poisson sampler of the soup restricted to a window.

    Loops with duration in [short_split, t_max] are drawn directly. Shorter
    loops are drawn only through the six events "coordinate c reaches root
    plus or minus delta/(2 sqrt 3)", one of which occurs for every loop of
    diameter at least delta; a candidate drawn from event e is kept with
    probability 1/(number of events that occur), which reproduces the
    union of the events exactly.
    """

    def __init__(self, window: SoupWindow, alpha: float):
        if not alpha > 0:
            raise PreconditionError(f"alpha must be positive, got {alpha}")
        self.window = window
        self.alpha = float(alpha)
        self.level = window.delta / (2.0 * math.sqrt(3.0))
        self._base = self.alpha * window.root_volume * (2.0 * math.pi) ** -1.5
        self._max_levels = int(math.floor(math.log2(window.max_points - 1)))

    def expected_raw_count(self) -> float:
        """Mean number of loops in the window before the diameter cutoff."""
        w = self.window
        return self._base * (2.0 / 3.0) * (w.t_min ** -1.5 - w.t_max ** -1.5)

    def long_mass(self) -> float:
        w = self.window
        return self._base * (2.0 / 3.0) * (w.short_split ** -1.5 - w.t_max ** -1.5)

    def _event_range(self) -> Tuple[float, float]:
        w = self.window
        scale = 2.0 * self.level ** 2
        return stats.gamma.cdf(scale / w.short_split, 1.5), stats.gamma.cdf(scale / w.t_min, 1.5)

    def event_mass(self) -> float:
        """Mass of short loops in one reaching event."""
        if self.window.short_split <= self.window.t_min:
            return 0.0
        lo, hi = self._event_range()
        return self._base * (2.0 * self.level ** 2) ** -1.5 * math.gamma(1.5) * (hi - lo)

    def _levels(self, duration: float) -> Tuple[int, bool]:
        need = int(math.ceil(math.log2(max(duration / self.window.step, 1.0))))
        return min(need, self._max_levels), need > self._max_levels

    def _roots(self, count: int, gen: np.random.Generator) -> np.ndarray:
        direction = gen.standard_normal((count, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = self.window.root_radius * gen.random(count) ** (1.0 / 3.0)
        return direction * radius[:, None]

    def _keep(self, root: np.ndarray, points: np.ndarray) -> bool:
        delta = self.window.delta
        if np.linalg.norm(points - root, axis=1).max() >= delta:
            return True
        if np.linalg.norm(points.max(axis=0) - points.min(axis=0)) < delta:
            return False
        return point_diameter(points) >= delta

    def _event_candidate(self, root: np.ndarray, duration: float, levels: int, axis: int, sign: float,
                         gen: np.random.Generator) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        a = self.level
        times, path = brownian_bridge(np.zeros(3), duration, levels, gen)
        dt = np.diff(times)
        # Bridge to 2a, reflected after its first passage at a
        y = path[:, axis] + 2.0 * a * times / duration
        hits = gen.random(dt.size) < _hit_probability(y[:-1], y[1:], a, dt)
        first = int(np.argmax(hits))
        y[first + 1:] = 2.0 * a - y[first + 1:]
        y[-1] = 0.0
        path[:, axis] = sign * y
        occurring = 1
        for c in range(3):
            for s in (1.0, -1.0):
                if c == axis and s == sign:
                    continue
                occurring += _reaches(s * path[:, c], a, dt, gen)
        if gen.random() * occurring >= 1.0:
            return None
        return times, root + path

    def sample(self, rng: RandomSource) -> List["BrownianLoop"]:
        """
        Sample the retained loops of one soup.

        Args:
            rng: Random stream or generator

        Returns:
            Loops of diameter at least delta, numbered in sampling order
        """
        gen = as_generator(rng)
        w = self.window
        loops: List[BrownianLoop] = []
        capped = 0

        n_long = int(gen.poisson(self.long_mass())) if w.short_split < w.t_max else 0
        if n_long:
            hi, lo = w.short_split ** -1.5, w.t_max ** -1.5
            durations = (lo + gen.random(n_long) * (hi - lo)) ** (-2.0 / 3.0)
            for root, duration in zip(self._roots(n_long, gen), durations):
                levels, cut = self._levels(duration)
                capped += cut
                times, points = brownian_bridge(root, duration, levels, gen)
                if self._keep(root, points):
                    loops.append(BrownianLoop(root, float(duration), points, times, len(loops)))

        event_mass = self.event_mass()
        n_events = int(gen.poisson(6.0 * event_mass)) if event_mass > 0 else 0
        if n_events:
            f_lo, f_hi = self._event_range()
            u = stats.gamma.ppf(f_lo + gen.random(n_events) * (f_hi - f_lo), 1.5)
            durations = np.clip(2.0 * self.level ** 2 / u, w.t_min, w.short_split)
            events = gen.integers(0, 6, size=n_events)
            for root, duration, event in zip(self._roots(n_events, gen), durations, events):
                levels, cut = self._levels(duration)
                candidate = self._event_candidate(root, float(duration), levels, int(event) // 2,
                                                  1.0 if event % 2 == 0 else -1.0, gen)
                if candidate is None:
                    continue
                capped += cut
                times, points = candidate
                if self._keep(root, points):
                    loops.append(BrownianLoop(root, float(duration), points, times, len(loops)))

        if capped:
            logger.warning("%d loops hit the %d-point polyline cap", capped, w.max_points)
        logger.debug("soup window: %d long proposals, %d event proposals, %d retained", n_long, n_events, len(loops))
        return loops


def sample_brownian_soup(window: SoupWindow, alpha: float, rng: RandomSource) -> List[BrownianLoop]:
    """Sample the loops of diameter at least window.delta rooted in the window."""
    return BrownianSoupSampler(window, alpha).sample(rng)


# ---------------------------------------------------------------------------
# Intersections and clusters
# ---------------------------------------------------------------------------

def _segments_near_box(loop: BrownianLoop, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    seg_lo = np.minimum(loop.starts, loop.ends)
    seg_hi = np.maximum(loop.starts, loop.ends)
    return np.flatnonzero(np.all((seg_lo <= hi) & (seg_hi >= lo), axis=1))


def pairwise_intersect(a: BrownianLoop, b: BrownianLoop, rho: float) -> bool:
    """
    True iff some segment of a comes within rho of some segment of b.

    Args:
        a: First loop
        b: Second loop
        rho: Hit tolerance

    Returns:
        Whether the loops meet at resolution rho
    """
    if not rho > 0:
        raise PreconditionError(f"hit tolerance must be positive, got {rho}")
    if a is b:
        return True
    a_lo, a_hi = a.bounds
    b_lo, b_hi = b.bounds
    if np.any(a_lo > b_hi + rho) or np.any(b_lo > a_hi + rho):
        return False
    ia = _segments_near_box(a, b_lo - rho, b_hi + rho)
    ib = _segments_near_box(b, a_lo - rho, a_hi + rho)
    if ia.size == 0 or ib.size == 0:
        return False
    return _segments_within(a.starts[ia], a.ends[ia], b.starts[ib], b.ends[ib], rho)


class LoopClusters(ClusterSet):
    """Clusters of Brownian loops with their geometric summaries."""

    def __init__(self, n: int):
        super().__init__(n)
        self.loops: List[BrownianLoop] = []

    def cluster_diameter(self, members: np.ndarray) -> float:
        return point_diameter(np.vstack([self.loops[i].samples for i in members]))

    def summarize_loops(self) -> List[Dict[str, Any]]:
        """Per-cluster loop count, point count and Euclidean diameter."""
        return [{
            "loops": int(members.size),
            "points": int(sum(self.loops[i].samples.shape[0] for i in members)),
            "diameter": self.cluster_diameter(members),
        } for members in self.components()]

    def clusters_with_diameter(self, r: float) -> List[np.ndarray]:
        """Member arrays of the clusters of diameter at least r."""
        return [members for members in self.components() if self.cluster_diameter(members) >= r]


def build_clusters_r3(loops: Sequence[BrownianLoop], rho: float) -> LoopClusters:
    """
    Join loops that meet at resolution rho.

    Candidate pairs come from overlapping bounding boxes and are tested in
    order of decreasing combined diameter, skipping pairs already joined.
    """
    if not rho > 0:
        raise PreconditionError(f"hit tolerance must be positive, got {rho}")
    loops = list(loops)
    n = len(loops)
    clusters = LoopClusters(n)
    clusters.loops = loops
    if n < 2:
        return clusters
    lo = np.array([loop.bounds[0] for loop in loops])
    hi = np.array([loop.bounds[1] for loop in loops])
    pairs = []
    for start in range(0, n, 512):
        block = slice(start, min(start + 512, n))
        overlap = np.all((lo[block, None, :] <= hi[None, :, :] + rho) & (lo[None, :, :] <= hi[block, None, :] + rho), axis=2)
        i, j = np.nonzero(overlap)
        i = i + start
        keep = i < j
        pairs.append(np.stack([i[keep], j[keep]], axis=1))
    pairs = np.concatenate(pairs)
    size = np.linalg.norm(hi - lo, axis=1)
    pairs = pairs[np.argsort(-(size[pairs[:, 0]] + size[pairs[:, 1]]), kind="stable")]
    for i, j in pairs:
        if not clusters.connected(i, j) and pairwise_intersect(loops[i], loops[j], rho):
            clusters.union(i, j)
    return clusters


# ---------------------------------------------------------------------------
# One-arm estimator
# ---------------------------------------------------------------------------

TARGET_RADIUS = 1.0


@dataclass(frozen=True)
class BrownianOneArm:
    """One-arm estimate between the spheres of radius epsilon and 1."""

    epsilon: float
    estimate: ConnectivityEstimate
    single: ConnectivityEstimate
    omitted_mass: float
    delta: float
    rho_hit: float

    def as_dict(self) -> Dict[str, Any]:
        result = self.estimate.as_dict()
        result.update({
            "epsilon": self.epsilon,
            "single_loop": self.single.estimate,
            "single_loop_stderr": self.single.stderr,
            "omitted_mass": self.omitted_mass,
            "delta": self.delta,
            "rho_hit": self.rho_hit,
        })
        return result


def omitted_crossing_mass(window: SoupWindow, alpha: float) -> float:
    """
    Upper bound on the soup mass the window leaves out near the observation ball.

    Loops rooted at distance rho > root_radius reach the observation ball
    only if some coordinate moves by (rho - observation_radius)/sqrt(3),
    which a bridge of duration t does with probability at most
    6 exp(-2 (rho - a)^2 / (3t)). Loops longer than t_max rooted inside the
    root ball are added in full.
    """
    a = window.observation_radius
    base = alpha * (2.0 * math.pi) ** -1.5

    def integrand(t: float, rho: float) -> float:
        reach = min(1.0, 6.0 * math.exp(-2.0 * (rho - a) ** 2 / (3.0 * t)))
        return 4.0 * math.pi * rho * rho * t ** -2.5 * reach

    rho_hi = window.root_radius + 20.0 * math.sqrt(window.t_max)
    outside, _ = integrate.dblquad(integrand, window.root_radius, rho_hi, window.t_min, window.t_max)
    longer = window.root_volume * (2.0 / 3.0) * window.t_max ** -1.5
    return base * (outside + longer)


def _one_arm_replica(window: SoupWindow, alpha: float, epsilon: float, stream: RngStream) -> Tuple[bool, bool]:
    loops = sample_brownian_soup(window, alpha, stream)
    rho = window.rho_hit
    near = [loop for loop in loops if loop.radial_range[0] <= TARGET_RADIUS + rho]
    inner = np.array([loop.meets_sphere(epsilon) for loop in near], dtype=bool)
    outer = np.array([loop.meets_sphere(TARGET_RADIUS) for loop in near], dtype=bool)
    if np.any(inner & outer):
        return True, True
    if not inner.any() or not outer.any():
        return False, False
    labels = build_clusters_r3(near, rho).labels()
    return bool(np.intersect1d(labels[inner], labels[outer]).size), False


def one_arm_q(
    epsilon: float,
    window: SoupWindow,
    replicas: int,
    rng: RngStream,
    alpha: float = 0.5,
    n_jobs: int = 1,
    batch_size: int = RUN_CONFIG["batch_size"],
    progress: bool = False,
) -> BrownianOneArm:
    """
    Probability that a cluster of the cut-off soup meets both the sphere of
    radius epsilon and the unit sphere.

    Args:
        epsilon: Inner radius in (0, 1]
        window: Soup window; delta must be at most epsilon/4
        replicas: Number of soups, at least GFF_CONFIG["min_replicas"]
        rng: Random stream
        alpha: Soup intensity
        n_jobs: joblib worker count
        batch_size: Replicas per joblib task
        progress: Show a progress bar

    Returns:
        BrownianOneArm with the cluster and single-loop estimates
    """
    if not 0 < epsilon <= TARGET_RADIUS:
        raise PreconditionError(f"epsilon must lie in (0, 1], got {epsilon}")
    if window.observation_radius < TARGET_RADIUS:
        raise PreconditionError("the observation radius must be at least 1")
    if window.delta > epsilon / 4.0:
        raise PreconditionError(f"delta {window.delta} exceeds epsilon/4 = {epsilon / 4.0}")
    if replicas < GFF_CONFIG["min_replicas"]:
        raise ReplicaUnderflowError(f"the one-arm estimate needs at least {GFF_CONFIG['min_replicas']} replicas")
    omitted = omitted_crossing_mass(window, alpha)
    if epsilon == TARGET_RADIUS:
        certain = binomial_estimate(replicas, replicas)
        return BrownianOneArm(epsilon, certain, certain, omitted, window.delta, window.rho_hit)

    results = run_replicas(partial(_one_arm_replica, window, alpha, epsilon), rng, replicas,
                           n_jobs=n_jobs, batch_size=batch_size, progress=progress, desc=f"one-arm eps={epsilon:g}")
    estimate = binomial_estimate(sum(r[0] for r in results), replicas)
    single = binomial_estimate(sum(r[1] for r in results), replicas)
    if omitted > BROWNIAN_CONFIG["omitted_mass_ratio"] * max(estimate.estimate, estimate.ci_hi):
        logger.warning("omitted crossing mass %.3g exceeds %.0f%% of q(%g) = %.3g", omitted,
                       100 * BROWNIAN_CONFIG["omitted_mass_ratio"], epsilon, estimate.estimate)
    return BrownianOneArm(epsilon, estimate, single, omitted, window.delta, window.rho_hit)


# ---------------------------------------------------------------------------
# Annulus crossings
# ---------------------------------------------------------------------------

def crosses_annulus(loop: BrownianLoop, r: float, R: float) -> bool:
    rmin, rmax = loop.radial_range
    return rmin <= r and rmax >= R


def count_crossing_loops(loops: Iterable[BrownianLoop], r: float, R: float) -> int:
    """Number of loops meeting both the sphere of radius r and the sphere of radius R."""
    return sum(crosses_annulus(loop, r, R) for loop in loops)


def _crossing_counts_replica(window: SoupWindow, alpha: float, r: float, ratios: Tuple[float, ...],
                             stream: RngStream) -> List[int]:
    loops = sample_brownian_soup(window, alpha, stream)
    return [count_crossing_loops(loops, r, ratio * r) for ratio in ratios]


def crossing_mass(
    window: SoupWindow,
    alpha: float,
    r: float,
    ratios: Sequence[float],
    replicas: int,
    rng: RngStream,
    n_jobs: int = 1,
    batch_size: int = RUN_CONFIG["batch_size"],
) -> Dict[float, Tuple[float, float]]:
    """
    Mean number of retained loops crossing the annuli (r, lambda r).

    Returns:
        Mapping lambda -> (mean count, standard error)
    """
    ratios = tuple(float(x) for x in ratios)
    if not all(x > 1 for x in ratios):
        raise PreconditionError("annulus ratios must exceed 1")
    counts = np.array(run_replicas(partial(_crossing_counts_replica, window, alpha, r, ratios), rng, replicas,
                                   n_jobs=n_jobs, batch_size=batch_size), dtype=float).reshape(replicas, len(ratios))
    se = counts.std(axis=0, ddof=1) / math.sqrt(replicas) if replicas > 1 else np.zeros(len(ratios))
    return {ratio: (float(counts[:, k].mean()), float(se[k])) for k, ratio in enumerate(ratios)}


def refine_crossings(loop: BrownianLoop, radii: Sequence[float], rng: RandomSource,
                     levels: int = BROWNIAN_CONFIG["refine_levels"]) -> BrownianLoop:
    """
    Insert exact bridge midpoints in segments that meet one of the spheres.

    A segment is refined when the sphere radius lies between its smallest
    and largest distance to the origin. Each level halves every such segment.
    """
    gen = as_generator(rng)
    points, times = loop.samples, loop.times
    radii = np.asarray(radii, dtype=float)
    for _ in range(int(levels)):
        starts, ends = points[:-1], points[1:]
        near = segment_point_distances(starts, ends, np.zeros(3))
        far = np.maximum(np.linalg.norm(starts, axis=1), np.linalg.norm(ends, axis=1))
        flagged = np.any((near[:, None] <= radii[None, :]) & (far[:, None] >= radii[None, :]), axis=1)
        idx = np.flatnonzero(flagged)
        if idx.size == 0:
            break
        dt = times[idx + 1] - times[idx]
        mids = 0.5 * (starts[idx] + ends[idx]) + 0.5 * np.sqrt(dt)[:, None] * gen.standard_normal((idx.size, 3))
        points = np.insert(points, idx + 1, mids, axis=0)
        times = np.insert(times, idx + 1, times[idx] + 0.5 * dt)
    return BrownianLoop(loop.root, loop.duration, points, times, loop.loop_id)


@dataclass(frozen=True, eq=False)
class CrossingDecomposition:
    """
    Alternating crossing paths of one loop between the spheres r and R.

    stopping_times[0] is a visit to the r-sphere that follows a visit to the
    R-sphere; odd entries hit the R-sphere, even entries the r-sphere, and
    the last entry closes the loop one period later. paths[2j] is the j-th
    forward crossing (r to R) and paths[2j+1] the j-th backward crossing.
    """

    loop_id: int
    r: float
    R: float
    xi: int
    stopping_times: np.ndarray
    stopping_points: np.ndarray
    paths: List[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def y(self) -> np.ndarray:
        """Starting points of the forward crossings, on the r-sphere."""
        return self.stopping_points[0:-1:2]

    @property
    def z(self) -> np.ndarray:
        """Starting points of the backward crossings, on the R-sphere."""
        return self.stopping_points[1::2]

    def forward(self, j: int) -> np.ndarray:
        return self.paths[2 * j]

    def backward(self, j: int) -> np.ndarray:
        return self.paths[2 * j + 1]

    def polyline(self) -> np.ndarray:
        """The rotated loop rebuilt from its crossing paths."""
        if not self.paths:
            return np.zeros((0, 3))
        return np.vstack([self.paths[0]] + [p[1:] for p in self.paths[1:]])


class _Polyline:
    """A loop unrolled over three periods with per-segment sphere roots."""

    def __init__(self, loop: BrownianLoop):
        p, t, T = loop.samples, loop.times, loop.duration
        self.points = np.vstack([p, p[1:], p[1:]])
        self.times = np.concatenate([t, t[1:] + T, t[1:] + 2 * T])
        self.starts = self.points[:-1]
        self.delta = self.points[1:] - self.starts
        self.a = np.einsum("ij,ij->i", self.delta, self.delta)
        self.b = 2.0 * np.einsum("ij,ij->i", self.starts, self.delta)
        self.c0 = np.einsum("ij,ij->i", self.starts, self.starts)
        self.end_norm = np.linalg.norm(self.points[1:], axis=1)

    def _roots(self, radius: float) -> Tuple[np.ndarray, np.ndarray]:
        disc = self.b ** 2 - 4.0 * self.a * (self.c0 - radius * radius)
        with np.errstate(invalid="ignore", divide="ignore"):
            root = np.sqrt(disc)
            lower = (-self.b - root) / (2.0 * self.a)
            upper = (-self.b + root) / (2.0 * self.a)
        bad = (disc < 0) | (self.a <= 0)
        lower[bad] = np.nan
        upper[bad] = np.nan
        return lower, upper

    def position(self, segment: int, s: float) -> Tuple[float, np.ndarray]:
        time = self.times[segment] + s * (self.times[segment + 1] - self.times[segment])
        return float(time), self.starts[segment] + s * self.delta[segment]

    def outward(self, segment: int, s: float, radius: float) -> Optional[Tuple[int, float]]:
        """First reach of the sphere from inside, at or after (segment, s)."""
        candidates = np.flatnonzero(self.end_norm[segment:] >= radius)
        if candidates.size == 0:
            return None
        k = segment + int(candidates[0])
        if self.c0[k] >= radius * radius and k != segment:
            return k, 0.0
        _, upper = self._roots(radius)
        root = upper[k]
        if not np.isfinite(root):
            return k, 1.0
        return k, float(min(max(root, s if k == segment else 0.0), 1.0))

    def inward(self, segment: int, s: float, radius: float) -> Optional[Tuple[int, float]]:
        """First reach of the sphere from outside, strictly after (segment, s)."""
        lower, _ = self._roots(radius)
        tail = lower[segment:]
        bound = np.zeros(tail.size)
        bound[0] = s
        ok = np.isfinite(tail) & (tail > bound) & (tail <= 1.0)
        inside_start = self.c0[segment:] <= radius * radius
        inside_start[0] = False
        hit = ok | inside_start
        found = np.flatnonzero(hit)
        if found.size == 0:
            return None
        k = segment + int(found[0])
        return (k, 0.0) if inside_start[found[0]] and not ok[found[0]] else (k, float(tail[found[0]]))


def decompose_crossings(loop: BrownianLoop, r: float, R: float) -> CrossingDecomposition:
    """
    Split a loop into alternating crossings of the annulus between r and R.

    The time origin is moved to the first visit of the r-sphere after a
    visit of the R-sphere; from there the loop alternately hits R and r
    until it has gone once around.

    Args:
        loop: Loop polyline
        r: Inner radius
        R: Outer radius

    Returns:
        CrossingDecomposition, with xi = 0 when the loop misses a sphere

    Raises:
        PreconditionError: if r >= R
    """
    if not r < R:
        raise PreconditionError(f"inner radius {r} must be smaller than outer radius {R}")
    if not crosses_annulus(loop, r, R):
        return CrossingDecomposition(loop.loop_id, r, R, 0, np.zeros(0), np.zeros((0, 3)), [])

    line = _Polyline(loop)
    period = loop.duration
    tol = 1e-9 * period
    sigma = (0, 0.0) if line.c0[0] >= R * R else line.outward(0, 0.0, R)
    start = line.inward(*sigma, r)
    positions = [start]
    end_time = line.position(*start)[0] + period
    while True:
        out = line.outward(*positions[-1], R)
        back = line.inward(*out, r) if out is not None else None
        if back is None:
            break
        positions.extend([out, back])
        if line.position(*back)[0] >= end_time - tol:
            break

    stops = [line.position(*pos) for pos in positions]
    times = np.array([t for t, _ in stops])
    times[-1] = end_time
    points = np.array([x for _, x in stops])
    points[-1] = points[0]
    paths = []
    for (k0, _), (k1, _), x0, x1 in zip(positions[:-1], positions[1:], points[:-1], points[1:]):
        paths.append(np.vstack([x0, line.points[k0 + 1:k1 + 1], x1]))
    return CrossingDecomposition(loop.loop_id, r, R, (len(positions) - 1) // 2, times, points, paths)


def soup_kappa(loops: Iterable[BrownianLoop], r: float, R: float, rng: RandomSource,
               levels: int = BROWNIAN_CONFIG["refine_levels"]) -> int:
    """Total number of crossings of the annulus by the soup."""
    gen = as_generator(rng)
    total = 0
    for loop in loops:
        if crosses_annulus(loop, r, R):
            total += decompose_crossings(refine_crossings(loop, (r, R), gen, levels), r, R).xi
    return total


def _kappa_replica(window: SoupWindow, alpha: float, r: float, R: float, stream: RngStream) -> int:
    loops = sample_brownian_soup(window, alpha, stream.child("soup"))
    return soup_kappa(loops, r, R, stream.child("refine"))


def kappa_samples(window: SoupWindow, alpha: float, r: float, R: float, replicas: int, rng: RngStream,
                  n_jobs: int = 1, batch_size: int = RUN_CONFIG["batch_size"]) -> np.ndarray:
    """Soup-total crossing counts of independent replicas."""
    return np.array(run_replicas(partial(_kappa_replica, window, alpha, r, R), rng, replicas,
                                 n_jobs=n_jobs, batch_size=batch_size), dtype=np.int64)


def kappa_tail(kappas: np.ndarray, l_max: Optional[int] = None) -> np.ndarray:
    """
    Empirical tail P(kappa >= l) for l = 1..l_max.
    """
    kappas = np.asarray(kappas)
    if l_max is None:
        l_max = max(int(kappas.max()) if kappas.size else 0, 1)
    return np.array([np.mean(kappas >= l) for l in range(1, l_max + 1)])


# ---------------------------------------------------------------------------
# Rooted long loops for the matching diagnostic
# ---------------------------------------------------------------------------

def rooted_loop_mass(r: float, t_lo: float, t_hi: float, alpha: float) -> float:
    """
    Soup mass of loops rooted in the cube [-r, r]^3 with duration in [t_lo, t_hi].

    The rooted measure has density alpha t^-1 (2 pi t)^-3/2 dt dx.
    """
    if not 0 < t_lo < t_hi:
        return 0.0
    return alpha * (2.0 * r) ** 3 * (2.0 * math.pi) ** -1.5 * (2.0 / 3.0) * (t_lo ** -1.5 - t_hi ** -1.5)


def sample_rooted_brownian_loops(
    r: float,
    t_lo: float,
    t_hi: float,
    alpha: float,
    levels: int,
    rng: RandomSource,
) -> List[BrownianLoop]:
    """
    Sample the soup loops rooted in the cube [-r, r]^3 with durations in [t_lo, t_hi].

    Durations are drawn by inverting the t^-5/2 tail; paths are bridges with
    2**levels steps.

    Args:
        r: Half side of the root cube
        t_lo: Shortest duration
        t_hi: Longest duration
        alpha: Soup intensity
        levels: Bridge refinement levels
        rng: Random stream or generator

    Returns:
        Loops numbered in sampling order
    """
    gen = as_generator(rng)
    count = int(gen.poisson(rooted_loop_mass(r, t_lo, t_hi, alpha)))
    lo, hi = t_lo ** -1.5, t_hi ** -1.5
    loops = []
    for k in range(count):
        root = gen.uniform(-r, r, size=3)
        duration = float((lo - gen.random() * (lo - hi)) ** (-2.0 / 3.0))
        times, points = brownian_bridge(root, duration, levels, gen)
        loops.append(BrownianLoop(root, duration, points, times, k))
    return loops


# ---------------------------------------------------------------------------
# JSON-lines records
# ---------------------------------------------------------------------------

def loop_records(loops: Iterable[BrownianLoop]) -> List[Dict[str, Any]]:
    """One JSON-ready record per loop."""
    version = BROWNIAN_CONFIG["loop_schema_version"]
    return [{
        "schema_version": version,
        "layer": "brownian",
        "loop_id": loop.loop_id,
        "root": loop.root.tolist(),
        "duration": loop.duration,
        "times": loop.times.tolist(),
        "samples": loop.samples.tolist(),
    } for loop in loops]


def loops_from_records(records: Iterable[Dict[str, Any]]) -> List[BrownianLoop]:
    """
    Rebuild loops from their records.

    Raises:
        SchemaMismatchError: if a record has another schema version
    """
    loops = []
    for record in records:
        if record.get("schema_version") != BROWNIAN_CONFIG["loop_schema_version"] or record.get("layer") != "brownian":
            raise SchemaMismatchError(
                f"Brownian loop record has schema {record.get('schema_version')!r} "
                f"and layer {record.get('layer')!r}"
            )
        loops.append(BrownianLoop(np.asarray(record["root"], dtype=float), float(record["duration"]),
                                  np.asarray(record["samples"], dtype=float), np.asarray(record["times"], dtype=float),
                                  int(record["loop_id"])))
    return loops


if __name__ == "__main__":
    # Example usage
    window = SoupWindow.from_cutoff(0.25, max_points=257)
    loops = sample_brownian_soup(window, 0.5, RngStream(1))
    clusters = build_clusters_r3(loops, window.rho_hit)
    print(f"{len(loops)} loops of diameter >= {window.delta}, {clusters.n_clusters} clusters")
    print(f"loops crossing (0.25, 1): {count_crossing_loops(loops, 0.25, 1.0)}")
