"""
Lattice core for the critical loop-soup laboratory

This module implements the finite-box geometry of Z^d, the Green's function of
the continuous-time simple random walk killed on the boundary of the box, the
walk's heat kernel, continuous-time bridge sampling, and the random-stream
plumbing every sampler consumes. The walk jumps at total rate 1 to a uniformly
chosen neighbour, so Green's functions are expected occupation times.
"""

import math
import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import List, Any, Callable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import special, stats
from joblib import Parallel, delayed
from tqdm import tqdm

from config import LATTICE_CONFIG, RUN_CONFIG
from errors import (
    UnsupportedParametersError,
    SizeCapExceededError,
    SingularSystemError,
    FactorizationError,
    KernelRangeError,
    PreconditionError,
)

try:
    from sksparse.cholmod import cholesky as cholmod_cholesky
except ImportError:
    cholmod_cholesky = None

logger = logging.getLogger(__name__)

DIRICHLET = "dirichlet"
FREE = "free"
BOUNDARY_MODES = (DIRICHLET, FREE)

_MASK64 = (1 << 64) - 1

Vertex = Union[Sequence[int], np.ndarray]


def _token(part: Any) -> str:
    if isinstance(part, (bool, np.bool_)):
        return f"b{int(part)}"
    if isinstance(part, (int, np.integer)):
        return f"i{int(part)}"
    if isinstance(part, (float, np.floating)):
        return f"f{float(part).hex()}"
    if isinstance(part, str):
        return f"s{part}"
    if isinstance(part, (tuple, list)):
        return "(" + ",".join(_token(p) for p in part) + ")"
    return f"r{part!r}"


def stream_id_for(*parts: Any) -> int:
    """
    Derive a 64-bit stream id from arbitrary labels.

    Args:
        *parts: Integers, floats, strings or tuples of them

    Returns:
        Integer in [0, 2**64) that depends only on the labels
    """
    digest = hashlib.blake2b(digest_size=8)
    for part in parts:
        digest.update(_token(part).encode("utf-8"))
        digest.update(b"\x1f")
    return int.from_bytes(digest.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """
    A reproducible random stream identified by (seed, stream id).

    Identical pairs give identical draws; distinct stream ids give
    statistically independent streams through numpy's SeedSequence spawn keys.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= int(self.seed) <= _MASK64) or not (0 <= int(self.stream_id) <= _MASK64):
            raise PreconditionError("seed and stream id must be 64-bit unsigned integers")

    def generator(self) -> np.random.Generator:
        """
        Create a fresh generator positioned at the start of this stream.

        Returns:
            numpy Generator backed by PCG64
        """
        sequence = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(sequence))

    def child(self, *labels: Any) -> "RngStream":
        """
        Derive an independent sub-stream.

        Args:
            *labels: Labels such as a replica index or a layer name

        Returns:
            A new RngStream with the same seed
        """
        return RngStream(self.seed, stream_id_for(self.stream_id, *labels))


def as_generator(rng: Union[RngStream, np.random.Generator]) -> np.random.Generator:
    """Accept either an RngStream or an already running numpy Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def _run_batch(fn: Callable[[RngStream], Any], rng: RngStream, indices: range) -> List[Any]:
    return [fn(rng.child(i)) for i in indices]


def run_replicas(
    fn: Callable[[RngStream], Any],
    rng: RngStream,
    replicas: int,
    n_jobs: int = 1,
    batch_size: int = RUN_CONFIG["batch_size"],
    progress: bool = False,
    desc: Optional[str] = None,
) -> List[Any]:
    """
    Run independent replicas, each on its own child stream.

    Replica i always uses rng.child(i), so the results do not depend on the
    batch size or on the number of workers.

    Args:
        fn: Function of one RngStream returning a picklable result
        rng: Parent stream
        replicas: Number of replicas
        n_jobs: joblib worker count (1 runs in-process)
        batch_size: Replicas per joblib task
        progress: Show a tqdm bar over batches
        desc: Progress bar label

    Returns:
        Results in replica order
    """
    batches = [range(start, min(start + batch_size, replicas)) for start in range(0, replicas, batch_size)]
    if n_jobs == 1:
        results = [_run_batch(fn, rng, batch) for batch in tqdm(batches, desc=desc, disable=not progress, leave=False)]
    else:
        results = Parallel(n_jobs=n_jobs)(delayed(_run_batch)(fn, rng, batch) for batch in batches)
    return [item for batch in results for item in batch]


@dataclass(frozen=True)
class LatticeBox:
    """
    The box B(N) = [-N, N]^d of Z^d.

    In Dirichlet mode the walk is killed on the boundary, so the indexed
    vertices are the interior [-(N-1), N-1]^d. In free mode all of B(N) is
    indexed and kernels and bridges refer to the walk on the whole lattice.
    Indices follow lexicographic order of the coordinates.
    """

    d: int
    N: int
    mode: str = DIRICHLET

    @property
    def half_width(self) -> int:
        return self.N - 1 if self.mode == DIRICHLET else self.N

    @property
    def side(self) -> int:
        return 2 * self.half_width + 1

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.side,) * self.d

    @property
    def size(self) -> int:
        return self.side ** self.d

    @property
    def box_id(self) -> str:
        return f"{self.d}:{self.N}:{self.mode}"

    @classmethod
    def from_id(cls, box_id: str) -> "LatticeBox":
        """Rebuild a box from its "d:N:mode" identifier."""
        d, N, mode = box_id.split(":")
        return build_box(int(d), int(N), mode)

    @cached_property
    def coords(self) -> np.ndarray:
        """Interior coordinates, one row per index."""
        grid = np.unravel_index(np.arange(self.size), self.shape)
        return np.stack(grid, axis=1).astype(np.int64) - self.half_width

    @cached_property
    def sup_norm(self) -> np.ndarray:
        return np.abs(self.coords).max(axis=1)

    @property
    def origin_index(self) -> int:
        return self.index_of((0,) * self.d)

    def _strides(self) -> np.ndarray:
        return self.side ** np.arange(self.d - 1, -1, -1, dtype=np.int64)

    def indices_of(self, points: np.ndarray) -> np.ndarray:
        """
        Map coordinate rows to indices.

        Args:
            points: Array of shape (k, d)

        Returns:
            Index per row, -1 for rows outside the indexed region
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.int64))
        inside = np.all(np.abs(points) <= self.half_width, axis=1)
        idx = (points + self.half_width) @ self._strides()
        return np.where(inside, idx, -1)

    def index_of(self, x: Vertex) -> int:
        """
        Map one vertex to its index.

        Args:
            x: Coordinate tuple

        Returns:
            Interior index

        Raises:
            PreconditionError: if x is not an indexed vertex
        """
        if len(x) != self.d:
            raise PreconditionError(f"vertex {tuple(x)} does not have dimension {self.d}")
        idx = int(self.indices_of(np.asarray(x)[None, :])[0])
        if idx < 0:
            raise PreconditionError(f"vertex {tuple(int(v) for v in x)} is not interior to box {self.box_id}")
        return idx

    def contains(self, x: Vertex) -> bool:
        return len(x) == self.d and bool(np.all(np.abs(np.asarray(x)) <= self.half_width))

    @cached_property
    def neighbor_table(self) -> np.ndarray:
        """
        Interior neighbours per vertex in the order +e_0, -e_0, +e_1, -e_1, ...

        Entries are -1 where the neighbour is on the boundary (killed).
        """
        n, m = self.size, self.half_width
        table = np.full((n, 2 * self.d), -1, dtype=np.int64)
        for axis, stride in enumerate(self._strides()):
            c = self.coords[:, axis]
            plus = np.flatnonzero(c < m)
            minus = np.flatnonzero(c > -m)
            table[plus, 2 * axis] = plus + stride
            table[minus, 2 * axis + 1] = minus - stride
        return table

    @cached_property
    def _edge_data(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        pairs, axes = [], []
        half_edges = np.full((self.size, 2 * self.d), -1, dtype=np.int64)
        offset = 0
        for axis, stride in enumerate(self._strides()):
            lower = np.flatnonzero(self.coords[:, axis] < self.half_width)
            upper = lower + stride
            ids = offset + np.arange(lower.size)
            half_edges[lower, 2 * axis] = ids
            half_edges[upper, 2 * axis + 1] = ids
            pairs.append(np.stack([lower, upper], axis=1))
            axes.append(np.full(lower.size, axis, dtype=np.int64))
            offset += lower.size
        if pairs:
            edges = np.concatenate(pairs).astype(np.int64)
            edge_axis = np.concatenate(axes)
        else:
            edges = np.zeros((0, 2), dtype=np.int64)
            edge_axis = np.zeros(0, dtype=np.int64)
        return edges, edge_axis, half_edges

    @property
    def edges(self) -> np.ndarray:
        """Edges between indexed vertices as (lower, upper) index pairs."""
        return self._edge_data[0]

    @property
    def edge_axis(self) -> np.ndarray:
        return self._edge_data[1]

    @property
    def half_edge_ids(self) -> np.ndarray:
        """Edge id per (vertex, direction) in neighbor_table order, -1 if absent."""
        return self._edge_data[2]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def vertices_with_sup_norm(self, radius: int, inside: bool = False) -> np.ndarray:
        """
        Indices of vertices on the sphere |x|_inf = radius, or in the ball if inside.
        """
        if inside:
            return np.flatnonzero(self.sup_norm <= radius)
        return np.flatnonzero(self.sup_norm == radius)


def build_box(d: int, N: int, mode: str = DIRICHLET) -> LatticeBox:
    """
    Build a lattice box.

    Args:
        d: Dimension, at least 3
        N: Box radius, at least 1
        mode: "dirichlet" or "free"

    Returns:
        LatticeBox with consistent indexing

    Raises:
        UnsupportedParametersError: for d < 3, N < 1 or an unknown mode
    """
    if int(d) != d or d < 3:
        raise UnsupportedParametersError(f"dimension must be an integer >= 3, got {d}")
    if int(N) != N or N < 1:
        raise UnsupportedParametersError(f"box radius must be an integer >= 1, got {N}")
    if mode not in BOUNDARY_MODES:
        raise UnsupportedParametersError(f"boundary mode must be one of {BOUNDARY_MODES}, got {mode!r}")
    return LatticeBox(int(d), int(N), mode)


def _require_dirichlet(box: LatticeBox) -> None:
    if box.mode != DIRICHLET:
        raise UnsupportedParametersError(f"box {box.box_id} is not a Dirichlet box")


@lru_cache(maxsize=16)
def transition_matrix(box: LatticeBox) -> sp.csr_matrix:
    """
    Jump matrix of the killed walk restricted to interior vertices.

    Every interior neighbour receives probability 1/(2d); jumps to the
    boundary are lost, so rows next to the boundary sum to less than 1.
    """
    _require_dirichlet(box)
    edges = box.edges
    n = box.size
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    data = np.full(rows.size, 1.0 / (2 * box.d))
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


@lru_cache(maxsize=16)
def killed_generator(box: LatticeBox) -> sp.csc_matrix:
    """Return Q = I - P, the killed Laplacian in the rate-1 normalization."""
    n = box.size
    return (sp.identity(n, format="csc") - transition_matrix(box)).tocsc()


@dataclass(frozen=True, eq=False)
class GreenTable:
    """
    Dense Green's function of the killed walk on a Dirichlet box.

    values[i, j] = G(x_i, x_j) is the expected time spent at x_j by the walk
    started at x_i before it is killed.
    """

    box: LatticeBox
    values: np.ndarray = field(repr=False)

    def __call__(self, x: Vertex, y: Vertex) -> float:
        return float(self.values[self.box.index_of(x), self.box.index_of(y)])

    def diagonal(self) -> np.ndarray:
        return np.diag(self.values).copy()

    def residual(self) -> float:
        """Max-norm of (I - P)G - I; below 1e-9 for every supported box."""
        identity = np.eye(self.box.size)
        return float(np.abs(killed_generator(self.box) @ self.values - identity).max())

    @cached_property
    def cholesky_factor(self) -> np.ndarray:
        """Lower factor L with L L^T = G."""
        try:
            return np.linalg.cholesky(self.values)
        except np.linalg.LinAlgError as e:
            raise FactorizationError(f"Green table of box {self.box.box_id} is not positive definite: {e}")


def green_dirichlet(box: LatticeBox, max_vertices: Optional[int] = None) -> GreenTable:
    """
    Compute the full Green's function of a Dirichlet box.

    Args:
        box: Dirichlet box
        max_vertices: Size cap, defaults to LATTICE_CONFIG["dense_cap"]

    Returns:
        GreenTable solving (I - P)G = I

    Raises:
        UnsupportedParametersError: for free-mode boxes
        SizeCapExceededError: when the box has too many interior vertices
        SingularSystemError: if the dense factorization fails
    """
    _require_dirichlet(box)
    cap = LATTICE_CONFIG["dense_cap"] if max_vertices is None else max_vertices
    if box.size > cap:
        raise SizeCapExceededError(
            f"box {box.box_id} has {box.size} interior vertices, dense cap is {cap}; use green_column"
        )
    q = killed_generator(box).toarray()
    try:
        factor = scipy.linalg.cho_factor(q, lower=True)
        values = scipy.linalg.cho_solve(factor, np.eye(box.size))
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(f"killed Laplacian of box {box.box_id} is singular: {e}")
    values = 0.5 * (values + values.T)
    return GreenTable(box, values)


@lru_cache(maxsize=4)
def _sparse_solver(box: LatticeBox) -> Callable[[np.ndarray], np.ndarray]:
    q = killed_generator(box)
    if cholmod_cholesky is not None:
        return cholmod_cholesky(q)
    logger.warning("scikit-sparse not available, using scipy splu for box %s", box.box_id)
    return spla.splu(q).solve


def _conjugate_gradient(q: sp.spmatrix, rhs: np.ndarray, tol: float) -> Tuple[np.ndarray, int]:
    try:
        return spla.cg(q, rhs, rtol=tol, atol=0.0)
    except TypeError:  # scipy < 1.12 names the tolerance tol
        return spla.cg(q, rhs, tol=tol, atol=0.0)


def green_column(box: LatticeBox, x: Vertex) -> np.ndarray:
    """
    Compute one column G(., x) without forming the dense table.

    Uses a sparse factorization up to LATTICE_CONFIG["sparse_cap"] interior
    vertices and conjugate gradient beyond.

    Args:
        box: Dirichlet box
        x: Source vertex

    Returns:
        Vector of G(y, x) over interior y
    """
    _require_dirichlet(box)
    rhs = np.zeros(box.size)
    rhs[box.index_of(x)] = 1.0
    if box.size <= LATTICE_CONFIG["sparse_cap"]:
        return np.asarray(_sparse_solver(box)(rhs)).ravel()
    column, info = _conjugate_gradient(killed_generator(box), rhs, LATTICE_CONFIG["cg_tol"])
    if info != 0:
        raise SingularSystemError(f"conjugate gradient did not converge on box {box.box_id} (info={info})")
    return column


def _check_time(t: float) -> None:
    if not t >= 0:
        raise PreconditionError(f"time must be non-negative, got {t}")
    if t > LATTICE_CONFIG["max_kernel_time"]:
        raise KernelRangeError(f"time {t} exceeds the kernel guard {LATTICE_CONFIG['max_kernel_time']}")


def _poisson_cutoff(t: float) -> int:
    if t == 0:
        return 0
    return int(stats.poisson.isf(LATTICE_CONFIG["kernel_tol"], t)) + 1


def free_kernel_1d(t: float, k: Union[int, np.ndarray], d: int) -> np.ndarray:
    """
    One coordinate of the free kernel: a rate-1/d walk on Z.

    q_t(k) = exp(-t/d) I_k(t/d), evaluated as scipy's exponentially scaled
    Bessel function.
    """
    return special.ive(np.abs(k), t / d)


def heat_kernel_vector(box: LatticeBox, t: float, x: Vertex) -> np.ndarray:
    """
    Killed heat kernel q_t(x, .) over all interior vertices by uniformization.

    The Poisson series is truncated once the remaining mass is below
    LATTICE_CONFIG["kernel_tol"].
    """
    _require_dirichlet(box)
    _check_time(t)
    p = transition_matrix(box)
    vector = np.zeros(box.size)
    vector[box.index_of(x)] = 1.0
    n_max = _poisson_cutoff(t)
    weights = stats.poisson.pmf(np.arange(n_max + 1), t) if t > 0 else np.ones(1)
    out = weights[0] * vector
    for k in range(1, n_max + 1):
        vector = p @ vector
        out += weights[k] * vector
    return out


def heat_kernel(box: LatticeBox, t: float, x: Vertex, y: Vertex) -> float:
    """
    Transition density q_t(x, y) of the rate-1 walk.

    Args:
        box: Free or Dirichlet box
        t: Time, non-negative
        x: Start vertex
        y: End vertex

    Returns:
        q_t(x, y)

    Raises:
        KernelRangeError: beyond the time guard
    """
    _check_time(t)
    if box.mode == FREE:
        diff = np.asarray(y, dtype=np.int64) - np.asarray(x, dtype=np.int64)
        return float(np.prod(free_kernel_1d(t, diff, box.d)))
    return float(heat_kernel_vector(box, t, x)[box.index_of(y)])


@dataclass(frozen=True, eq=False)
class TimedPath:
    """
    A continuous-time lattice path.

    vertices has one row per visited site (k + 1 rows for k jumps) and
    jump_times holds the k strictly increasing jump instants in (0, duration).
    """

    vertices: np.ndarray
    jump_times: np.ndarray
    duration: float

    @property
    def n_jumps(self) -> int:
        return int(self.jump_times.size)

    def holding_times(self) -> np.ndarray:
        marks = np.concatenate([[0.0], self.jump_times, [self.duration]])
        return np.diff(marks)

    def occupation(self, z: Vertex) -> float:
        """Time spent at vertex z."""
        hits = np.all(self.vertices == np.asarray(z, dtype=np.int64), axis=1)
        return float(self.holding_times()[hits].sum())


def _dirichlet_bridge(box: LatticeBox, xi: int, yi: int, t: float, gen: np.random.Generator) -> np.ndarray:
    p = transition_matrix(box)
    n_max = _poisson_cutoff(t)
    scaled = np.zeros((n_max + 1, box.size))
    log_scale = np.zeros(n_max + 1)
    vector = np.zeros(box.size)
    vector[yi] = 1.0
    acc = 0.0
    for m in range(n_max + 1):
        if m > 0:
            vector = p @ vector
        top = vector.max()
        if top <= 0:
            break
        vector = vector / top
        acc += math.log(top)
        scaled[m] = vector
        log_scale[m] = acc

    # P^m[x, y] in log form, weighted by the Poisson clock
    m_values = np.arange(n_max + 1)
    with np.errstate(divide="ignore"):
        log_reach = np.log(scaled[:, xi]) + log_scale
    log_clock = m_values * math.log(t) - special.gammaln(m_values + 1) if t > 0 else np.where(m_values == 0, 0.0, -np.inf)
    log_w = log_reach + log_clock
    if not np.isfinite(log_w).any():
        raise PreconditionError("bridge endpoints have zero transition density at this duration")
    weights = np.exp(log_w - log_w[np.isfinite(log_w)].max())
    weights[~np.isfinite(log_w)] = 0.0
    n_jumps = int(gen.choice(m_values, p=weights / weights.sum()))

    path = np.empty(n_jumps + 1, dtype=np.int64)
    path[0] = xi
    table = box.neighbor_table
    for k in range(n_jumps):
        candidates = table[path[k]]
        candidates = candidates[candidates >= 0]
        h = scaled[n_jumps - k - 1, candidates]
        path[k + 1] = candidates[gen.choice(candidates.size, p=h / h.sum())]
    return path


def _free_axis_steps(k: int, t: float, d: int, gen: np.random.Generator) -> np.ndarray:
    # Jump count n of a rate-1/d walk on Z conditioned to move by k in time t
    mean = t / d
    k_abs = abs(int(k))
    n_hi = int(stats.poisson.isf(LATTICE_CONFIG["kernel_tol"], mean)) + k_abs + 2
    n = np.arange(k_abs, n_hi + 1, 2)
    log_w = (n * math.log(mean / 2.0)
             - special.gammaln((n + k_abs) / 2 + 1)
             - special.gammaln((n - k_abs) / 2 + 1))
    weights = np.exp(log_w - log_w.max())
    count = int(gen.choice(n, p=weights / weights.sum()))
    up = (count + k_abs) // 2
    sign = 1 if k >= 0 else -1
    steps = np.concatenate([np.full(up, sign), np.full(count - up, -sign)])
    return gen.permutation(steps)


def sample_ct_bridge(
    box: LatticeBox,
    x: Vertex,
    y: Vertex,
    t: float,
    rng: Union[RngStream, np.random.Generator],
) -> TimedPath:
    """
    Sample a continuous-time bridge from x to y of duration exactly t.

    Dirichlet boxes use the h-transform of the uniformized chain: the number
    of clock rings n has weight e^{-t} t^n / n! P^n[x, y], each skeleton step
    is weighted by P^{remaining}[., y], and the ring times are uniform order
    statistics. Free boxes factorize into d independent rate-1/d coordinate
    bridges.

    Args:
        box: Free or Dirichlet box
        x: Start vertex
        y: End vertex
        t: Duration
        rng: Random stream or generator

    Returns:
        TimedPath starting at x and ending at y

    Raises:
        PreconditionError: if q_t(x, y) = 0
    """
    _check_time(t)
    gen = as_generator(rng)
    x_arr = np.asarray(x, dtype=np.int64)
    y_arr = np.asarray(y, dtype=np.int64)
    if t == 0:
        if not np.array_equal(x_arr, y_arr):
            raise PreconditionError("a bridge of duration 0 needs x = y")
        return TimedPath(x_arr[None, :].copy(), np.zeros(0), 0.0)

    if box.mode == DIRICHLET:
        path = _dirichlet_bridge(box, box.index_of(x), box.index_of(y), t, gen)
        times = np.sort(gen.uniform(0.0, t, path.size - 1))
        return TimedPath(box.coords[path], times, float(t))

    axes, steps = [], []
    for axis in range(box.d):
        axis_steps = _free_axis_steps(int(y_arr[axis] - x_arr[axis]), t, box.d, gen)
        axes.append(np.full(axis_steps.size, axis))
        steps.append(axis_steps)
    axes_all = np.concatenate(axes)
    steps_all = np.concatenate(steps)
    times = gen.uniform(0.0, t, axes_all.size)
    order = np.argsort(times)
    increments = np.zeros((axes_all.size, box.d), dtype=np.int64)
    increments[np.arange(axes_all.size), axes_all[order]] = steps_all[order]
    vertices = np.vstack([x_arr, x_arr + np.cumsum(increments, axis=0)])
    return TimedPath(vertices, times[order], float(t))


if __name__ == "__main__":
    # Example usage
    box = build_box(3, 2)
    green = green_dirichlet(box)
    print(f"Box {box.box_id}: {box.size} interior vertices")
    print(f"G(0,0) = {green((0, 0, 0), (0, 0, 0)):.6f}, residual = {green.residual():.2e}")
    path = sample_ct_bridge(box, (0, 0, 0), (0, 0, 0), 2.0, RngStream(7))
    print(f"Bridge with {path.n_jumps} jumps, holding times sum to {path.holding_times().sum():.6f}")
