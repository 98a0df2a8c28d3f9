"""
Scaling analysis for loop-soup observables

This module counts the grid boxes met by a target set, fits log-log
exponents with bootstrap intervals, audits the subadditivity of logarithmic
one-arm estimates and compares rescaled lattice loops with Brownian loops.
"""

import math
import logging
from dataclasses import dataclass, field
from typing import List, Dict, Any, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from brownian_loop_soup import BrownianLoop, loops_from_records
from config import SCALING_CONFIG
from errors import (
    InsufficientScalesError,
    NonPositiveValuesError,
    PreconditionError,
    SchemaMismatchError,
)
from loop_soup_lattice import ROOTED, check_loop_schema

logger = logging.getLogger(__name__)

# Corner offsets of the 2x2x2 block of candidate boxes around a short piece
_CORNERS = np.array([(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)

_COLUMN_CHUNK = 256


# ---------------------------------------------------------------------------
# Targets and grid counts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BallTarget:
    """A closed ball."""

    center: Tuple[float, float, float]
    radius: float

    label = "ball"


@dataclass(frozen=True, eq=False)
class SegmentSetTarget:
    """
    A finite union of closed segments.

    Points are segments of length zero; a polyline is the union of its
    consecutive segments.
    """

    starts: np.ndarray
    ends: np.ndarray
    label: str = "segments"

    @classmethod
    def from_polyline(cls, points: np.ndarray, label: str = "polyline") -> "SegmentSetTarget":
        points = np.asarray(points, dtype=float)
        return cls(points[:-1], points[1:], label)

    @classmethod
    def from_points(cls, points: np.ndarray, label: str = "points") -> "SegmentSetTarget":
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return cls(points, points.copy(), label)

    @classmethod
    def segment(cls, a: Sequence[float], b: Sequence[float]) -> "SegmentSetTarget":
        return cls(np.asarray([a], dtype=float), np.asarray([b], dtype=float), "segment")


Target = Union[BallTarget, SegmentSetTarget]


@dataclass(frozen=True)
class GridCount:
    """
    Box counts of one grid.

    The grid is (2 delta) Z^3 with closed boxes z + [-delta, delta]^3;
    phi_count boxes meet the window ball and psi_count of them meet the
    target inside the window.
    """

    delta: float
    phi_count: int
    psi_count: int
    center: Tuple[float, ...]
    radius: float
    target: str = ""

    def as_dict(self) -> Dict[str, Any]:
        return {"delta": self.delta, "phi_count": self.phi_count, "psi_count": self.psi_count,
                "center": list(self.center), "radius": self.radius, "target": self.target}


def _index_range(lo: np.ndarray, hi: np.ndarray, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    """Indices k whose interval [2k delta - delta, 2k delta + delta] meets [lo, hi]."""
    return np.ceil((lo - delta) / (2 * delta)).astype(np.int64), np.floor((hi + delta) / (2 * delta)).astype(np.int64)


def _axis_gap(k: np.ndarray, c: float, delta: float) -> np.ndarray:
    return np.maximum(np.abs(2 * delta * k - c) - delta, 0.0)


def count_ball_boxes(balls: Sequence[Tuple[np.ndarray, float]], delta: float) -> int:
    """
    Number of grid boxes that meet every ball in the list.

    Counting runs over (x, y) columns; in each column the admissible z
    indices form an interval per ball.
    """
    centers = [np.asarray(c, dtype=float) for c, _ in balls]
    radii = [float(r) for _, r in balls]
    kx_lo, kx_hi = _index_range(max(c[0] - r for c, r in zip(centers, radii)),
                                min(c[0] + r for c, r in zip(centers, radii)), delta)
    ky_lo, ky_hi = _index_range(max(c[1] - r for c, r in zip(centers, radii)),
                                min(c[1] + r for c, r in zip(centers, radii)), delta)
    if kx_hi < kx_lo or ky_hi < ky_lo:
        return 0
    ky = np.arange(ky_lo, ky_hi + 1)
    total = 0
    for start in range(int(kx_lo), int(kx_hi) + 1, _COLUMN_CHUNK):
        kx = np.arange(start, min(start + _COLUMN_CHUNK, int(kx_hi) + 1))
        gx, gy = np.meshgrid(kx, ky, indexing="ij")
        z_lo = np.full(gx.shape, -np.inf)
        z_hi = np.full(gx.shape, np.inf)
        for c, r in zip(centers, radii):
            rem = r * r - _axis_gap(gx, c[0], delta) ** 2 - _axis_gap(gy, c[1], delta) ** 2
            reach = np.sqrt(np.maximum(rem, 0.0))
            lo, hi = _index_range(c[2] - reach, c[2] + reach, delta)
            lo = np.where(rem >= 0, lo, np.iinfo(np.int64).max // 4)
            z_lo = np.maximum(z_lo, lo)
            z_hi = np.minimum(z_hi, hi)
        total += int(np.maximum(z_hi - z_lo + 1, 0).sum())
    return total


def clip_segments(starts: np.ndarray, ends: np.ndarray, center: np.ndarray, radius: float) -> Tuple[np.ndarray, np.ndarray]:
    """The parts of the segments that lie in the closed ball."""
    d = ends - starts
    p = starts - center
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * np.einsum("ij,ij->i", p, d)
    c = np.einsum("ij,ij->i", p, p) - radius * radius
    disc = b * b - 4 * a * c
    point = a == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        root = np.sqrt(disc)
        s_lo = np.where(point, 0.0, (-b - root) / (2 * a))
        s_hi = np.where(point, 0.0, (-b + root) / (2 * a))
    s_lo = np.maximum(s_lo, 0.0)
    s_hi = np.minimum(s_hi, 1.0)
    keep = np.where(point, c <= 0, (disc >= 0) & (s_lo <= s_hi))
    return starts[keep] + s_lo[keep, None] * d[keep], starts[keep] + s_hi[keep, None] * d[keep]


def _split_segments(starts: np.ndarray, ends: np.ndarray, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.linalg.norm(ends - starts, axis=1)
    pieces = np.maximum(np.ceil(lengths / delta).astype(np.int64), 1)
    owner = np.repeat(np.arange(starts.shape[0]), pieces)
    offset = np.arange(owner.size) - np.repeat(np.cumsum(pieces) - pieces, pieces)
    s0 = (offset / pieces[owner])[:, None]
    s1 = ((offset + 1) / pieces[owner])[:, None]
    d = ends[owner] - starts[owner]
    return starts[owner] + s0 * d, np.where(s1 == 1.0, ends[owner], starts[owner] + s1 * d)


def _segment_meets_box(p0: np.ndarray, p1: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab test of segments against closed axis-aligned boxes."""
    d = p1 - p0
    flat = d == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - p0) / d
        t2 = (hi - p0) / d
    t_in = np.where(flat, -np.inf, np.minimum(t1, t2)).max(axis=1)
    t_out = np.where(flat, np.inf, np.maximum(t1, t2)).min(axis=1)
    inside_flat = np.all(~flat | ((p0 >= lo) & (p0 <= hi)), axis=1)
    return inside_flat & (np.maximum(t_in, 0.0) <= np.minimum(t_out, 1.0))


def segment_box_indices(starts: np.ndarray, ends: np.ndarray, delta: float) -> np.ndarray:
    """
    Grid indices of every closed box met by the segments.

    Segments are cut into pieces no longer than delta, so each piece can
    only meet the 2x2x2 block of boxes starting at its lowest index.

    Returns:
        Unique integer index rows of shape (m, 3)
    """
    if starts.shape[0] == 0:
        return np.zeros((0, 3), dtype=np.int64)
    p0, p1 = _split_segments(starts, ends, delta)
    k_lo, k_hi = _index_range(np.minimum(p0, p1), np.maximum(p0, p1), delta)
    cand = k_lo[:, None, :] + _CORNERS[None, :, :]
    valid = np.all(cand <= k_hi[:, None, :], axis=2)
    owner = np.broadcast_to(np.arange(p0.shape[0])[:, None], valid.shape)[valid]
    cand = cand[valid]
    centers = 2.0 * delta * cand
    hit = _segment_meets_box(p0[owner], p1[owner], centers - delta, centers + delta)
    return np.unique(cand[hit], axis=0)


def grid_counts(target: Target, delta: float, center: Sequence[float], r1: float) -> GridCount:
    """
    Count the grid boxes of scale delta that meet the window ball and the target.

    For a segment target the count is exact. For a ball target the count is
    the number of boxes meeting both the window ball and the target ball,
    which is exact whenever the target lies inside the window.

    Args:
        target: BallTarget or SegmentSetTarget
        delta: Half side of the grid boxes
        center: Window center
        r1: Window radius

    Returns:
        GridCount

    Raises:
        PreconditionError: for an empty window or a nonpositive delta
    """
    if not r1 > 0:
        raise PreconditionError(f"the window radius must be positive, got {r1}")
    if not delta > 0:
        raise PreconditionError(f"delta must be positive, got {delta}")
    center = np.asarray(center, dtype=float)
    if delta > r1 / 100.0:
        logger.debug("grid scale %g is coarser than r1/100", delta)
    window = (center, float(r1))
    phi = count_ball_boxes([window], delta)
    if isinstance(target, BallTarget):
        psi = count_ball_boxes([window, (np.asarray(target.center, dtype=float), target.radius)], delta)
    else:
        starts, ends = clip_segments(target.starts, target.ends, center, r1)
        psi = int(segment_box_indices(starts, ends, delta).shape[0])
    return GridCount(float(delta), int(phi), int(psi), tuple(center.tolist()), float(r1), target.label)


def delta_ladder(r1: float, n_scales: int, ladder: str = "dyadic", coarsest: Optional[float] = None) -> List[float]:
    """
    Grid scales from coarse to fine.

    Dyadic ladders halve delta from r1/128, decimal ladders divide it by ten
    from r1/100.
    """
    if ladder == "dyadic":
        first, ratio = r1 / 128.0, 2.0
    elif ladder == "decimal":
        first, ratio = r1 / 100.0, 10.0
    else:
        raise PreconditionError(f"unknown ladder '{ladder}'")
    first = coarsest if coarsest is not None else first
    return [first / ratio ** k for k in range(n_scales)]


# ---------------------------------------------------------------------------
# Exponent fits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExponentFit:
    """
    A log-log least-squares fit with a percentile bootstrap interval.

    The fit is ln(values) = intercept + slope * ln(scales).
    """

    scales: Tuple[float, ...]
    values: Tuple[float, ...]
    slope: float
    intercept: float
    residuals: Tuple[float, ...]
    ci_lo: float
    ci_hi: float
    n_boot: int
    ci_level: float
    errors: Optional[Tuple[float, ...]] = None
    replicas: Optional[Tuple[int, ...]] = None
    label: str = "log-log slope"

    @property
    def max_residual(self) -> float:
        return max(abs(r) for r in self.residuals) if self.residuals else 0.0

    def predict(self, scales: Sequence[float]) -> np.ndarray:
        return np.exp(self.intercept + self.slope * np.log(np.asarray(scales, dtype=float)))

    def as_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "scales": list(self.scales),
            "values": list(self.values),
            "errors": list(self.errors) if self.errors is not None else None,
            "replicas": list(self.replicas) if self.replicas is not None else None,
            "slope": self.slope,
            "intercept": self.intercept,
            "residuals": list(self.residuals),
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "n_boot": self.n_boot,
            "ci_level": self.ci_level,
        }


def _weighted_line(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> Tuple[float, float]:
    xm = np.sum(w * x) / np.sum(w)
    ym = np.sum(w * y) / np.sum(w)
    sxx = np.sum(w * (x - xm) ** 2)
    slope = float(np.sum(w * (x - xm) * (y - ym)) / sxx)
    return slope, float(ym - slope * xm)


def _fit_weights(values: np.ndarray, errors: Optional[np.ndarray]) -> np.ndarray:
    if errors is None:
        return np.ones_like(values)
    rel = np.abs(errors) / values
    positive = rel[rel > 0]
    if positive.size == 0:
        return np.ones_like(values)
    rel = np.where(rel > 0, rel, positive.min())
    return 1.0 / rel ** 2


def fit_exponent(
    scales: Sequence[float],
    values: Sequence[float],
    errors: Optional[Sequence[float]] = None,
    samples: Optional[Sequence[np.ndarray]] = None,
    n_boot: int = SCALING_CONFIG["n_boot"],
    ci_level: float = SCALING_CONFIG["ci_level"],
    seed: int = SCALING_CONFIG["bootstrap_seed"],
    label: str = "log-log slope",
) -> ExponentFit:
    """
    Fit values ~ C * scales^slope on a log-log scale.

    Weights are inverse squared relative errors when errors are given. The
    bootstrap resamples the replicas of every scale when samples are given,
    draws lognormal values with the given relative errors otherwise, and
    resamples residuals when neither is available.

    Args:
        scales: Positive scales
        values: Positive values, one per scale
        errors: Optional standard errors of the values
        samples: Optional replica-level observations per scale, whose means are the values
        n_boot: Bootstrap resamples
        ci_level: Confidence level of the percentile interval
        seed: Bootstrap seed
        label: Name stored on the fit

    Returns:
        ExponentFit

    Raises:
        InsufficientScalesError: for fewer than SCALING_CONFIG["min_fit_scales"] scales
        NonPositiveValuesError: if a scale or value is not strictly positive
    """
    s = np.asarray(scales, dtype=float)
    v = np.asarray(values, dtype=float)
    if s.size != v.size:
        raise PreconditionError("scales and values must have the same length")
    if np.unique(s).size < SCALING_CONFIG["min_fit_scales"]:
        raise InsufficientScalesError(f"a fit needs at least {SCALING_CONFIG['min_fit_scales']} distinct scales, got {np.unique(s).size}")
    if np.any(s <= 0) or np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise NonPositiveValuesError(f"log-log fits need positive values, got {v.tolist()}")
    e = None if errors is None else np.asarray(errors, dtype=float)
    w = _fit_weights(v, e)
    x, y = np.log(s), np.log(v)
    slope, intercept = _weighted_line(x, y, w)
    residuals = y - (intercept + slope * x)

    gen = np.random.default_rng(seed)
    boot = []
    if samples is not None:
        samples = [np.asarray(obs, dtype=float) for obs in samples]
        for _ in range(n_boot):
            means = np.array([obs[gen.integers(0, obs.size, obs.size)].mean() for obs in samples])
            if np.all(means > 0):
                boot.append(_weighted_line(x, np.log(means), w)[0])
    elif e is not None:
        rel = np.abs(e) / v
        for _ in range(n_boot):
            boot.append(_weighted_line(x, y + rel * gen.standard_normal(v.size), w)[0])
    else:
        for _ in range(n_boot):
            boot.append(_weighted_line(x, intercept + slope * x + gen.choice(residuals, residuals.size), w)[0])
    if boot:
        tail = 100.0 * (1.0 - ci_level) / 2.0
        ci_lo, ci_hi = (float(q) for q in np.percentile(boot, [tail, 100.0 - tail]))
    else:
        logger.warning("no bootstrap resample had positive means; the interval is the point slope")
        ci_lo = ci_hi = slope
    replicas = tuple(int(obs.size) for obs in samples) if samples is not None else None
    return ExponentFit(
        scales=tuple(s.tolist()), values=tuple(v.tolist()), slope=slope, intercept=intercept,
        residuals=tuple(residuals.tolist()), ci_lo=min(ci_lo, slope), ci_hi=max(ci_hi, slope),
        n_boot=int(n_boot), ci_level=float(ci_level),
        errors=tuple(e.tolist()) if e is not None else None, replicas=replicas, label=label,
    )


def box_dimension(counts: Sequence[GridCount], **kwargs) -> ExponentFit:
    """
    Upper box-counting dimension proxy from grid counts.

    The slope of ln psi_count against ln(1/delta) over the given scales; it
    is a finite-scale estimate, not a limit.
    """
    deltas = np.array([c.delta for c in counts], dtype=float)
    if np.unique(deltas).size < SCALING_CONFIG["min_box_scales"]:
        raise InsufficientScalesError(
            f"box dimension needs at least {SCALING_CONFIG['min_box_scales']} grid scales, got {np.unique(deltas).size}"
        )
    fit = fit_exponent(1.0 / deltas, [c.psi_count for c in counts], label="upper box-counting dimension proxy", **kwargs)
    logger.info("box dimension %.3f over delta in [%g, %g], largest residual %.3g",
                fit.slope, deltas.min(), deltas.max(), fit.max_residual)
    return fit


# ---------------------------------------------------------------------------
# Subadditivity audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubadditivityAudit:
    """
    The audit of u_{k1+k2} <= u_{k1-1} + u_{k2-1} + C for u_k = ln q(base^-k).

    slack[(k1, k2)] is u_{k1+k2} - u_{k1-1} - u_{k2-1}; c_star, the largest
    slack, is the smallest C for which every inequality holds.
    """

    base: float
    u: Tuple[float, ...]
    slack: Dict[Tuple[int, int], float]
    c_star: float
    cesaro: Tuple[float, ...]
    zeta_path: Tuple[float, ...]
    c_star_ci: Optional[Tuple[float, float]] = None

    def feasible(self, c: float) -> bool:
        return all(value <= c + 1e-12 for value in self.slack.values())

    def as_dict(self) -> Dict[str, Any]:
        return {
            "base": self.base,
            "u": list(self.u),
            "slack": {f"{k1},{k2}": value for (k1, k2), value in sorted(self.slack.items())},
            "c_star": self.c_star,
            "c_star_ci": list(self.c_star_ci) if self.c_star_ci is not None else None,
            "cesaro": list(self.cesaro),
            "zeta_path": list(self.zeta_path),
        }


def _slacks(u: np.ndarray) -> Dict[Tuple[int, int], float]:
    # u[k - 1] holds u_k
    K = u.size
    return {(k1, k2): float(u[k1 + k2 - 1] - u[k1 - 2] - u[k2 - 2])
            for k1 in range(2, K + 1) for k2 in range(2, K + 1) if k1 + k2 <= K}


def subadditivity_audit(
    qhat: Sequence[float],
    base: float = 2.0,
    stderr: Optional[Sequence[float]] = None,
    n_boot: int = SCALING_CONFIG["n_boot"],
    ci_level: float = SCALING_CONFIG["ci_level"],
    seed: int = SCALING_CONFIG["bootstrap_seed"],
) -> SubadditivityAudit:
    """
    Audit the subadditivity of u_k = ln q(base^-k), k = 1..K.

    Args:
        qhat: Estimates at scales base^-1 ... base^-K
        base: Scale ratio, larger than 1
        stderr: Optional standard errors; when given, c_star gets a bootstrap interval
        n_boot: Bootstrap resamples
        ci_level: Confidence level
        seed: Bootstrap seed

    Returns:
        SubadditivityAudit

    Raises:
        InsufficientScalesError: for fewer than SCALING_CONFIG["min_audit_scales"] estimates
        NonPositiveValuesError: if an estimate is not positive
    """
    q = np.asarray(qhat, dtype=float)
    if q.size < SCALING_CONFIG["min_audit_scales"]:
        raise InsufficientScalesError(f"the audit needs at least {SCALING_CONFIG['min_audit_scales']} scales, got {q.size}")
    if not base > 1:
        raise PreconditionError(f"base must exceed 1, got {base}")
    if np.any(q <= 0):
        raise NonPositiveValuesError(f"the audit needs positive estimates, got {q.tolist()}")
    u = np.log(q)
    slack = _slacks(u)
    c_star = max(slack.values())
    k = np.arange(1, q.size + 1)
    cesaro = u / k

    c_star_ci = None
    if stderr is not None:
        se = np.asarray(stderr, dtype=float)
        gen = np.random.default_rng(seed)
        draws = []
        for _ in range(n_boot):
            resampled = q + se * gen.standard_normal(q.size)
            if np.all(resampled > 0):
                draws.append(max(_slacks(np.log(resampled)).values()))
        if draws:
            tail = 100.0 * (1.0 - ci_level) / 2.0
            lo, hi = np.percentile(draws, [tail, 100.0 - tail])
            c_star_ci = (float(lo), float(hi))
    return SubadditivityAudit(float(base), tuple(u.tolist()), slack, float(c_star), tuple(cesaro.tolist()),
                              tuple((-cesaro / math.log(base)).tolist()), c_star_ci)


# ---------------------------------------------------------------------------
# Rescaling and the loop-matching diagnostic
# ---------------------------------------------------------------------------

def psi1_snap(t: Union[float, np.ndarray], N: int) -> Union[float, np.ndarray]:
    """
    Snap durations to the grid N^-2 Z.

    t maps to k/N^2 when k/N^2 - 3/(8N^2) <= t < k/N^2 + 5/(8N^2).
    """
    n2 = float(N) * N
    snapped = np.floor(np.asarray(t, dtype=float) * n2 + 0.375) / n2
    return float(snapped) if np.ndim(snapped) == 0 else snapped


def psi2_snap(x: np.ndarray, N: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Snap points of R^d to Z^d after scaling by N.

    The lattice point within l1 distance 1/2 of N x is unique when it exists
    and is then the coordinate rounding; rounding is also the fallback.

    Returns:
        (integer lattice points, mask of points within l1 distance 1/2)
    """
    scaled = np.atleast_2d(np.asarray(x, dtype=float)) * N
    rounded = np.rint(scaled)
    within = np.abs(scaled - rounded).sum(axis=1) < 0.5
    return rounded.astype(np.int64), within


def rescale_discrete_path(vertices: np.ndarray, N: int, d: int = 3) -> Tuple[np.ndarray, np.ndarray]:
    """
    Apply the space scaling 1/N and time scaling 1/(d N^2) to a lattice loop skeleton.

    The k-th visited site is held on [k, k+1)/(d N^2). The result is a step
    polyline: every jump appears as two points at the same time.

    Returns:
        (times, points) with 2n + 1 rows for n jumps
    """
    x = np.asarray(vertices, dtype=float) / N
    n = x.shape[0] - 1
    t = np.arange(n + 1) / (d * float(N) * N)
    times = np.empty(2 * n + 1)
    points = np.empty((2 * n + 1, x.shape[1]))
    times[0::2] = t
    times[1::2] = t[1:]
    points[0::2] = x
    points[1::2] = x[:-1]
    return times, points


def positions_at(times: np.ndarray, points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Linear interpolation that accepts repeated times, taking the later point at a repeat."""
    idx = np.clip(np.searchsorted(times, query, side="right") - 1, 0, times.size - 1)
    nxt = np.minimum(idx + 1, times.size - 1)
    span = times[nxt] - times[idx]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(span > 0, (query - times[idx]) / span, 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    return points[idx] + frac[:, None] * (points[nxt] - points[idx])


def rescaled_lattice_loops(records: Iterable[Dict[str, Any]], N: int, d: int = 3) -> List[BrownianLoop]:
    """Rooted lattice loop records mapped to rescaled step polylines."""
    loops = []
    for record in records:
        times, points = rescale_discrete_path(np.asarray(record["vertices"]), N, d)
        loops.append(BrownianLoop(points[0].copy(), float(times[-1]), points, times, int(record["loop_id"])))
    return loops


@dataclass(frozen=True)
class MatchReport:
    """
    Greedy matching of rescaled lattice loops with Brownian loops.

    pairs holds (lattice loop id, Brownian loop id) rows; time_gaps and
    sup_distances are aligned with it. c_prime is the smallest C' with
    sup_distance <= C' ln(N) / N for every pair.
    """

    N: int
    alpha: Optional[float]
    r: float
    theta: float
    pairs: np.ndarray = field(repr=False)
    time_gaps: np.ndarray = field(repr=False)
    sup_distances: np.ndarray = field(repr=False)
    n_discrete: int = 0
    n_continuum: int = 0
    unmatched_discrete: int = 0
    unmatched_continuum: int = 0
    c_prime: float = float("nan")

    @property
    def time_bound(self) -> float:
        return 5.0 / (8.0 * self.N * self.N)

    @property
    def fraction_within_time_bound(self) -> float:
        return float(np.mean(self.time_gaps <= self.time_bound)) if self.time_gaps.size else float("nan")

    def as_dict(self) -> Dict[str, Any]:
        median = (lambda a: float(np.median(a)) if a.size else None)
        return {
            "N": self.N, "alpha": self.alpha, "r": self.r, "theta": self.theta,
            "matched": int(self.pairs.shape[0]),
            "n_discrete": self.n_discrete, "n_continuum": self.n_continuum,
            "unmatched_discrete": self.unmatched_discrete, "unmatched_continuum": self.unmatched_continuum,
            "median_sup_distance": median(self.sup_distances), "median_time_gap": median(self.time_gaps),
            "max_time_gap": float(self.time_gaps.max()) if self.time_gaps.size else None,
            "fraction_within_time_bound": self.fraction_within_time_bound,
            "c_prime": self.c_prime,
        }


def _trajectories(loops: Sequence[BrownianLoop], grid: np.ndarray) -> np.ndarray:
    return np.array([positions_at(loop.times, loop.samples, grid * loop.duration) for loop in loops]).reshape(
        len(loops), grid.size, 3)


def greedy_match(cost: np.ndarray, tie: np.ndarray) -> np.ndarray:
    """
    Injective matching that repeatedly takes the cheapest free pair.

    Returns:
        (row, column) pairs of shape (m, 2)
    """
    if cost.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.lexsort((tie.ravel(), cost.ravel()))
    rows, cols = np.unravel_index(order, cost.shape)
    used_r = np.zeros(cost.shape[0], dtype=bool)
    used_c = np.zeros(cost.shape[1], dtype=bool)
    pairs = []
    for i, j in zip(rows, cols):
        if not used_r[i] and not used_c[j]:
            used_r[i] = used_c[j] = True
            pairs.append((i, j))
            if len(pairs) == min(cost.shape):
                break
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def rescale_and_match(
    discrete_dump: Sequence[Dict[str, Any]],
    continuum_dump: Sequence[Dict[str, Any]],
    N: int,
    r: float,
    theta: float,
    d: int = 3,
    alpha: Optional[float] = None,
) -> MatchReport:
    """
    Compare long rescaled lattice loops with long Brownian loops.

    The lattice class keeps loops with more than d N^theta jumps rooted in
    the sup-norm ball of radius rN; the Brownian class keeps loops whose
    snapped duration exceeds N^(theta-2) and whose snapped root lies within
    r. Both are parametrized by the fraction of their duration, and pairs
    are taken greedily by sup distance, then by duration gap. This is a
    diagnostic on independent samples, not a coupling.

    Args:
        discrete_dump: Rooted lattice loop records
        continuum_dump: Brownian loop records
        N: Lattice scale
        r: Root radius in rescaled units
        theta: Duration exponent in (2/3, 2)
        d: Dimension
        alpha: Soup intensity, for the report only

    Returns:
        MatchReport

    Raises:
        SchemaMismatchError: if a dump carries another schema
        PreconditionError: if theta lies outside (2/3, 2)
    """
    if not 2.0 / 3.0 < theta < 2.0:
        raise PreconditionError(f"theta must lie in (2/3, 2), got {theta}")
    discrete_dump = list(discrete_dump)
    check_loop_schema(discrete_dump)
    if any(record.get("layer") != ROOTED for record in discrete_dump):
        raise SchemaMismatchError("the matching diagnostic needs rooted lattice loop records")
    continuum = loops_from_records(continuum_dump)

    threshold = d * N ** theta
    discrete = [rec for rec in discrete_dump
                if len(rec["vertices"]) - 1 > threshold and np.max(np.abs(rec["root"])) <= r * N]
    lattice_loops = rescaled_lattice_loops(discrete, N, d)
    kept = []
    for loop in continuum:
        snapped_root, _ = psi2_snap(loop.root, N)
        if psi1_snap(loop.duration, N) > N ** (theta - 2.0) and np.max(np.abs(snapped_root)) <= r * N:
            kept.append(loop)

    grid = np.linspace(0.0, 1.0, SCALING_CONFIG["match_grid"])
    if lattice_loops and kept:
        a = _trajectories(lattice_loops, grid)
        b = _trajectories(kept, grid)
        dist = np.empty((len(lattice_loops), len(kept)))
        for start in range(0, len(lattice_loops), 64):
            chunk = a[start:start + 64]
            dist[start:start + 64] = np.linalg.norm(chunk[:, None] - b[None], axis=3).max(axis=2)
        gap = np.abs(np.array([x.duration for x in lattice_loops])[:, None] - np.array([y.duration for y in kept])[None, :])
        pairs = greedy_match(dist, gap)
    else:
        dist = gap = np.zeros((len(lattice_loops), len(kept)))
        pairs = np.zeros((0, 2), dtype=np.int64)

    sup = dist[pairs[:, 0], pairs[:, 1]] if pairs.size else np.zeros(0)
    gaps = gap[pairs[:, 0], pairs[:, 1]] if pairs.size else np.zeros(0)
    c_prime = float(np.max(sup) * N / math.log(N)) if sup.size and N > 1 else float("nan")
    ids = np.array([[lattice_loops[i].loop_id, kept[j].loop_id] for i, j in pairs], dtype=np.int64).reshape(-1, 2)
    report = MatchReport(N, alpha, float(r), float(theta), ids, gaps, sup, len(lattice_loops), len(kept),
                         len(lattice_loops) - ids.shape[0], len(kept) - ids.shape[0], c_prime)
    logger.info("matching at N=%d: %d lattice, %d Brownian, %d pairs", N, len(lattice_loops), len(kept), ids.shape[0])
    return report


if __name__ == "__main__":
    # Example usage
    circle = np.array([[math.cos(a), math.sin(a), 0.0] for a in np.linspace(0, 2 * math.pi, 400)]) * 0.5
    target = SegmentSetTarget.from_polyline(circle)
    counts = [grid_counts(target, delta, (0, 0, 0), 1.0) for delta in delta_ladder(1.0, 4)]
    fit = box_dimension(counts)
    print(f"circle box dimension {fit.slope:.3f} [{fit.ci_lo:.3f}, {fit.ci_hi:.3f}]")
