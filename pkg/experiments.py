"""
Experiment Engine for the critical loop-soup laboratory

This module maps every experiment kind to the estimator that runs one scale
of its ladder. Each handler draws all of its randomness from the stream it is
given, returns one or more ScaleOutcome rows and records its sensitivity
annexes next to the main estimate.
"""

import math
import logging
import itertools
from dataclasses import dataclass, field
from functools import partial
from typing import List, Dict, Any, Callable, Optional, Sequence

import numpy as np
from scipy import stats

from brownian_loop_soup import (
    SoupWindow,
    brownian_bridge,
    crossing_mass,
    kappa_samples,
    loop_records,
    one_arm_q,
    sample_rooted_brownian_loops,
)
from cluster_set import ClusterSet
from config import BROWNIAN_CONFIG, GFF_CONFIG, LOOP_CONFIG, ExperimentConfig
from errors import PreconditionError, UnsupportedParametersError
from gff_metric_graph import (
    ConnectivityEstimate,
    ConnectivityQuery,
    GffSampler,
    binomial_estimate,
    connectivity_estimate,
    extend_to_edges,
    open_edge_pairs,
    submultiplicativity_ratio,
    two_point_estimates,
)
from lattice_core import RngStream, as_generator, build_box, green_dirichlet, run_replicas, stream_id_for
from loop_soup_lattice import (
    loop_percolation_estimate,
    occupation_samples,
    removal_experiment,
    rooted_loop_records,
    sample_rooted_lattice_loops,
)
from scaling_analysis import BallTarget, SegmentSetTarget, grid_counts, rescale_and_match

logger = logging.getLogger(__name__)

# Standard error of a sample median relative to that of the mean, for normal data
_MEDIAN_SE_FACTOR = math.sqrt(math.pi / 2.0)

_MAX_LOOP_LEVELS = 20


@dataclass(frozen=True)
class ScaleOutcome:
    """
    One estimate produced at one scale.

    label tells rows of the same scale apart (a vertex pair, a layer
    variant); scale is the value the estimate is fitted against.
    """

    label: str
    scale: float
    estimate: Optional[float]
    stderr: Optional[float]
    ci_lo: Optional[float]
    ci_hi: Optional[float]
    replicas: int
    annex: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_estimate(cls, label: str, scale: float, estimate: ConnectivityEstimate,
                      annex: Optional[Dict[str, Any]] = None) -> "ScaleOutcome":
        extra = {"successes": estimate.successes, "one_sided": estimate.one_sided}
        extra.update(annex or {})
        return cls(label, float(scale), estimate.estimate, estimate.stderr, estimate.ci_lo, estimate.ci_hi,
                   estimate.replicas, extra)

    @classmethod
    def from_mean(cls, label: str, scale: float, mean: float, stderr: float, replicas: int,
                  annex: Optional[Dict[str, Any]] = None) -> "ScaleOutcome":
        z = GFF_CONFIG["z_value"]
        return cls(label, float(scale), float(mean), float(stderr), float(mean - z * stderr),
                   float(mean + z * stderr), int(replicas), dict(annex or {}))


def vertex_label(x: Sequence[int]) -> str:
    return ",".join(str(int(c)) for c in x)


def compare_sensitivity(name: str, main: float, main_se: float, alternative: float, alternative_se: float) -> Dict[str, Any]:
    """
    Compare a rerun under changed parameters with the main estimate.

    Args:
        name: Annex name used in the log message
        main: Main estimate
        main_se: Its standard error
        alternative: Rerun estimate
        alternative_se: Its standard error

    Returns:
        Annex entry with the rerun and a flag set when the two differ by
        more than 2 combined standard errors
    """
    difference = alternative - main
    tolerance = 2.0 * math.hypot(main_se, alternative_se)
    flagged = bool(abs(difference) > tolerance)
    if flagged:
        logger.warning("%s sensitivity: %.4g differs from the main estimate %.4g by more than 2 standard errors",
                       name, alternative, main)
    return {"estimate": alternative, "stderr": alternative_se, "difference": difference, "flagged": flagged}


def ladder_delta(config: ExperimentConfig, scale: float) -> float:
    """
    Grid scale of one rung of the box-counting ladder.

    Dyadic and decimal ladders read the scale as an exponent k and give
    window_radius * 2^-k or window_radius * 10^-k; the free ladder takes the
    scale as delta itself.
    """
    ladder = config.option("ladder")
    radius = config.option("window_radius")
    if ladder == "dyadic":
        return radius * 2.0 ** -scale
    if ladder == "decimal":
        return radius * 10.0 ** -scale
    return float(scale)


def brownian_loop_target(duration: float, delta_min: float, rng) -> SegmentSetTarget:
    """
    A single Brownian loop rooted at the origin, resolved below delta_min.

    The bridge gets enough halvings for its typical step to fall below
    delta_min, capped at 2**20 steps.
    """
    levels = math.ceil(math.log2(max(duration / (delta_min * delta_min), 2.0))) + 1
    levels = int(min(max(levels, 4), _MAX_LOOP_LEVELS))
    _, points = brownian_bridge(np.zeros(3), duration, levels, rng)
    return SegmentSetTarget.from_polyline(points, label="brownian-loop")


def lattice_cluster_target(R: int, inner: int, max_attempts: int, rng) -> SegmentSetTarget:
    """
    The largest sign cluster crossing from B(inner) to the sphere of radius R/2.

    Fields on the Dirichlet box B(R) are drawn until one has such a cluster.
    The cluster is returned as its vertices and open edges, scaled by 1/R.

    Raises:
        PreconditionError: if the radii leave no annulus or no field of
            max_attempts has a crossing cluster
    """
    if not 0 <= inner < R // 2:
        raise PreconditionError(f"cluster_inner_radius {inner} must be below cluster_radius/2 = {R // 2}")
    gen = as_generator(rng)
    box = build_box(3, R)
    sampler = GffSampler(box, "spectral")
    source = box.sup_norm <= inner
    sphere = box.sup_norm == R // 2
    for attempt in range(1, max_attempts + 1):
        gff = extend_to_edges(sampler.sample(gen), gen)
        pairs = open_edge_pairs(gff)
        labels = ClusterSet.from_pairs(box.size, pairs).labels()
        crossing = np.intersect1d(labels[source], labels[sphere])
        if not crossing.size:
            continue
        sizes = np.bincount(labels)
        best = crossing[np.argmax(sizes[crossing])]
        members = labels == best
        edges = pairs[members[pairs[:, 0]]]
        coords = box.coords.astype(float) / R
        starts = np.vstack([coords[members], coords[edges[:, 0]]])
        ends = np.vstack([coords[members], coords[edges[:, 1]]])
        logger.debug("crossing cluster of %d vertices after %d fields", int(members.sum()), attempt)
        return SegmentSetTarget(starts, ends, "lattice-cluster")
    raise PreconditionError(f"no crossing cluster in {max_attempts} fields on B({R})")


def _match_replica(N: int, r: float, theta: float, alpha: float, t_max: float, levels: int, d: int,
                   stream: RngStream):
    lattice = sample_rooted_lattice_loops(N, r, theta, alpha, t_max, stream.child("lattice"), d=d)
    t_lo = LOOP_CONFIG["rooted_t_lo_factor"] * N ** (theta - 2.0)
    brownian = sample_rooted_brownian_loops(r, t_lo, t_max, alpha, levels, stream.child("brownian"))
    return rescale_and_match(rooted_loop_records(lattice, N), loop_records(brownian), N, r, theta, d=d, alpha=alpha)


class ExperimentEngine:
    """
    Runs single scales of an experiment.

    Samples that every scale shares (the kappa counts, the box-counting
    targets) come from streams keyed by the config hash alone and are
    computed once per engine.
    """

    def __init__(self, config: ExperimentConfig, config_hash: str, progress: bool = False):
        """
        Initialize the engine.

        Args:
            config: Validated configuration
            config_hash: Hash of the config, used to key the shared streams
            progress: Show progress bars over replica batches
        """
        self.config = config
        self.config_hash = config_hash
        self.progress = progress
        self._shared: Dict[str, Any] = {}
        self.handlers: Dict[str, Callable[[float, RngStream], List[ScaleOutcome]]] = {
            "two-point": self._two_point,
            "one-arm-metric": self._one_arm_metric,
            "crossing-metric": self._crossing_metric,
            "removal": self._removal,
            "brownian-one-arm": self._brownian_one_arm,
            "crossing-mass": self._crossing_mass,
            "kappa-tail": self._kappa_tail,
            "box-dimension": self._box_dimension,
            "subadditivity": self._subadditivity,
            "match-diagnostic": self._match_diagnostic,
            "occupation": self._occupation,
            "loop-percolation": self._loop_percolation,
        }

    @property
    def execution(self) -> Dict[str, int]:
        return {"n_jobs": self.config.parallelism, "batch_size": self.config.batch_size}

    def shared_stream(self, label: str) -> RngStream:
        return RngStream(self.config.seed, stream_id_for(self.config_hash, "shared", label))

    def run_scale(self, scale: float, stream: RngStream) -> List[ScaleOutcome]:
        """
        Run one scale of the configured experiment.

        Args:
            scale: Scale as written in the config
            stream: Stream of this scale; replica i uses stream.child(i)

        Returns:
            The rows of this scale

        Raises:
            UnsupportedParametersError: for a kind without a handler
        """
        handler = self.handlers.get(self.config.kind)
        if handler is None:
            raise UnsupportedParametersError(f"no handler for experiment kind {self.config.kind!r}")
        return handler(scale, stream)

    # -----------------------------------------------------------------------
    # Metric-graph connectivity
    # -----------------------------------------------------------------------

    def _two_point(self, scale: float, stream: RngStream) -> List[ScaleOutcome]:
        cfg = self.config
        box = build_box(cfg.dimension, int(scale))
        vertices = [tuple(int(c) for c in x) for x in box.coords]
        origin = (0,) * cfg.dimension
        if cfg.option("pairs") == "origin":
            pairs = [(origin, x) for x in vertices if x != origin]
        else:
            pairs = list(itertools.combinations(vertices, 2))
        if not pairs:
            raise PreconditionError(f"box {box.box_id} has a single interior vertex")
        rows = two_point_estimates(box, pairs, cfg.replicas, stream, **self.execution)
        outcomes = []
        for row in rows:
            a, b = row["pair"]
            estimate = ConnectivityEstimate(row["estimate"], row["stderr"], row["ci_lo"], row["ci_hi"],
                                            row["successes"], row["replicas"], row["one_sided"])
            deviation = (row["estimate"] - row["arcsin"]) / row["stderr"] if row["stderr"] > 0 else None
            outcomes.append(ScaleOutcome.from_estimate(
                f"{vertex_label(a)}|{vertex_label(b)}", scale, estimate,
                {"arcsin": row["arcsin"], "deviation_in_stderr": deviation},
            ))
        return outcomes

    def _one_arm_metric(self, scale: float, stream: RngStream) -> List[ScaleOutcome]:
        cfg = self.config
        N = int(scale)
        margin = cfg.option("margin")
        query = ConnectivityQuery.one_arm(N, cfg.replicas, stream, d=cfg.dimension, margin=margin)
        main = connectivity_estimate(query, progress=self.progress, **self.execution)
        annex: Dict[str, Any] = {"margin": margin}
        if cfg.option("margin_sensitivity"):
            replicas = cfg.option("sensitivity_replicas") or cfg.replicas
            wide = connectivity_estimate(
                ConnectivityQuery.one_arm(N, replicas, stream.child("margin"), d=cfg.dimension, margin=2.0 * margin),
                **self.execution,
            )
            annex["margin_doubled"] = compare_sensitivity(f"margin at N={N}", main.estimate, main.stderr,
                                                          wide.estimate, wide.stderr)
        if cfg.option("positive_variant"):
            positive = connectivity_estimate(
                ConnectivityQuery.one_arm(N, cfg.replicas, stream.child("positive"), d=cfg.dimension, margin=margin,
                                         sign="positive"),
                **self.execution,
            )
            annex["positive"] = {"estimate": positive.estimate, "stderr": positive.stderr}
        return [ScaleOutcome.from_estimate("one-arm", scale, main, annex)]

    def _crossing_metric(self, scale: float, stream: RngStream) -> List[ScaleOutcome]:
        cfg = self.config
        n, N = cfg.option("inner_radius"), int(scale)
        margin = cfg.option("margin")

        def rho(inner: int, outer: int, label: str) -> ConnectivityEstimate:
            query = ConnectivityQuery.crossing(inner, outer, cfg.replicas, stream.child(label) if label else stream,
                                               d=cfg.dimension, margin=margin)
            return connectivity_estimate(query, progress=self.progress and not label, **self.execution)

        main = rho(n, N, "")
        annex: Dict[str, Any] = {"inner_radius": n, "margin": margin}
        if cfg.option("submultiplicativity"):
            m = int(round(math.sqrt(max(n, 1) * N)))
            if n < m < N:
                rho_nm, rho_mN = rho(n, m, "inner"), rho(m, N, "outer")
                annex["submultiplicativity"] = {
                    "m": m,
                    "rho_nm": rho_nm.estimate,
                    "rho_mN": rho_mN.estimate,
                    "K": submultiplicativity_ratio(main.estimate, rho_nm.estimate, rho_mN.estimate),
                }
            else:
                annex["submultiplicativity"] = {"m": m, "K": None}
        return [ScaleOutcome.from_estimate("crossing", scale, main, annex)]

    # -----------------------------------------------------------------------
    # Lattice loop soup
    # -----------------------------------------------------------------------

    def _removal(self, scale: float, stream: RngStream) -> List[ScaleOutcome]:
        cfg = self.config
        n, N = cfg.option("inner_radius"), int(scale)
        kwargs = dict(alpha=cfg.option("alpha"), margin=cfg.option("margin"), d=cfg.dimension, **self.execution)
        result = removal_experiment(n, N, cfg.eta, cfg.replicas, stream, progress=self.progress, **kwargs)
        annex: Dict[str, Any] = {"inner_radius": n, "eta": cfg.eta, "bootstrap_ci": True}
        if cfg.option("eta_sensitivity"):
            for divisor in (2, 4):
                rerun = removal_experiment(n, N, cfg.eta / divisor, cfg.replicas, stream.child(f"eta/{divisor}"), **kwargs)
                annex[f"eta/{divisor}"] = compare_sensitivity(
                    f"eta/{divisor} at N={N}", result.difference, result.se_difference,
                    rerun.difference, rerun.se_difference,
                )
        difference = ScaleOutcome(
            "difference", float(scale), result.difference, result.se_difference, result.ci_lo, result.ci_hi,
            result.replicas, annex,
        )
        return [
            ScaleOutcome.from_mean("full", scale, result.p_full, result.se_full, result.replicas),
            ScaleOutcome.from_mean("removed", scale, result.p_removed, result.se_removed, result.replicas),
            difference,
        ]

    def _occupation(self, scale: float, stream: RngStream) -> List[ScaleOutcome]:
        cfg = self.config
        alpha = cfg.option("alpha")
        box = build_box(cfg.dimension, int(scale))
        diagonal = green_dirichlet(box).diagonal()
        samples = occupation_samples(box, alpha, cfg.replicas, stream, **self.execution)
        outcomes = []
        for i, x in enumerate(box.coords):
            column = samples[:, i]
            stderr = column.std(ddof=1) / math.sqrt(column.size) if column.size > 1 else 0.0
            ks = stats.kstest(column, "gamma", args=(alpha, 0.0, diagonal[i]))
            outcomes.append(ScaleOutcome.from_mean(
                vertex_label(x), scale, float(column.mean()), float(stderr), cfg.replicas,
                {"oracle_mean": alpha * float(diagonal[i]), "ks_pvalue": float(ks.pvalue)},
            ))
        return outcomes

    def _loop_percolation(self, scale: float, stream: RngStream) -> List[ScaleOutcome]:
        cfg = self.config
        estimate = loop_percolation_estimate(int(scale), cfg.replicas, stream, alpha=cfg.option("alpha"),
                                             margin=cfg.option("margin"), d=cfg.dimension, **self.execution)
        return [ScaleOutcome.from_estimate("one-arm", scale, estimate, {"alpha": cfg.option("alpha")})]

    # -----------------------------------------------------------------------
    # Brownian loop soup
    # -----------------------------------------------------------------------

    def window(self, observation_radius: float) -> SoupWindow:
        cfg = self.config
        return SoupWindow.from_cutoff(
            cfg.delta,
            observation_radius=observation_radius,
            root_factor=cfg.option("root_factor"),
            rho_hit=cfg.rho_hit,
            step=cfg.step,
            max_points=cfg.option("max_loop_points"),
        )

    def _one_arm_rows(self, epsilon: float, stream: RngStream, sensitivity: bool,
                      annex: Dict[str, Any]) -> List[ScaleOutcome]:
        cfg = self.config
        alpha = cfg.option("alpha")
        window = self.window(cfg.option("observation_radius"))
        main = one_arm_q(epsilon, window, cfg.replicas, stream, alpha=alpha, progress=self.progress, **self.execution)
        annex = dict(annex, delta=window.delta, rho_hit=window.rho_hit, omitted_mass=main.omitted_mass,
                     omitted_mass_flagged=bool(main.omitted_mass > BROWNIAN_CONFIG["omitted_mass_ratio"]
                                               * max(main.estimate.estimate, main.estimate.ci_hi)))
        if sensitivity:
            half_delta = window.delta / 2.0
            reruns = {
                "delta/2": window.with_cutoffs(delta=half_delta, rho_hit=min(window.rho_hit, half_delta / 20.0)),
                "rho_hit/2": window.with_cutoffs(rho_hit=window.rho_hit / 2.0),
            }
            for name, alt_window in reruns.items():
                rerun = one_arm_q(epsilon, alt_window, cfg.replicas, stream.child(name), alpha=alpha, **self.execution)
                annex[name] = compare_sensitivity(f"{name} at epsilon={epsilon:g}", main.estimate.estimate,
                                                  main.estimate.stderr, rerun.estimate.estimate, rerun.estimate.stderr)
        return [
            ScaleOutcome.from_estimate("cluster", epsilon, main.estimate, annex),
            ScaleOutcome.from_estimate("single-loop", epsilon, main.single, {"epsilon": epsilon}),
        ]

    def _brownian_one_arm(self, scale: float, stream: RngStream) -> List[ScaleOutcome]:
        return self._one_arm_rows(float(scale), stream, self.config.option("sensitivity"), {"epsilon": float(scale)})

    def _subadditivity(self, scale: float, stream: RngStream) -> List[ScaleOutcome]:
        base = self.config.option("base")
        k = int(scale)
        epsilon = base ** -k
        rows = self._one_arm_rows(epsilon, stream, False, {"epsilon": epsilon, "k": k, "base": base})
        return rows[:1]

    def _crossing_mass(self, scale: float, stream: RngStream) -> List[ScaleOutcome]:
        cfg = self.config
        r = cfg.option("inner_radius")
        # one window for the whole ladder, large enough for the widest annulus
        radius = max(BROWNIAN_CONFIG["observation_radius"], r * max(cfg.scales))
        window = self.window(radius)
        ((ratio, (mean, stderr)),) = crossing_mass(window, cfg.option("alpha"), r, [float(scale)], cfg.replicas,
                                                   stream, **self.execution).items()
        return [ScaleOutcome.from_mean("mass", ratio, mean, stderr, cfg.replicas,
                                       {"inner_radius": r, "observation_radius": radius, "delta": window.delta})]

    def _kappa_tail(self, scale: float, stream: RngStream) -> List[ScaleOutcome]:
        cfg = self.config
        r, R = cfg.option("inner_radius"), cfg.option("outer_radius")
        if "kappa" not in self._shared:
            window = self.window(max(BROWNIAN_CONFIG["observation_radius"], R))
            self._shared["kappa"] = kappa_samples(window, cfg.option("alpha"), r, R, cfg.replicas,
                                                  self.shared_stream("kappa"), **self.execution)
        kappas = self._shared["kappa"]
        level = int(scale)
        estimate = binomial_estimate(int(np.sum(kappas >= level)), cfg.replicas)
        previous = float(np.mean(kappas >= level - 1))
        annex = {
            "r_over_R": r / R,
            "mean_kappa": float(kappas.mean()),
            "ratio_to_previous": estimate.estimate / previous if previous > 0 else None,
        }
        return [ScaleOutcome.from_estimate("tail", scale, estimate, annex)]

    # -----------------------------------------------------------------------
    # Scaling analysis
    # -----------------------------------------------------------------------

    def box_targets(self) -> List[Any]:
        """Targets of the box-counting experiment, sampled once per engine."""
        if "targets" in self._shared:
            return self._shared["targets"]
        cfg = self.config
        kind = cfg.option("target")
        radius = cfg.option("window_radius")
        if kind == "ball":
            targets = [BallTarget((0.0, 0.0, 0.0), radius)]
        elif kind == "segment":
            targets = [SegmentSetTarget.segment((-radius / 2.0, 0.0, 0.0), (radius / 2.0, 0.0, 0.0))]
        elif kind == "brownian-loop":
            delta_min = min(ladder_delta(cfg, s) for s in cfg.scales)
            stream = self.shared_stream("targets")
            targets = [brownian_loop_target(cfg.option("loop_duration"), delta_min, stream.child(i))
                       for i in range(cfg.replicas)]
        else:
            stream = self.shared_stream("targets")
            targets = [lattice_cluster_target(cfg.option("cluster_radius"), cfg.option("cluster_inner_radius"),
                                              cfg.option("max_attempts"), stream.child(i))
                       for i in range(cfg.replicas)]
        self._shared["targets"] = targets
        return targets

    def _box_dimension(self, scale: float, stream: RngStream) -> List[ScaleOutcome]:
        cfg = self.config
        delta = ladder_delta(cfg, scale)
        radius = cfg.option("window_radius")
        targets = self.box_targets()
        counts = [grid_counts(target, delta, (0.0, 0.0, 0.0), radius) for target in targets]
        psi = np.array([c.psi_count for c in counts], dtype=float)
        stderr = psi.std(ddof=1) / math.sqrt(psi.size) if psi.size > 1 else 0.0
        annex = {
            "phi_count": counts[0].phi_count,
            "delta": delta,
            "ladder": cfg.option("ladder"),
            "ladder_index": None if cfg.option("ladder") == "free" else scale,
        }
        return [ScaleOutcome.from_mean(cfg.option("target"), delta, float(psi.mean()), float(stderr), psi.size, annex)]

    def _match_diagnostic(self, scale: float, stream: RngStream) -> List[ScaleOutcome]:
        cfg = self.config
        N = int(scale)
        task = partial(_match_replica, N, cfg.option("radius"), cfg.option("theta"), cfg.option("alpha"),
                       cfg.option("t_max"), cfg.option("levels"), cfg.dimension)
        reports = run_replicas(task, stream, cfg.replicas, progress=self.progress, desc=f"match N={N}",
                               **self.execution)
        sup = np.concatenate([r.sup_distances for r in reports]) if reports else np.zeros(0)
        gaps = np.concatenate([r.time_gaps for r in reports]) if reports else np.zeros(0)
        annex = {
            "matched": int(sup.size),
            "n_lattice": int(sum(r.n_discrete for r in reports)),
            "n_brownian": int(sum(r.n_continuum for r in reports)),
            "unmatched_lattice": int(sum(r.unmatched_discrete for r in reports)),
            "unmatched_brownian": int(sum(r.unmatched_continuum for r in reports)),
            "median_time_gap": float(np.median(gaps)) if gaps.size else None,
            "fraction_within_time_bound": float(np.mean(gaps <= 5.0 / (8.0 * N * N))) if gaps.size else None,
            "c_prime": float(np.max(sup) * N / math.log(N)) if sup.size and N > 1 else None,
        }
        if not sup.size:
            logger.warning("no matched loop pairs at N=%d", N)
            return [ScaleOutcome("median-sup-distance", float(N), None, None, None, None, 0, annex)]
        stderr = _MEDIAN_SE_FACTOR * sup.std(ddof=1) / math.sqrt(sup.size) if sup.size > 1 else 0.0
        return [ScaleOutcome.from_mean("median-sup-distance", N, float(np.median(sup)), float(stderr), sup.size, annex)]
