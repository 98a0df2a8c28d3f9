"""
Configuration for the critical loop-soup laboratory

This file contains the default numerical settings of every module and the
loader/validator for experiment files. Experiment files are versioned TOML
documents; every field is validated before any sampling starts and unknown
keys are rejected.
"""

import os
import json
import math
import hashlib
from dataclasses import dataclass, field
from typing import List, Dict, Any, Optional, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from errors import ConfigValidationError

SCHEMA_VERSION = 1

# The only environment variable the laboratory reads
OUTPUT_DIR_ENV = "LOOPLAB_OUTPUT_DIR"

# Lattice geometry, Green's functions and heat kernels
LATTICE_CONFIG = {
    "dense_cap": 6000,
    "sparse_cap": 200000,
    "cg_tol": 1e-12,
    "kernel_tol": 1e-12,
    "max_kernel_time": 1.0e5,
    "residual_tol": 1e-9,
}

# Gaussian free field and metric-graph connectivity
GFF_CONFIG = {
    "method": "auto",
    "margin": 2.0,
    "min_replicas": 100,
    "z_value": 1.959963984540054,
    "one_sided_alpha": 0.05,
}

# Lattice loop soup layers
LOOP_CONFIG = {
    "alpha": 0.5,
    "eta": 1.0,
    "edge_grid": 64,
    "edge_proposals": 1000000,
    "edge_seed": 20240611,
    "edge_batch": 16384,
    "dense_factor_cap": 3000,
    "rooted_grid": 2000,
    "rooted_t_lo_factor": 0.25,
    "reduced_green_floor": 1e-12,
    "max_excursion_steps": 10000000,
    "loop_schema_version": 1,
}

# Brownian loop soup in R^3
BROWNIAN_CONFIG = {
    "observation_radius": 1.0,
    "root_factor": 2.0,
    "max_loop_points": 4096,
    "refine_levels": 2,
    "omitted_mass_ratio": 0.01,
    "loop_schema_version": 1,
}

# Scaling analysis
SCALING_CONFIG = {
    "n_boot": 1000,
    "ci_level": 0.95,
    "bootstrap_seed": 12345,
    "match_grid": 65,
    "min_box_scales": 4,
    "min_fit_scales": 3,
    "min_audit_scales": 4,
}

# Orchestration and persistence
RUN_CONFIG = {
    "output_dir": "data/runs",
    "parallelism": 1,
    "batch_size": 256,
    "db_name": "records.db",
    "records_name": "records.jsonl",
    "report_dir": "report",
}

EXPERIMENT_KINDS = (
    "two-point",
    "one-arm-metric",
    "crossing-metric",
    "removal",
    "brownian-one-arm",
    "crossing-mass",
    "kappa-tail",
    "box-dimension",
    "subadditivity",
    "match-diagnostic",
    "occupation",
    "loop-percolation",
)

# Kind-specific options with their defaults; the default fixes the type
KIND_OPTIONS = {
    "two-point": {"pairs": "origin"},
    "one-arm-metric": {
        "margin": 2.0,
        "margin_sensitivity": True,
        "sensitivity_replicas": 0,
        "positive_variant": False,
    },
    "crossing-metric": {"inner_radius": 1, "margin": 2.0, "submultiplicativity": False},
    "removal": {"inner_radius": 2, "alpha": 0.5, "margin": 1.0, "eta_sensitivity": True},
    "brownian-one-arm": {
        "alpha": 0.5,
        "sensitivity": True,
        "observation_radius": 1.0,
        "root_factor": 2.0,
        "max_loop_points": 4096,
    },
    "crossing-mass": {"alpha": 0.5, "inner_radius": 0.125, "root_factor": 2.0, "max_loop_points": 4096},
    "kappa-tail": {
        "alpha": 0.5,
        "inner_radius": 0.125,
        "outer_radius": 1.0,
        "root_factor": 2.0,
        "max_loop_points": 4096,
    },
    "box-dimension": {
        "target": "brownian-loop",
        "ladder": "dyadic",
        "window_radius": 1.0,
        "loop_duration": 1.0,
        "cluster_radius": 32,
        "cluster_inner_radius": 1,
        "max_attempts": 200,
    },
    "subadditivity": {"alpha": 0.5, "base": 2.0, "observation_radius": 1.0, "root_factor": 2.0, "max_loop_points": 4096},
    "match-diagnostic": {"radius": 1.0, "theta": 1.0, "alpha": 0.5, "t_max": 1.0, "levels": 8},
    "occupation": {"alpha": 0.5},
    "loop-percolation": {"alpha": 0.5, "margin": 2.0},
}

# Kinds whose scale ladder is made of lattice radii or stage integers
INTEGER_SCALE_KINDS = (
    "two-point",
    "one-arm-metric",
    "crossing-metric",
    "removal",
    "kappa-tail",
    "subadditivity",
    "match-diagnostic",
    "occupation",
    "loop-percolation",
)

# Kinds that sample the Brownian soup and therefore need the delta cutoff
BROWNIAN_KINDS = ("brownian-one-arm", "crossing-mass", "kappa-tail", "subadditivity")

# Kinds whose estimators refuse fewer than GFF_CONFIG["min_replicas"] replicas
CONNECTIVITY_KINDS = ("two-point", "one-arm-metric", "crossing-metric", "removal", "loop-percolation")

# Reports fit box-dimension counts against 1/delta instead of delta
FIT_AXIS = {"box-dimension": "inverse"}

_TOP_LEVEL_KEYS = ("schema_version", "experiment", "cutoffs", "output", "execution", "options")
_SECTION_KEYS = {
    "experiment": ("kind", "dimension", "scales", "replicas", "seed"),
    "cutoffs": ("delta", "eta", "rho_hit", "step"),
    "output": ("directory",),
    "execution": ("parallelism", "batch_size"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """
    A validated experiment description.

    Only the fields that influence results enter the config hash; the output
    directory and the execution width do not.
    """

    kind: str
    dimension: int
    scales: Tuple[float, ...]
    replicas: int
    seed: int
    delta: Optional[float] = None
    eta: float = LOOP_CONFIG["eta"]
    rho_hit: Optional[float] = None
    step: Optional[float] = None
    output_dir: str = RUN_CONFIG["output_dir"]
    parallelism: int = RUN_CONFIG["parallelism"]
    batch_size: int = RUN_CONFIG["batch_size"]
    options: Dict[str, Any] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def option(self, name: str) -> Any:
        """
        Get a kind-specific option, falling back to its default.

        Args:
            name: Option name as listed in KIND_OPTIONS

        Returns:
            The configured or default value
        """
        if name in self.options:
            return self.options[name]
        return KIND_OPTIONS[self.kind][name]


def canonical_config(config: ExperimentConfig) -> Dict[str, Any]:
    """
    Build the result-relevant part of a config as a plain dictionary.

    Args:
        config: Validated configuration

    Returns:
        Dictionary with every option filled in
    """
    options = dict(KIND_OPTIONS[config.kind])
    options.update(config.options)
    return {
        "schema_version": config.schema_version,
        "kind": config.kind,
        "dimension": config.dimension,
        "scales": list(config.scales),
        "replicas": config.replicas,
        "seed": config.seed,
        "delta": config.delta,
        "eta": config.eta,
        "rho_hit": config.rho_hit,
        "step": config.step,
        "options": options,
    }


def canonical_json(config: ExperimentConfig) -> str:
    """Serialize the canonical config with sorted keys and compact separators."""
    return json.dumps(canonical_config(config), sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    """
    Hash a config.

    Args:
        config: Validated configuration

    Returns:
        Hex SHA-256 digest of the canonical JSON
    """
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def config_from_canonical(text: str, output_dir: Optional[str] = None, parallelism: int = 1) -> ExperimentConfig:
    """
    Rebuild a config from its stored canonical JSON.

    Args:
        text: Canonical JSON as produced by canonical_json
        output_dir: Output directory to attach
        parallelism: Execution width to attach

    Returns:
        ExperimentConfig with the same hash as the original
    """
    data = json.loads(text)
    return ExperimentConfig(
        kind=data["kind"],
        dimension=data["dimension"],
        scales=tuple(data["scales"]),
        replicas=data["replicas"],
        seed=data["seed"],
        delta=data["delta"],
        eta=data["eta"],
        rho_hit=data["rho_hit"],
        step=data["step"],
        output_dir=output_dir or RUN_CONFIG["output_dir"],
        parallelism=parallelism,
        options=dict(data["options"]),
        schema_version=data["schema_version"],
    )


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return (isinstance(value, (int, float)) and not isinstance(value, bool)
            and math.isfinite(float(value)))


def _check_keys(section: str, mapping: Any, allowed, errors: List[str]) -> Dict[str, Any]:
    if not isinstance(mapping, dict):
        errors.append(f"{section}: expected a table")
        return {}
    for key in mapping:
        if key not in allowed:
            errors.append(f"{section}.{key}: unknown key")
    return mapping


def _validate_options(kind: str, raw: Dict[str, Any], errors: List[str]) -> Dict[str, Any]:
    defaults = KIND_OPTIONS.get(kind, {})
    options: Dict[str, Any] = {}
    for key, value in raw.items():
        if key not in defaults:
            errors.append(f"options.{key}: unknown option for kind '{kind}'")
            continue
        default = defaults[key]
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = _is_int(value)
        elif isinstance(default, float):
            ok = _is_number(value)
            value = float(value) if ok else value
        else:
            ok = isinstance(value, str)
        if not ok:
            errors.append(f"options.{key}: expected {type(default).__name__}, got {value!r}")
            continue
        options[key] = value

    merged = dict(defaults)
    merged.update(options)
    for key in ("margin", "alpha", "inner_radius", "outer_radius", "observation_radius",
                "radius", "t_max", "window_radius", "loop_duration", "base"):
        if key in options and not merged[key] > 0:
            errors.append(f"options.{key}: must be positive")
    if kind in ("one-arm-metric", "crossing-metric", "loop-percolation") and merged.get("margin", 2.0) < 1.0:
        errors.append("options.margin: must be at least 1")
    if kind == "two-point" and merged["pairs"] not in ("origin", "all"):
        errors.append("options.pairs: must be 'origin' or 'all'")
    if kind == "box-dimension":
        if merged["target"] not in ("ball", "segment", "brownian-loop", "lattice-cluster"):
            errors.append("options.target: must be one of ball, segment, brownian-loop, lattice-cluster")
        if merged["ladder"] not in ("dyadic", "decimal", "free"):
            errors.append("options.ladder: must be dyadic, decimal or free")
    if kind == "kappa-tail" and not merged["inner_radius"] < merged["outer_radius"]:
        errors.append("options.inner_radius: must be smaller than options.outer_radius")
    if kind == "subadditivity" and not merged["base"] > 1.0:
        errors.append("options.base: must be larger than 1")
    if kind == "match-diagnostic" and not (2.0 / 3.0 < merged["theta"] < 2.0):
        errors.append("options.theta: must lie in (2/3, 2)")
    return options


def validate_config(data: Dict[str, Any], source: Optional[str] = None) -> ExperimentConfig:
    """
    Validate a parsed experiment document.

    Args:
        data: Parsed TOML document
        source: Optional file name used in error messages

    Returns:
        The validated ExperimentConfig

    Raises:
        ConfigValidationError: listing every offending field
    """
    errors: List[str] = []
    data = _check_keys("config", data, _TOP_LEVEL_KEYS, errors)

    schema = data.get("schema_version", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        errors.append(f"schema_version: expected {SCHEMA_VERSION}, got {schema!r}")

    experiment = _check_keys("experiment", data.get("experiment", {}), _SECTION_KEYS["experiment"], errors)
    cutoffs = _check_keys("cutoffs", data.get("cutoffs", {}), _SECTION_KEYS["cutoffs"], errors)
    output = _check_keys("output", data.get("output", {}), _SECTION_KEYS["output"], errors)
    execution = _check_keys("execution", data.get("execution", {}), _SECTION_KEYS["execution"], errors)
    options_table = data.get("options", {})
    option_names = tuple(options_table) if isinstance(options_table, dict) else ()
    raw_options = _check_keys("options", options_table, option_names, errors)

    kind = experiment.get("kind")
    if kind not in EXPERIMENT_KINDS:
        errors.append(f"experiment.kind: must be one of {', '.join(EXPERIMENT_KINDS)}")

    dimension = experiment.get("dimension", 3)
    if not _is_int(dimension) or dimension < 3:
        errors.append("experiment.dimension: must be an integer >= 3")
    elif kind in BROWNIAN_KINDS + ("box-dimension", "match-diagnostic") and dimension != 3:
        errors.append("experiment.dimension: continuum experiments run in dimension 3 only")

    scales = experiment.get("scales")
    scale_tuple: Tuple[float, ...] = ()
    if not isinstance(scales, list) or not scales:
        errors.append("experiment.scales: must be a non-empty list")
    elif not all(_is_number(s) and s > 0 for s in scales):
        errors.append("experiment.scales: every scale must be a positive number")
    elif len(set(scales)) != len(scales):
        errors.append("experiment.scales: scales must be distinct")
    elif kind in INTEGER_SCALE_KINDS and not all(_is_int(s) for s in scales):
        errors.append(f"experiment.scales: kind '{kind}' needs integer scales")
    else:
        scale_tuple = tuple(scales)

    replicas = experiment.get("replicas")
    if not _is_int(replicas) or replicas < 1:
        errors.append("experiment.replicas: must be a positive integer")
    elif kind in CONNECTIVITY_KINDS and replicas < GFF_CONFIG["min_replicas"]:
        errors.append(f"experiment.replicas: kind '{kind}' needs at least {GFF_CONFIG['min_replicas']} replicas")

    seed = experiment.get("seed")
    if not _is_int(seed) or not (0 <= seed < 2 ** 64):
        errors.append("experiment.seed: must be an integer in [0, 2**64)")

    for key in ("delta", "eta", "rho_hit", "step"):
        value = cutoffs.get(key)
        if value is not None and (not _is_number(value) or value <= 0):
            errors.append(f"cutoffs.{key}: must be a positive number")
    delta = cutoffs.get("delta")
    rho_hit = cutoffs.get("rho_hit")
    if kind in BROWNIAN_KINDS and delta is None:
        errors.append("cutoffs.delta: required for Brownian-soup experiments")
    if _is_number(delta) and _is_number(rho_hit) and delta > 0 and not rho_hit < delta / 10.0:
        errors.append("cutoffs.rho_hit: must be smaller than delta/10")

    directory = os.environ.get(OUTPUT_DIR_ENV) or output.get("directory", RUN_CONFIG["output_dir"])
    if not isinstance(directory, str) or not directory:
        errors.append("output.directory: must be a non-empty string")

    parallelism = execution.get("parallelism", RUN_CONFIG["parallelism"])
    if not _is_int(parallelism) or (parallelism < 1 and parallelism != -1):
        errors.append("execution.parallelism: must be a positive integer or -1")
    batch_size = execution.get("batch_size", RUN_CONFIG["batch_size"])
    if not _is_int(batch_size) or batch_size < 1:
        errors.append("execution.batch_size: must be a positive integer")

    options = _validate_options(kind, raw_options, errors) if kind in EXPERIMENT_KINDS else {}

    if errors:
        raise ConfigValidationError(errors, source)

    if delta is not None and rho_hit is None:
        rho_hit = float(delta) / 20.0
    return ExperimentConfig(
        kind=kind,
        dimension=dimension,
        scales=scale_tuple,
        replicas=replicas,
        seed=seed,
        delta=float(delta) if delta is not None else None,
        eta=float(cutoffs.get("eta", LOOP_CONFIG["eta"])),
        rho_hit=float(rho_hit) if rho_hit is not None else None,
        step=float(cutoffs["step"]) if cutoffs.get("step") is not None else None,
        output_dir=directory,
        parallelism=parallelism,
        batch_size=batch_size,
        options=options,
        schema_version=SCHEMA_VERSION,
    )


def load_config(path: str) -> ExperimentConfig:
    """
    Load and validate an experiment file.

    Args:
        path: Path to a TOML experiment file

    Returns:
        The validated ExperimentConfig

    Raises:
        ConfigValidationError: when the file is missing, unparsable or invalid
    """
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigValidationError([f"file not found: {path}"], path)
    except tomllib.TOMLDecodeError as e:
        raise ConfigValidationError([f"invalid TOML: {e}"], path)
    return validate_config(data, source=path)
