"""
Experiment Runner for the critical loop-soup laboratory

This module runs a validated experiment across its scale ladder. Each scale
gets a random stream derived from the config hash and the scale, so results
do not depend on the order of execution or the number of workers. Records
are checkpointed after every scale and completed scales are skipped when a
run is restarted.
"""

import math
import time
import logging
from dataclasses import dataclass, field, asdict
from typing import List, Dict, Any, Optional

import numpy as np
from tqdm import tqdm

from config import SCHEMA_VERSION, ExperimentConfig, canonical_json, config_hash
from experiments import ExperimentEngine, ScaleOutcome
from lattice_core import RngStream, stream_id_for
from record_store import RecordStore

logger = logging.getLogger(__name__)


def scale_key(scale: float) -> str:
    """Stable text key of a scale: integers print bare, floats use repr."""
    if isinstance(scale, (int, np.integer)) and not isinstance(scale, bool):
        return str(int(scale))
    return repr(float(scale))


def json_ready(value: Any) -> Any:
    """
    Convert a value to plain JSON types.

    numpy scalars and arrays become Python numbers and lists, tuples become
    lists and non-finite floats become None.
    """
    if isinstance(value, dict):
        return {str(k): json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [json_ready(v) for v in list(value)]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


@dataclass(frozen=True)
class ResultRecord:
    """
    One persisted estimate.

    The config hash points at the canonical config stored next to the
    records; scale_key is the scale as written in the config and scale is
    the value used for fits.
    """

    config_hash: str
    kind: str
    scale_key: str
    scale: float
    label: str
    estimate: Optional[float]
    stderr: Optional[float]
    ci_lo: Optional[float]
    ci_hi: Optional[float]
    replicas: int
    wall_time: float
    annex: Dict[str, Any] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ResultRecord":
        return cls(
            config_hash=data["config_hash"],
            kind=data["kind"],
            scale_key=data["scale_key"],
            scale=float(data["scale"]),
            label=data["label"],
            estimate=data["estimate"],
            stderr=data["stderr"],
            ci_lo=data["ci_lo"],
            ci_hi=data["ci_hi"],
            replicas=int(data["replicas"]),
            wall_time=float(data.get("wall_time", 0.0)),
            annex=dict(data.get("annex", {})),
            schema_version=int(data["schema_version"]),
        )

    @classmethod
    def from_outcome(cls, config_hash: str, kind: str, key: str, outcome: ScaleOutcome,
                     wall_time: float) -> "ResultRecord":
        clean = json_ready([outcome.scale, outcome.estimate, outcome.stderr, outcome.ci_lo, outcome.ci_hi])
        return cls(config_hash, kind, key, clean[0], outcome.label, clean[1], clean[2], clean[3], clean[4],
                   int(outcome.replicas), float(wall_time), json_ready(outcome.annex))


class ExperimentRunner:
    """
    Runs one experiment config with checkpointing.
    """

    def __init__(self, config: ExperimentConfig, progress: bool = False, include_timing: bool = False):
        """
        Initialize the runner.

        Args:
            config: Validated configuration
            progress: Show progress bars
            include_timing: Keep wall times in the JSON-lines export
        """
        self.config = config
        self.config_hash = config_hash(config)
        self.progress = progress
        self.include_timing = include_timing
        self.store = RecordStore(config.output_dir)
        self.engine = ExperimentEngine(config, self.config_hash, progress=progress)

    def scale_stream(self, scale: float) -> RngStream:
        return RngStream(self.config.seed, stream_id_for(self.config_hash, scale_key(scale)))

    def pending_scales(self) -> List[float]:
        done = self.store.completed_scales(self.config_hash)
        return [s for s in self.config.scales if scale_key(s) not in done]

    def run_scale(self, scale: float) -> List[ResultRecord]:
        """
        Run, store and export one scale.

        Returns:
            The records of this scale
        """
        key = scale_key(scale)
        start = time.perf_counter()
        outcomes = self.engine.run_scale(scale, self.scale_stream(scale))
        wall_time = time.perf_counter() - start
        records = [ResultRecord.from_outcome(self.config_hash, self.config.kind, key, outcome, wall_time)
                   for outcome in outcomes]
        self.store.append_records([r.as_dict() for r in records])
        self.store.export_jsonl(include_timing=self.include_timing)
        logger.info("%s scale %s: %d records in %.1fs", self.config.kind, key, len(records), wall_time)
        return records

    def run(self) -> List[ResultRecord]:
        """
        Run every pending scale of the ladder in config order.

        Returns:
            All records of this config, including those of earlier runs
        """
        self.store.register_config(self.config_hash, canonical_json(self.config))
        pending = self.pending_scales()
        skipped = len(self.config.scales) - len(pending)
        if skipped:
            logger.info("config %s: skipping %d completed scales", self.config_hash[:12], skipped)
        for scale in tqdm(pending, desc=self.config.kind, disable=not self.progress):
            self.run_scale(scale)
        if not pending:
            self.store.export_jsonl(include_timing=self.include_timing)
        return self.records()

    def records(self) -> List[ResultRecord]:
        return [ResultRecord.from_dict(r) for r in self.store.get_records(self.config_hash)]


def run_experiment(config: ExperimentConfig, progress: bool = False, include_timing: bool = False) -> List[ResultRecord]:
    """
    Run an experiment across its scale ladder.

    Args:
        config: Validated configuration
        progress: Show progress bars
        include_timing: Keep wall times in the JSON-lines export

    Returns:
        ResultRecords in scale order

    Raises:
        StorageError: if the output directory or database cannot be written
        LoopLabError: for failures inside an estimator
    """
    runner = ExperimentRunner(config, progress=progress, include_timing=include_timing)
    return runner.run()
