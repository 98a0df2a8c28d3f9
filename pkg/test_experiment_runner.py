"""
Tests for the experiment runner

This script tests end-to-end runs of small configs: agreement with the
arcsin oracle, idempotent reruns, resumption after an interrupted run,
independence of the parallelism width and rollback on storage failures.
"""

import os
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

from config import OUTPUT_DIR_ENV, SCHEMA_VERSION, config_hash, validate_config
from errors import LoopLabError, StorageError
from experiment_runner import ExperimentRunner, ResultRecord, json_ready, run_experiment, scale_key
from record_store import RecordStore


def _two_point_config(directory, scales=(2,), replicas=400, parallelism=1, seed=11):
    data = {
        "schema_version": SCHEMA_VERSION,
        "experiment": {"kind": "two-point", "dimension": 3, "scales": list(scales), "replicas": replicas,
                       "seed": seed},
        "output": {"directory": directory},
        "execution": {"parallelism": parallelism, "batch_size": 64},
    }
    with patch.dict(os.environ, {OUTPUT_DIR_ENV: ""}):
        return validate_config(data)


def _read_bytes(directory):
    with open(os.path.join(directory, "records.jsonl"), "rb") as f:
        return f.read()


class TestHelpers(unittest.TestCase):
    """Test cases for scale keys and JSON conversion"""

    def setUp(self):
        """Set up test environment"""
        self.values = {"a": np.float64(1.5), "b": (np.int64(2), float("inf")), "c": np.bool_(True)}

    def test_scale_key(self):
        """Test that integer scales print bare and floats use repr"""
        self.assertEqual(scale_key(4), "4")
        self.assertEqual(scale_key(np.int64(4)), "4")
        self.assertEqual(scale_key(0.1), "0.1")
        self.assertEqual(scale_key(4.0), "4.0")

    def test_json_ready(self):
        """Test conversion of numpy values and non-finite floats"""
        self.assertEqual(json_ready(self.values), {"a": 1.5, "b": [2, None], "c": True})


class TestExperimentRunner(unittest.TestCase):
    """Test cases for ExperimentRunner"""

    def setUp(self):
        """Set up test environment"""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.directory = os.path.join(self.temp_dir.name, "run")

    def tearDown(self):
        """Clean up test environment"""
        self.temp_dir.cleanup()

    def test_two_point_matches_oracle(self):
        """Test that two-point records agree with the arcsin oracle"""
        records = run_experiment(_two_point_config(self.directory))
        self.assertEqual(len(records), 26)
        for record in records:
            self.assertIsInstance(record, ResultRecord)
            self.assertEqual(record.kind, "two-point")
            self.assertEqual(record.scale_key, "2")
            oracle = record.annex["arcsin"]
            stderr = max(record.stderr, np.sqrt(oracle * (1 - oracle) / record.replicas))
            self.assertLess(abs(record.estimate - oracle), 4 * stderr + 1e-9, record.label)

    def test_rerun_is_idempotent(self):
        """Test that a second run computes nothing and rewrites identical output"""
        config = _two_point_config(self.directory)
        first = run_experiment(config)
        before = _read_bytes(self.directory)
        runner = ExperimentRunner(config)
        with patch.object(runner.engine, "run_scale") as mock_run:
            second = runner.run()
        mock_run.assert_not_called()
        self.assertEqual(first, second)
        self.assertEqual(before, _read_bytes(self.directory))

    def test_resume_after_interruption(self):
        """Test that an interrupted run resumes at the first missing scale"""
        config = _two_point_config(self.directory, scales=(2, 3), replicas=200)
        runner = ExperimentRunner(config)
        original = runner.engine.run_scale

        def interrupted(scale, stream):
            if scale == 3:
                raise LoopLabError("interrupted")
            return original(scale, stream)

        with patch.object(runner.engine, "run_scale", side_effect=interrupted):
            with self.assertRaises(LoopLabError):
                runner.run()
        self.assertEqual(RecordStore(self.directory).completed_scales(runner.config_hash), {"2"})

        resumed = ExperimentRunner(config)
        original = resumed.engine.run_scale
        with patch.object(resumed.engine, "run_scale", side_effect=original) as mock_run:
            resumed.run()
        self.assertEqual([c.args[0] for c in mock_run.call_args_list], [3])

        clean_dir = os.path.join(self.temp_dir.name, "clean")
        run_experiment(_two_point_config(clean_dir, scales=(2, 3), replicas=200))
        self.assertEqual(_read_bytes(self.directory), _read_bytes(clean_dir))

    def test_parallelism_does_not_change_results(self):
        """Test that serial and parallel runs write identical records"""
        serial_dir = os.path.join(self.temp_dir.name, "serial")
        parallel_dir = os.path.join(self.temp_dir.name, "parallel")
        serial = _two_point_config(serial_dir, replicas=300)
        parallel = _two_point_config(parallel_dir, replicas=300, parallelism=2)
        self.assertEqual(config_hash(serial), config_hash(parallel))
        run_experiment(serial)
        run_experiment(parallel)
        self.assertEqual(_read_bytes(serial_dir), _read_bytes(parallel_dir))

    def test_seed_changes_results(self):
        """Test that a different seed gives a different hash and different draws"""
        run_experiment(_two_point_config(self.directory, seed=1))
        other_dir = os.path.join(self.temp_dir.name, "other")
        run_experiment(_two_point_config(other_dir, seed=2))
        self.assertNotEqual(_read_bytes(self.directory), _read_bytes(other_dir))

    def test_storage_failure_leaves_no_records(self):
        """Test that a failing append aborts the run without partial records"""
        config = _two_point_config(self.directory)
        runner = ExperimentRunner(config)
        with patch.object(RecordStore, "append_records", side_effect=StorageError("disk full")):
            with self.assertRaises(StorageError):
                runner.run()
        self.assertEqual(runner.store.get_records(), [])
        self.assertEqual(runner.pending_scales(), [2])


if __name__ == "__main__":
    unittest.main()
