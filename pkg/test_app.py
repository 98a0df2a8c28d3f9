"""
Tests for the command line

This script tests the run, report, validate and oracle commands and their
exit codes.
"""

import io
import os
import tempfile
import unittest
from unittest.mock import patch

from app import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from config import OUTPUT_DIR_ENV

TWO_POINT = """schema_version = 1

[experiment]
kind = "two-point"
dimension = 3
scales = [2]
replicas = 200
seed = 3

[output]
directory = "{directory}"
"""


class TestCommandLine(unittest.TestCase):
    """Test cases for app.main"""

    def setUp(self):
        """Set up test environment"""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.run_dir = os.path.join(self.temp_dir.name, "run")
        self.config_path = os.path.join(self.temp_dir.name, "two_point.toml")
        with open(self.config_path, "w", encoding="utf-8") as f:
            f.write(TWO_POINT.format(directory=self.run_dir.replace("\\", "/")))
        self.env = patch.dict(os.environ, {OUTPUT_DIR_ENV: ""})
        self.env.start()

    def tearDown(self):
        """Clean up test environment"""
        self.env.stop()
        self.temp_dir.cleanup()

    def _main(self, *argv):
        out, err = io.StringIO(), io.StringIO()
        with patch("sys.stdout", out), patch("sys.stderr", err):
            code = main(["--quiet", "--log-level", "ERROR", *argv])
        return code, out.getvalue(), err.getvalue()

    def test_validate(self):
        """Test that a valid file exits with 0"""
        code, out, _ = self._main("validate", self.config_path)
        self.assertEqual(code, EXIT_OK)
        self.assertIn("valid two-point experiment", out)

    def test_validate_failure(self):
        """Test that an invalid file exits with 2 and lists the fields"""
        bad = os.path.join(self.temp_dir.name, "bad.toml")
        with open(bad, "w", encoding="utf-8") as f:
            f.write('[experiment]\nkind = "two-point"\nscales = []\nreplicas = 5\nseed = 1\n')
        code, _, err = self._main("validate", bad)
        self.assertEqual(code, EXIT_VALIDATION)
        self.assertTrue(err.startswith("Error: "))
        self.assertIn("experiment.scales", err)

    def test_run_and_report(self):
        """Test a run followed by a CSV report"""
        code, out, _ = self._main("run", self.config_path)
        self.assertEqual(code, EXIT_OK)
        self.assertIn("26 records", out)
        self.assertTrue(os.path.exists(os.path.join(self.run_dir, "records.jsonl")))

        code, out, _ = self._main("report", self.run_dir, "--format", "csv")
        self.assertEqual(code, EXIT_OK)
        csv_path = os.path.join(self.run_dir, "report", "records.csv")
        self.assertEqual(out.strip(), csv_path)
        with open(csv_path, "r", encoding="utf-8") as f:
            self.assertEqual(len(f.read().splitlines()), 27)

    def test_report_unknown_format(self):
        """Test that an unknown report format exits with 3"""
        self._main("run", self.config_path)
        code, _, err = self._main("report", self.run_dir, "--format", "pdf")
        self.assertEqual(code, EXIT_RUNTIME)
        self.assertIn("unknown report format", err)

    def test_report_missing_directory(self):
        """Test that a directory without records exits with 3"""
        code, _, _ = self._main("report", os.path.join(self.temp_dir.name, "nothing"), "--format", "csv")
        self.assertEqual(code, EXIT_RUNTIME)

    def test_oracle_two_point(self):
        """Test the arcsin table on the N=2 box"""
        code, out, _ = self._main("oracle", "two-point", "--N", "2")
        self.assertEqual(code, EXIT_OK)
        rows = [line.split("\t") for line in out.splitlines() if not line.startswith("#")][1:]
        self.assertEqual(len(rows), 27)
        origin = dict(rows)["0,0,0"]
        self.assertAlmostEqual(float(origin), 1.0)

    def test_oracle_green(self):
        """Test the Green oracle and its residual"""
        code, out, _ = self._main("oracle", "green", "--N", "3")
        self.assertEqual(code, EXIT_OK)
        self.assertIn("G(0,0) = ", out)
        residual = float(out.split("residual = ")[1])
        self.assertLess(residual, 1e-9)

    def test_oracle_rejects_low_dimension(self):
        """Test that unsupported dimensions exit with 3"""
        code, _, err = self._main("oracle", "green", "--N", "2", "--dimension", "2")
        self.assertEqual(code, EXIT_RUNTIME)
        self.assertTrue(err.startswith("Error: "))


if __name__ == "__main__":
    unittest.main()
