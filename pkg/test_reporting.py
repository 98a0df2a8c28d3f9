"""
Tests for reporting

This script tests the CSV, JSON-lines and SVG reports: their columns, their
byte stability and the fitted slopes they carry.
"""

import os
import csv
import json
import tempfile
import unittest

from config import SCHEMA_VERSION
from errors import PreconditionError, StorageError, UnknownFormatError
from record_store import RecordStore, read_jsonl, record_line, write_jsonl
from reporting import CSV_COLUMNS, emit_report, families, fit_family, fit_lines, load_records


def _record(scale, estimate, label="one-arm", kind="one-arm-metric", stderr=0.01, annex=None):
    return {
        "config_hash": "f00d",
        "kind": kind,
        "scale_key": str(scale),
        "scale": float(scale),
        "label": label,
        "estimate": estimate,
        "stderr": stderr,
        "ci_lo": None if estimate is None else estimate - 2 * stderr,
        "ci_hi": None if estimate is None else estimate + 2 * stderr,
        "replicas": 10000,
        "wall_time": 0.5,
        "annex": annex or {},
        "schema_version": SCHEMA_VERSION,
    }


def _power_law(exponent=-0.5, scales=(2, 4, 8, 16, 32)):
    return [_record(s, 0.8 * s ** exponent, stderr=0.002 * s ** exponent) for s in scales]


class TestEmitReport(unittest.TestCase):
    """Test cases for emit_report"""

    def setUp(self):
        """Set up test environment"""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.out = os.path.join(self.temp_dir.name, "report")
        self.records = _power_law()

    def tearDown(self):
        """Clean up test environment"""
        self.temp_dir.cleanup()

    def test_empty_records(self):
        """Test that an empty record list is refused"""
        with self.assertRaises(PreconditionError):
            emit_report([], "csv", self.out)

    def test_unknown_format(self):
        """Test that unsupported formats are refused"""
        with self.assertRaises(UnknownFormatError):
            emit_report(self.records, "xlsx", self.out)

    def test_single_record_csv(self):
        """Test that one record gives a header and one row"""
        (path,) = emit_report(self.records[:1], "csv", self.out)
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(tuple(rows[0]), CSV_COLUMNS)
        self.assertEqual(len(rows), 2)
        self.assertEqual(rows[1][0], "one-arm-metric")
        self.assertEqual(float(rows[1][2]), self.records[0]["estimate"])

    def test_csv_timing_column(self):
        """Test that wall times are only written on request"""
        (path,) = emit_report(self.records, "csv", self.out, include_timing=True)
        with open(path, "r", encoding="utf-8", newline="") as f:
            header = next(csv.reader(f))
        self.assertEqual(header[-1], "wall_time")

    def test_missing_estimate_is_empty_cell(self):
        """Test that records without an estimate write empty cells"""
        (path,) = emit_report([_record(4, None, stderr=None)], "csv", self.out)
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[1][2], "")

    def test_byte_stable(self):
        """Test that identical records give byte-identical files in every format"""
        other = os.path.join(self.temp_dir.name, "again")
        for fmt in ("csv", "jsonl", "svg"):
            first = emit_report(self.records, fmt, self.out)
            second = emit_report(self.records, fmt, other)
            for a, b in zip(first, second):
                with open(a, "rb") as fa, open(b, "rb") as fb:
                    self.assertEqual(fa.read(), fb.read(), a)

    def test_jsonl_fits(self):
        """Test that the JSON-lines report carries the family fit"""
        paths = emit_report(self.records, "jsonl", self.out)
        self.assertEqual([os.path.basename(p) for p in paths], ["records.jsonl", "fits.jsonl"])
        self.assertEqual(len(read_jsonl(paths[0])), len(self.records))
        with open(paths[1], "r", encoding="utf-8") as f:
            fits = [json.loads(line) for line in f]
        self.assertEqual(len(fits), 1)
        self.assertAlmostEqual(fits[0]["fit"]["slope"], -0.5, places=6)

    def test_svg_slope_annotation(self):
        """Test that the SVG shows the fitted slope to 4 decimals"""
        (path,) = emit_report(self.records, "svg", self.out)
        self.assertEqual(os.path.basename(path), "one-arm-metric.svg")
        fit = fit_family("one-arm-metric", self.records)
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        self.assertIn(f"slope {fit.slope:.4f}", text)


class TestFits(unittest.TestCase):
    """Test cases for family grouping, fits and audits"""

    def setUp(self):
        """Set up test environment"""
        self.records = _power_law() + [_record(s, 0.5 * s ** -1.0, label="other") for s in (2, 4, 8)]

    def test_families(self):
        """Test that records group by hash, kind and label in order"""
        groups = families(self.records)
        self.assertEqual(list(groups), [("f00d", "one-arm-metric", "one-arm"), ("f00d", "one-arm-metric", "other")])

    def test_too_few_scales(self):
        """Test that families with fewer than 3 positive estimates are not fitted"""
        rows = [_record(2, 0.4), _record(4, 0.0), _record(8, None)]
        self.assertIsNone(fit_family("one-arm-metric", rows))

    def test_box_dimension_axis(self):
        """Test that box counts are fitted against 1/delta"""
        rows = [_record(d, 3.0 * d ** -2.0, label="ball", kind="box-dimension") for d in (0.5, 0.25, 0.125, 0.0625)]
        fit = fit_family("box-dimension", rows)
        self.assertAlmostEqual(fit.slope, 2.0, places=6)

    def test_subadditivity_audit(self):
        """Test that subadditivity families carry the audit"""
        rows = [_record(0.5 ** k, 0.9 * 2.0 ** (-0.4 * k), label="cluster", kind="subadditivity",
                        annex={"k": k, "base": 2.0}) for k in range(1, 6)]
        (line,) = fit_lines(rows)
        entry = json.loads(line)
        self.assertIsNotNone(entry["audit"])
        self.assertIn("c_star", entry["audit"])


class TestLoadRecords(unittest.TestCase):
    """Test cases for load_records"""

    def setUp(self):
        """Set up test environment"""
        self.temp_dir = tempfile.TemporaryDirectory()

    def tearDown(self):
        """Clean up test environment"""
        self.temp_dir.cleanup()

    def test_prefers_jsonl(self):
        """Test that the JSON-lines export is read when present"""
        write_jsonl(os.path.join(self.temp_dir.name, "records.jsonl"), [record_line(r) for r in _power_law()])
        self.assertEqual(len(load_records(self.temp_dir.name)), 5)

    def test_falls_back_to_database(self):
        """Test that the database is read when there is no export"""
        RecordStore(self.temp_dir.name).append_records(_power_law())
        self.assertEqual(len(load_records(self.temp_dir.name)), 5)

    def test_empty_directory(self):
        """Test that a directory without records is a storage error"""
        with self.assertRaises(StorageError):
            load_records(self.temp_dir.name)


if __name__ == "__main__":
    unittest.main()
