"""
Integration script for the critical loop-soup laboratory

This script runs the acceptance gates end to end at reduced replica counts:
experiments go through validate_config, the runner, the record store and the
report writers exactly as they do from the command line.
"""

import os
import math
import tempfile
from typing import Any, Dict, List

import numpy as np

from config import OUTPUT_DIR_ENV, SCHEMA_VERSION, validate_config
from errors import LoopLabError
from experiment_runner import ResultRecord, run_experiment
from reporting import emit_report, fit_family


def make_config(directory: str, kind: str, scales: List[Any], replicas: int, seed: int = 2024,
                cutoffs: Dict[str, Any] = None, options: Dict[str, Any] = None):
    """Build a validated config writing to directory"""
    data = {
        "schema_version": SCHEMA_VERSION,
        "experiment": {"kind": kind, "dimension": 3, "scales": scales, "replicas": replicas, "seed": seed},
        "output": {"directory": directory},
    }
    if cutoffs:
        data["cutoffs"] = cutoffs
    if options:
        data["options"] = options
    os.environ.pop(OUTPUT_DIR_ENV, None)
    return validate_config(data)


def _family(records: List[ResultRecord], label: str) -> List[Dict[str, Any]]:
    return [r.as_dict() for r in records if r.label == label]


def test_arcsin_gate():
    """Two-point estimates on N = 2, 3 against the arcsin oracle"""
    print("Testing arcsin oracle gate...")
    with tempfile.TemporaryDirectory() as workdir:
        return _arcsin_gate(workdir)


def _arcsin_gate(workdir: str):
    config = make_config(os.path.join(workdir, "two-point"), "two-point", [2, 3], 4000)
    records = run_experiment(config)
    assert len(records) == 26 + 124, f"Expected 150 records, got {len(records)}"
    for record in records:
        oracle = record.annex["arcsin"]
        sigma = math.sqrt(oracle * (1.0 - oracle) / record.replicas)
        assert abs(record.estimate - oracle) < 4.0 * sigma + 1e-9, \
            f"{record.label} at N={record.scale_key}: {record.estimate} vs {oracle}"
    print("Arcsin oracle gate tests passed!")
    return True


def test_occupation_gate():
    """Three-layer occupation against alpha * G(x,x) and the gamma law"""
    print("Testing isomorphism occupation gate...")
    with tempfile.TemporaryDirectory() as workdir:
        return _occupation_gate(workdir)


def _occupation_gate(workdir: str):
    config = make_config(os.path.join(workdir, "occupation"), "occupation", [2], 2000)
    records = run_experiment(config)
    assert len(records) == 27, f"Expected 27 records, got {len(records)}"
    for record in records:
        assert abs(record.estimate - record.annex["oracle_mean"]) < 4.0 * record.stderr, \
            f"{record.label}: mean {record.estimate} vs {record.annex['oracle_mean']}"
    pvalues = np.array([r.annex["ks_pvalue"] for r in records])
    assert pvalues.min() > 1e-4, f"KS p-value {pvalues.min()} too small"
    print("Occupation gate tests passed!")
    return True


def test_removal_gate():
    """Paired full-minus-removed crossing difference at (n, N) = (2, 8)"""
    print("Testing removal experiment...")
    with tempfile.TemporaryDirectory() as workdir:
        return _removal_gate(workdir)


def _removal_gate(workdir: str):
    config = make_config(os.path.join(workdir, "removal"), "removal", [8], 400,
                         options={"eta_sensitivity": False})
    records = run_experiment(config)
    rows = {r.label: r for r in records}
    assert set(rows) == {"full", "removed", "difference"}, f"Unexpected rows {sorted(rows)}"
    difference = rows["difference"]
    assert difference.estimate >= 0.0, f"Removing loops increased crossings: {difference.estimate}"
    assert rows["removed"].estimate <= rows["full"].estimate, "Removed crossing exceeds full crossing"
    assert difference.ci_lo <= difference.estimate <= difference.ci_hi, "Difference outside its interval"
    print("Removal experiment tests passed!")
    return True


def test_dimension_calibration():
    """Box-counting slopes of a ball and a segment"""
    print("Testing dimension calibration...")
    with tempfile.TemporaryDirectory() as workdir:
        return _dimension_calibration(workdir)


def _dimension_calibration(workdir: str):
    for target, expected, tolerance in (("ball", 3.0, 0.05), ("segment", 1.0, 0.05)):
        config = make_config(os.path.join(workdir, f"box-{target}"), "box-dimension", [6, 7, 8, 9, 10], 1,
                             options={"target": target})
        records = run_experiment(config)
        fit = fit_family("box-dimension", _family(records, target))
        assert fit is not None, f"No fit for {target}"
        assert abs(fit.slope - expected) < tolerance, f"{target} slope {fit.slope:.3f}, expected {expected}"
    print("Dimension calibration tests passed!")
    return True


def test_determinism_and_resume():
    """Byte-identical outputs across directories, reruns and report formats"""
    print("Testing determinism and resumability...")
    with tempfile.TemporaryDirectory() as workdir:
        return _determinism_and_resume(workdir)


def _determinism_and_resume(workdir: str):
    outputs = []
    for name in ("first", "second"):
        directory = os.path.join(workdir, "determinism", name)
        config = make_config(directory, "two-point", [2], 300, seed=99)
        run_experiment(config)
        run_experiment(config)
        paths = [os.path.join(directory, "records.jsonl")]
        records = run_experiment(config)
        for fmt in ("csv", "jsonl", "svg"):
            paths.extend(emit_report(records, fmt, os.path.join(directory, "report")))
        contents = []
        for path in paths:
            with open(path, "rb") as f:
                contents.append(f.read())
        outputs.append(contents)
    assert outputs[0] == outputs[1], "Outputs differ between identical runs"
    print("Determinism tests passed!")
    return True


def run_all_tests():
    """Run all acceptance gates"""
    print("Running all tests...")
    gates = [
        ("ArcsinGate", test_arcsin_gate),
        ("OccupationGate", test_occupation_gate),
        ("RemovalGate", test_removal_gate),
        ("DimensionCalibration", test_dimension_calibration),
        ("Determinism", test_determinism_and_resume),
    ]
    results = {}
    for name, gate in gates:
        try:
            results[name] = gate()
        except (AssertionError, LoopLabError) as e:
            print(f"{name} failed: {e}")
            results[name] = False

    print("\nTest Summary:")
    for name, passed in results.items():
        print(f"{name}: {'PASSED' if passed else 'FAILED'}")

    all_passed = all(results.values())
    print(f"\nOverall: {'ALL TESTS PASSED!' if all_passed else 'SOME TESTS FAILED!'}")

    return all_passed


if __name__ == "__main__":
    run_all_tests()
