"""
test_metrics.py
Tests für metrics (PCC, SRCC, SDR, MSE, MAE, MetricReport)
"""

import sys
from pathlib import Path

# Projekt-Root zum Path hinzufügen
sys.path.insert(0, str(Path(__file__).parent.parent))

import json
import shutil
import tempfile
import unittest

import numpy as np
import pandas as pd

from config import InvalidArgumentError, UndefinedCorrelationError
from metrics import MetricReport, mae, mse, pcc, sdr, srcc


class TestCorrelation(unittest.TestCase):
    """Tests für pcc / srcc"""

    def test_pcc_examples(self):
        x = np.array([0.3, 1.1, 2.0, 5.0])
        self.assertAlmostEqual(pcc(x, x), 1.0, places=12)
        self.assertAlmostEqual(pcc(x, -2 * x + 3), -1.0, places=12)
        self.assertAlmostEqual(pcc([1, 2, 3], [1, 2, 4]), 0.9820, places=4)

    def test_pcc_symmetry(self):
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal(20), rng.standard_normal(20)
        self.assertEqual(pcc(x, y), pcc(y, x))

    def test_pcc_errors(self):
        with self.assertRaises(UndefinedCorrelationError):
            pcc([1, 1, 1], [1, 2, 3])
        with self.assertRaises(InvalidArgumentError):
            pcc([1], [2])

    def test_srcc_examples(self):
        x = np.array([0.5, 0.1, 3.0, 2.0, 7.0])
        self.assertAlmostEqual(srcc(x, np.exp(x)), 1.0, places=12)
        self.assertAlmostEqual(srcc([1, 2, 3, 4], [4, 3, 2, 1]), -1.0, places=12)
        self.assertAlmostEqual(srcc([1, 2, 3, 4], [1, 3, 2, 4]), 0.8, places=12)

    def test_srcc_invariant_to_monotone_transform(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal(15), rng.standard_normal(15)
        self.assertAlmostEqual(srcc(x, y), srcc(x ** 3, np.tanh(y) + 5), places=12)

    def test_srcc_ties_average_ranks(self):
        self.assertAlmostEqual(srcc([1, 1, 2], [1, 2, 3]), pcc([1.5, 1.5, 3], [1, 2, 3]), places=12)

    def test_srcc_constant(self):
        with self.assertRaises(UndefinedCorrelationError):
            srcc([2, 2, 2], [1, 2, 3])


class TestErrors(unittest.TestCase):
    """Tests für mse / mae"""

    def test_examples(self):
        self.assertEqual(mse([0.5, 0.7], [0.5, 0.7]), 0.0)
        self.assertEqual(mae([0.5, 0.7], [0.5, 0.7]), 0.0)
        self.assertAlmostEqual(mse([0.3, 0.9], [0.6, 0.6]), 0.09, places=12)
        self.assertAlmostEqual(mae([0.3, 0.9], [0.6, 0.6]), 0.3, places=12)

    def test_jensen(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p, t = rng.standard_normal(7), rng.standard_normal(7)
            self.assertGreaterEqual(mse(p, t) + 1e-15, mae(p, t) ** 2)

    def test_empty(self):
        with self.assertRaises(InvalidArgumentError):
            mse([], [])


class TestSdr(unittest.TestCase):
    """Tests für sdr"""

    def setUp(self):
        self.ref = np.random.default_rng(3).standard_normal(8000)

    def test_identity_cap(self):
        self.assertEqual(sdr(self.ref, self.ref), 100.0)
        self.assertEqual(sdr(self.ref, 2 * self.ref), 100.0)

    def test_orthogonal_noise(self):
        """Rauschen mit 1/10 der Referenzenergie, orthogonal zur Referenz → 10 dB"""
        noise = np.random.default_rng(4).standard_normal(8000)
        noise -= (noise @ self.ref) / (self.ref @ self.ref) * self.ref
        noise *= np.sqrt(0.1 * (self.ref @ self.ref) / (noise @ noise))
        self.assertAlmostEqual(sdr(self.ref, self.ref + noise), 10.0, delta=0.01)

    def test_scale_invariance(self):
        est = self.ref + 0.3 * np.random.default_rng(5).standard_normal(8000)
        base = sdr(self.ref, est)
        for c in (0.01, 0.5, 3.0, 1000.0):
            self.assertAlmostEqual(sdr(self.ref, c * est), base, places=9)

    def test_silent_reference(self):
        with self.assertRaises(InvalidArgumentError):
            sdr(np.zeros(100), np.ones(100))

    def test_length_trim(self):
        est = self.ref + 0.1
        self.assertAlmostEqual(sdr(self.ref, np.concatenate([est, np.ones(50)])), sdr(self.ref, est), places=12)


class TestMetricReport(unittest.TestCase):
    """Tests für MetricReport"""

    def setUp(self):
        self.tmpdir = Path(tempfile.mkdtemp())
        self.records = [
            {"id": "a", "t60_true": 0.3, "t60_reg": 0.35, "t60_creg": 0.3, "sdr_unprocessed": 5.0, "sdr_enhanced": 8.0},
            {"id": "b", "t60_true": 0.3, "t60_reg": 0.4, "t60_creg": 0.45, "sdr_unprocessed": 6.0, "sdr_enhanced": 7.0},
            {"id": "c", "t60_true": 0.9, "t60_reg": 0.8, "t60_creg": 1.0, "sdr_unprocessed": 1.0, "sdr_enhanced": 4.0},
            {"id": "d", "t60_true": 0.9, "t60_reg": 1.1, "t60_creg": 0.7, "sdr_unprocessed": 2.0, "sdr_enhanced": 3.0},
        ]

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_groups(self):
        report = MetricReport.from_records(self.records)
        self.assertEqual(list(report.aggregates), ["all", "0.30", "0.90"])
        self.assertEqual(report.aggregates["all"]["n"], 4)
        self.assertAlmostEqual(report.aggregates["0.90"]["sdr_enhanced"]["mean"], 3.5)
        self.assertAlmostEqual(report.aggregates["all"]["sdr_gain"]["mean"], 2.0)
        # innerhalb einer T60-Gruppe ist die Ziel-Varianz 0
        self.assertIsNone(report.aggregates["0.30"]["reg"]["pcc"])
        self.assertAlmostEqual(report.aggregates["all"]["reg"]["mae"], np.mean([0.05, 0.1, 0.1, 0.2]))

    def test_save_load(self):
        path = MetricReport.from_records(self.records, {"mode": "oracle"}).save(self.tmpdir / "report.json")
        loaded = MetricReport.load(path)
        self.assertEqual(loaded.meta["mode"], "oracle")
        frame = pd.read_csv(self.tmpdir / "report.csv")
        self.assertEqual(list(frame["id"]), ["a", "b", "c", "d"])

    def test_tampered_aggregates(self):
        path = MetricReport.from_records(self.records).save(self.tmpdir / "report.json")
        data = json.loads(path.read_text(encoding="utf-8"))
        data["aggregates"]["all"]["sdr_enhanced"]["mean"] = 99.0
        path.write_text(json.dumps(data), encoding="utf-8")
        with self.assertRaises(InvalidArgumentError):
            MetricReport.load(path)

    def test_missing_heads(self):
        """Dereverb-only: keine T60-Werte, nur SDR"""
        recs = [{"id": "x", "t60_true": 0.6, "sdr_unprocessed": 1.0, "sdr_enhanced": 2.0}]
        report = MetricReport.from_records(recs)
        self.assertNotIn("reg", report.aggregates["all"])
        self.assertIsNone(report.records[0]["t60_reg"])


if __name__ == "__main__":
    unittest.main()
