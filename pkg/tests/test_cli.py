"""
test_cli.py
Tests für DerevKit.py (Unterbefehle, Exit-Codes, Run-Record)
"""

import sys
from pathlib import Path

# Projekt-Root zum Path hinzufügen
sys.path.insert(0, str(Path(__file__).parent.parent))

import json
import shutil
import tempfile
import unittest

from DerevKit import RUN_RECORD_FILE, run


class TestCli(unittest.TestCase):
    """Tests für run(argv)"""

    def setUp(self):
        self.tmpdir = Path(tempfile.mkdtemp())
        self.config_path = self.tmpdir / "c.json"
        self.config_path.write_text(json.dumps({
            "dataset": {
                "duration": 0.5,
                "task": "derev",
                "derev_t60s": [0.3, 0.9],
                "rirs_per_cell": {"train": 1, "val": 0, "test": 1},
            }
        }), encoding="utf-8")

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def _record(self, out_dir):
        return json.loads((Path(out_dir) / RUN_RECORD_FILE).read_text(encoding="utf-8"))

    def test_rir_simulate_and_measure(self):
        wav = self.tmpdir / "rir" / "r.wav"
        code = run(["rir", "simulate", "--dims", "9x8x7", "--t60", "0.6", "--fs", "8000", "--out", str(wav)])
        self.assertEqual(code, 0)
        self.assertTrue(wav.exists())
        self.assertTrue(wav.with_suffix(".json").exists())
        record = self._record(wav.parent)
        self.assertEqual(record["command"], "rir simulate")
        self.assertEqual(record["exit_code"], 0)
        self.assertIn("numpy", record["versions"])

        out = self.tmpdir / "measure"
        self.assertEqual(run(["rir", "measure", str(wav), "--out", str(out)]), 0)
        result = json.loads((out / "r_measure.json").read_text(encoding="utf-8"))
        self.assertLess(abs(result["measured_t60"] - 0.6) / 0.6, 0.15)

    def test_rir_simulate_wall_model_flags(self):
        default = self.tmpdir / "d.wav"
        self.assertEqual(run(["rir", "simulate", "--dims", "6x5x4", "--t60", "0.4", "--out", str(default)]), 0)
        side = json.loads(default.with_suffix(".json").read_text(encoding="utf-8"))
        self.assertEqual(side["wall_model"], "calibrated")
        self.assertFalse(side["highpass"])

        literal = self.tmpdir / "p.wav"
        self.assertEqual(run(["rir", "simulate", "--dims", "6x5x4", "--t60", "0.4", "--wall-model", "pressure",
                              "--highpass", "--out", str(literal)]), 0)
        side = json.loads(literal.with_suffix(".json").read_text(encoding="utf-8"))
        self.assertEqual(side["wall_model"], "pressure")
        self.assertTrue(side["highpass"])
        self.assertEqual(run(["rir", "simulate", "--dims", "6x5x4", "--t60", "0.4", "--wall-model", "eyring",
                              "--out", str(self.tmpdir / "e.wav")]), 2)

    def test_rir_decompose(self):
        wav = self.tmpdir / "r.wav"
        run(["rir", "simulate", "--dims", "6x5x4", "--t60", "0.4", "--out", str(wav)])
        out = self.tmpdir / "parts"
        self.assertEqual(run(["rir", "decompose", str(wav), "--out", str(out)]), 0)
        for name in ("direct", "early", "late"):
            self.assertTrue((out / f"r_{name}.wav").exists())

    def test_t60_off_grid(self):
        code = run(["train", "t60", "--config", str(self.config_path), "--t60", "2.0",
                    "--out", str(self.tmpdir / "t")])
        self.assertEqual(code, 2)

    def test_bad_arguments(self):
        self.assertEqual(run(["frobnicate"]), 2)
        self.assertEqual(run(["rir", "simulate", "--dims", "9x8", "--t60", "0.6", "--out", "x.wav"]), 2)
        self.assertEqual(run(["evaluate", "--config", str(self.tmpdir / "missing.json")]), 2)

    def test_evaluate_needs_checkpoint_or_oracle(self):
        out = self.tmpdir / "e"
        self.assertEqual(run(["evaluate", "--dataset", str(self.tmpdir), "--out", str(out)]), 2)
        self.assertEqual(self._record(out)["status"], "config_error")

    def test_dataset_build_deterministic_and_oracle_evaluate(self):
        for name in ("a", "b"):
            code = run(["dataset", "build", "--config", str(self.config_path), "--seed", "7",
                        "--out", str(self.tmpdir / name)])
            self.assertEqual(code, 0)
        a = (self.tmpdir / "a" / "dataset" / "manifest.jsonl").read_bytes()
        b = (self.tmpdir / "b" / "dataset" / "manifest.jsonl").read_bytes()
        self.assertEqual(a, b)
        self.assertTrue((self.tmpdir / "a" / "derevkit.log").exists())

        out = self.tmpdir / "eval"
        code = run(["evaluate", "--dataset", str(self.tmpdir / "a" / "dataset"), "--oracle",
                    "--out", str(out)])
        self.assertEqual(code, 0)
        report = json.loads((out / "report.json").read_text(encoding="utf-8"))
        self.assertEqual(report["meta"]["mode"], "oracle")
        self.assertTrue((out / "report.csv").exists())
        self.assertFalse(self._record(out)["partial"])

    def test_selftest_subset(self):
        out = self.tmpdir / "s"
        self.assertEqual(run(["selftest", "--check", "parseval", "--check", "expectation", "--out", str(out)]), 0)
        checks = json.loads((out / "selftest.json").read_text(encoding="utf-8"))["checks"]
        self.assertEqual([c["name"] for c in checks], ["parseval", "expectation"])
        self.assertTrue(all(c["passed"] for c in checks))


if __name__ == "__main__":
    unittest.main()
