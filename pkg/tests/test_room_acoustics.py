"""
test_room_acoustics.py
Unit Tests für room_acoustics

Testet:
- Sabine-Absorption
- Spiegelquellen-RIR (Direktpfad, Determinismus, T60-Treue)
- Zerlegung Direkt/Früh/Spät
- Schroeder-Messung
- Persistenz WAV + Sidecar
"""

import sys
from pathlib import Path

# Projekt-Root zum Path hinzufügen
sys.path.insert(0, str(Path(__file__).parent.parent))

import json
import math
import shutil
import tempfile
import unittest

import numpy as np

from config import InfeasibleT60Error, InsufficientDecayError, InvalidArgumentError
from room_acoustics import (
    RoomSpec, Rir, calibrated_absorption, decompose_rir, default_max_order, energy_decay_curve, load_rir,
    measure_t60_schroeder, reference_placement, reflection_coefficient, sabine_absorption, save_rir,
    sidecar_path, simulate_rir,
)

FS = 8000


def _room(dims=(9.0, 8.0, 7.0), src=(3.0, 3.0, 1.5), mic=(4.0, 3.0, 1.5)):
    return RoomSpec(dims, src, mic)


class TestRoomSpec(unittest.TestCase):
    """Tests für RoomSpec-Validierung"""

    def test_outside_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            RoomSpec((5, 5, 3), (1, 1, 1), (6, 1, 1))

    def test_identical_positions_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            RoomSpec((5, 5, 3), (1, 1, 1), (1, 1, 1))

    def test_random_placement(self):
        """1 m Abstand, 0.5 m Wandabstand"""
        rng = np.random.default_rng(0)
        for _ in range(20):
            room = RoomSpec.random_placement((9, 8, 7), 1.0, 0.5, rng)
            self.assertAlmostEqual(room.distance, 1.0, places=9)
            for pos in (room.source_pos, room.mic_pos):
                self.assertTrue(all(0.5 < p < d - 0.5 for p, d in zip(pos, room.dims)))


class TestSabine(unittest.TestCase):
    """Tests für sabine_absorption"""

    def test_full_scale_room(self):
        """9×8×7, T60 0.6 → α ≈ 0.3518"""
        self.assertAlmostEqual(sabine_absorption(_room(), 0.6), 0.3518, places=4)

    def test_doubling_halves(self):
        room = _room()
        self.assertAlmostEqual(sabine_absorption(room, 1.2), sabine_absorption(room, 0.6) / 2, places=12)

    def test_unit_cube(self):
        """1×1×1, T60 1.5 → 0.16/9"""
        room = RoomSpec((1, 1, 1), (0.2, 0.2, 0.2), (0.7, 0.7, 0.7))
        self.assertAlmostEqual(sabine_absorption(room, 1.5), 0.16 / 9.0, places=12)

    def test_infeasible(self):
        room = RoomSpec((1, 1, 1), (0.2, 0.2, 0.2), (0.7, 0.7, 0.7))
        with self.assertRaises(InfeasibleT60Error):
            sabine_absorption(room, 0.01)

    def test_nonpositive_t60(self):
        with self.assertRaises(InvalidArgumentError):
            sabine_absorption(_room(), 0.0)

    def test_reflection_models(self):
        self.assertAlmostEqual(reflection_coefficient(0.36, "pressure"), 0.8)
        self.assertAlmostEqual(reflection_coefficient(0.36), 0.8)
        self.assertAlmostEqual(reflection_coefficient(0.36, "sabine"), math.exp(-0.18))
        for model in ("eyring", "calibrated"):
            with self.assertRaises(InvalidArgumentError):
                reflection_coefficient(0.36, model)

    def test_default_order_60db(self):
        beta = 0.9
        k = default_max_order(beta)
        self.assertLessEqual(beta ** k, 1e-3)
        self.assertGreater(beta ** (k - 1), 1e-3)


class TestSimulateRir(unittest.TestCase):
    """Tests für simulate_rir"""

    def test_direct_path_only(self):
        """max_order=0 mit Default-Einstellungen → genau ein Tap mit 1/(4πd)"""
        room = _room()
        rir = simulate_rir(room, 0.6, FS, max_order=0)
        self.assertFalse(rir.meta["highpass"])
        nz = np.nonzero(rir.taps)[0]
        self.assertEqual(len(nz), 1)
        d = room.distance
        self.assertEqual(nz[0], round(FS * d / 343.0))
        self.assertAlmostEqual(rir.taps[nz[0]], 1.0 / (4 * math.pi * d), places=12)

    def test_first_tap_index(self):
        """Erster Tap bei round(fs·d/343), auch mit Hochpass"""
        room = _room(src=(2.0, 2.5, 1.2), mic=(4.1, 3.3, 1.9))
        rir = simulate_rir(room, 0.5, FS, highpass=True)
        first = np.nonzero(rir.taps)[0][0]
        self.assertEqual(first, round(FS * room.distance / 343.0))

    def test_length_covers_t60(self):
        rir = simulate_rir(_room(), 0.8, FS, max_order=2)
        self.assertGreaterEqual(len(rir), 1.2 * 0.8 * FS)

    def test_deterministic(self):
        room = _room()
        a = simulate_rir(room, 0.4, FS).taps
        b = simulate_rir(room, 0.4, FS).taps
        self.assertTrue(np.array_equal(a, b))

    def test_t60_fidelity_reference_room(self):
        """Schroeder-T60 von 9×8×7 bei 0.6 s liegt in [0.54, 0.66]"""
        measured = measure_t60_schroeder(simulate_rir(_room(), 0.6, FS))
        self.assertGreaterEqual(measured, 0.54)
        self.assertLessEqual(measured, 0.66)

    def test_t60_fidelity_grid(self):
        """Stichprobe: Räume und T60s innerhalb 15%"""
        cases = [((10, 7, 3), 0.3), ((6, 6, 10), 0.9), ((8, 10, 4), 1.5), ((9, 9, 10), 1.2)]
        for dims, t60 in cases:
            room = RoomSpec.random_placement(dims, 1.0, 0.5, np.random.default_rng(1))
            measured = measure_t60_schroeder(simulate_rir(room, t60, FS))
            self.assertLessEqual(abs(measured - t60) / t60, 0.15, msg=f"{dims} @ {t60}: {measured:.3f}")

    def test_pressure_model_literal(self):
        """"pressure": β = sqrt(1-α) mit der Sabine-Absorption, ohne Kalibrierung"""
        room = _room()
        rir = simulate_rir(room, 0.6, FS, wall_model="pressure")
        alpha = sabine_absorption(room, 0.6)
        self.assertAlmostEqual(rir.meta["beta"], math.sqrt(1.0 - alpha), places=12)
        self.assertNotIn("calibration", rir.meta)

    def test_calibrated_model(self):
        """Default: β = sqrt(1-α_eff), α_eff trifft die T60 auf der Referenz-Anordnung"""
        room = _room()
        rir = simulate_rir(room, 0.6, FS)
        cal = rir.meta["calibration"]
        self.assertEqual(rir.meta["wall_model"], "calibrated")
        self.assertAlmostEqual(rir.meta["beta"], math.sqrt(1.0 - cal["effective_absorption"]), places=12)
        self.assertLessEqual(abs(cal["reference_t60"] - 0.6) / 0.6, 0.05)
        self.assertEqual(calibrated_absorption(room, 0.6, FS)[0], cal["effective_absorption"])

    def test_calibration_shared_across_placements(self):
        rng = np.random.default_rng(3)
        a = simulate_rir(RoomSpec.random_placement((9, 8, 7), 1.0, 0.5, rng), 0.9, FS)
        b = simulate_rir(RoomSpec.random_placement((9, 8, 7), 1.0, 0.5, rng), 0.9, FS)
        self.assertEqual(a.meta["beta"], b.meta["beta"])

    def test_reference_placement(self):
        ref = reference_placement(_room())
        self.assertAlmostEqual(ref.distance, _room().distance, places=12)
        self.assertAlmostEqual(ref.mic_pos[0] - ref.source_pos[0], _room().distance, places=12)
        tight = RoomSpec((2.0, 1.0, 1.0), (0.2, 0.5, 0.5), (1.9, 0.5, 0.5))
        self.assertIs(reference_placement(tight), tight)

    def test_t60_fidelity_flat_rooms(self):
        """Flache Räume über den ganzen T60-Bereich innerhalb 15%"""
        for i, dims in enumerate([(10, 7, 3), (8, 10, 4), (9, 10, 5)]):
            room = RoomSpec.random_placement(dims, 1.0, 0.5, np.random.default_rng(10 + i))
            for t60 in (0.3, 0.9, 1.5):
                measured = measure_t60_schroeder(simulate_rir(room, t60, FS))
                self.assertLessEqual(abs(measured - t60) / t60, 0.15, msg=f"{dims} @ {t60}: {measured:.3f}")

    def test_unknown_wall_model(self):
        with self.assertRaises(InvalidArgumentError):
            simulate_rir(_room(), 0.6, FS, wall_model="eyring")

    def test_edc_non_increasing(self):
        edc = energy_decay_curve(simulate_rir(_room(), 0.6, FS).taps)
        self.assertTrue(np.all(np.diff(edc) <= 1e-12))

    def test_negative_order(self):
        with self.assertRaises(InvalidArgumentError):
            simulate_rir(_room(), 0.6, FS, max_order=-1)


class TestDecompose(unittest.TestCase):
    """Tests für decompose_rir"""

    def test_unit_impulse(self):
        taps = np.zeros(1000)
        taps[0] = 1.0
        parts = decompose_rir(Rir(taps, FS))
        self.assertEqual(np.sum(parts.direct ** 2), 1.0)
        self.assertFalse(np.any(parts.early))
        self.assertFalse(np.any(parts.late))

    def test_boundaries_8khz(self):
        """fs=8000 → +8 und +400 Samples nach dem Peak"""
        taps = np.random.default_rng(2).standard_normal(3000) * 0.01
        taps[100] = 1.0
        parts = decompose_rir(Rir(taps, FS))
        self.assertEqual(parts.boundaries, (108, 500))

    def test_exact_partition(self):
        """Summe der Teile == Original (bitweise), disjunkte Träger"""
        rir = simulate_rir(_room(), 0.7, FS)
        parts = decompose_rir(rir)
        self.assertTrue(np.array_equal(parts.direct + parts.early + parts.late, rir.taps))
        d_end, e_end = parts.boundaries
        self.assertFalse(np.any(parts.direct[d_end + 1:]))
        self.assertFalse(np.any(parts.early[:d_end + 1]))
        self.assertFalse(np.any(parts.early[e_end + 1:]))
        self.assertFalse(np.any(parts.late[:e_end + 1]))

    def test_all_zero_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            decompose_rir(np.zeros(100))
        with self.assertRaises(InvalidArgumentError):
            Rir(np.zeros(100), FS)


class TestSchroeder(unittest.TestCase):
    """Tests für measure_t60_schroeder"""

    def test_exponential_decay(self):
        """exp(-λn/fs) → T60 = 6.9078/λ (2%)"""
        lam = 6.9078 / 0.5
        n = np.arange(2 * FS)
        t60 = measure_t60_schroeder(np.exp(-lam * n / FS), FS)
        self.assertAlmostEqual(t60 / 0.5, 1.0, delta=0.02)

    def test_scale_invariance(self):
        h = simulate_rir(_room(), 0.6, FS).taps
        self.assertAlmostEqual(measure_t60_schroeder(7.5 * h, FS) / measure_t60_schroeder(h, FS), 1.0, delta=1e-3)

    def test_thirty_db_decay_accepted(self):
        """Abfall endet zwischen -30 und -35 dB → Fit bis zum Kurvenende statt Fehler"""
        lam = 6.9078 / 0.5
        taps = np.zeros(23 * 80)
        taps[::80] = np.exp(-lam * np.arange(23) * 80 / FS)
        edc = energy_decay_curve(taps)
        self.assertLessEqual(edc[-1], -30.0)
        self.assertGreater(edc[-1], -35.0)
        t60 = measure_t60_schroeder(taps, FS)
        self.assertGreater(t60, 0.35)
        self.assertLess(t60, 0.55)

    def test_unit_impulse_insufficient(self):
        taps = np.zeros(100)
        taps[0] = 1.0
        with self.assertRaises(InsufficientDecayError):
            measure_t60_schroeder(taps, FS)

    def test_short_decay_insufficient(self):
        """Nur ~20 dB Abfall → Fehler"""
        n = np.arange(100)
        with self.assertRaises(InsufficientDecayError):
            measure_t60_schroeder(np.exp(-2.0 * n / FS), FS)


class TestPersistence(unittest.TestCase):
    """Tests für save_rir / load_rir"""

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_wav_and_sidecar(self):
        room = _room()
        rir = simulate_rir(room, 0.5, FS)
        path = Path(self.tmpdir) / "r.wav"
        save_rir(path, rir, measured_t60=0.49)
        self.assertTrue(path.exists())
        with open(sidecar_path(path), "r", encoding="utf-8") as f:
            meta = json.load(f)
        self.assertEqual(meta["room"]["dims"], [9.0, 8.0, 7.0])
        self.assertEqual(meta["fs"], FS)
        self.assertEqual(meta["nominal_t60"], 0.5)
        self.assertEqual(meta["measured_t60"], 0.49)
        self.assertIn("max_order", meta)

        loaded = load_rir(path)
        self.assertEqual(loaded.nominal_t60, 0.5)
        np.testing.assert_allclose(loaded.taps, rir.taps, atol=1e-7)


if __name__ == "__main__":
    unittest.main()
