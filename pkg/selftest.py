"""
selftest.py
Orakel-Checks vor dem Training (DerevKit.py selftest).

Jeder Check liefert (ok, Detail). Geprüft werden STFT/ISTFT, Parseval,
die Zerlegung hallig = Direkt+Früh + Spät, die Schroeder-Messung einer
simulierten RIR, Gradienten aller Schichtarten und beider Verbundverluste
sowie die Arithmetik von Erwartungswert, Vortrainings- und Joint-Verlust.
"""

import sys
import time
from pathlib import Path
from typing import Callable, List, Tuple

# Projektordner zum Pfad hinzufügen
sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np

from autodiff import Tensor
from config import FULL_T60_GRID, PAPER_CONFIG_PATH, Config
from dataset_synth import synthesize_example
from derev_net import loss_joint
from layers import LayerSpec, check_gradients, grad_check
from logger_system import logger
from room_acoustics import RoomSpec, decompose_rir, measure_t60_schroeder, simulate_rir
from signal_core import AudioSignal, StftConfig, extract_t60_features, istft, stft
from t60_net import latent_shape, loss_pretrain, outputs_from_heads

GRAD_TOLERANCE = 1e-4
SCHROEDER_TOLERANCE = 0.15
SCHROEDER_T60S = (0.3, 0.6, 0.9, 1.2, 1.5)


# ============================================================
# 1. Signalverarbeitung
# ============================================================

def check_stft_round_trip() -> Tuple[bool, str]:
    cfg = StftConfig()
    x = AudioSignal(np.random.default_rng(0).uniform(-0.5, 0.5, 6 * 8000), 8000)
    y = istft(stft(x, cfg), len(x))
    interior = slice(cfg.window_len, len(x) - cfg.window_len)
    err = np.max(np.abs(y.samples[interior] - x.samples[interior])) / np.max(np.abs(x.samples[interior]))
    return err <= 1e-6, f"max rel. error {err:.2e}"


def check_parseval() -> Tuple[bool, str]:
    x = np.random.default_rng(1).standard_normal(512)
    X = np.fft.rfft(x)
    energy = (np.abs(X[0]) ** 2 + 2 * np.sum(np.abs(X[1:-1]) ** 2) + np.abs(X[-1]) ** 2) / len(x)
    err = abs(energy - np.sum(x ** 2)) / np.sum(x ** 2)
    return err <= 1e-12, f"rel. energy error {err:.2e}"


def check_feature_rows() -> Tuple[bool, str]:
    x = AudioSignal(np.random.default_rng(2).standard_normal(8000) * 0.1, 8000)
    rows = extract_t60_features(stft(x, StftConfig())).n_rows
    latent = latent_shape(771, 442)
    return rows == 771 and latent == (64, 96, 55), f"rows {rows}, latent {latent}"


# ============================================================
# 2. Raumakustik
# ============================================================

def check_partition() -> Tuple[bool, str]:
    rng = np.random.default_rng(3)
    worst = 0.0
    for i, dims in enumerate([(9.0, 8.0, 7.0), (10.0, 7.0, 3.0), (6.0, 6.0, 10.0)]):
        room = RoomSpec.random_placement(dims, 1.0, 0.5, np.random.default_rng(i))
        parts = decompose_rir(simulate_rir(room, 0.3 + 0.3 * i, 8000))
        ex = synthesize_example(AudioSignal(rng.uniform(-0.5, 0.5, 4000), 8000), parts)
        diff = ex.reverberant.samples - ex.direct_early.samples - ex.late.samples
        worst = max(worst, np.max(np.abs(diff)) / np.max(np.abs(ex.reverberant.samples)))
    return worst <= 1e-6, f"max rel. error {worst:.2e}"


def check_schroeder() -> Tuple[bool, str]:
    """Alle Räume der Referenz-Konfiguration × SCHROEDER_T60S, jeweils innerhalb SCHROEDER_TOLERANCE."""
    rooms = Config(PAPER_CONFIG_PATH).get("dataset.rooms")
    worst, worst_case, failed = 0.0, "", 0
    for i, dims in enumerate(rooms["seen"] + rooms["unseen"]):
        room = RoomSpec.random_placement(tuple(dims), 1.0, 0.5, np.random.default_rng(4 + i))
        for t60 in SCHROEDER_T60S:
            measured = measure_t60_schroeder(simulate_rir(room, t60, 8000))
            rel = abs(measured - t60) / t60
            failed += rel > SCHROEDER_TOLERANCE
            if rel >= worst:
                worst, worst_case = rel, f"{dims}@{t60:.1f}s→{measured:.3f}s"
    return failed == 0, f"{failed} outside, worst {worst:.1%} ({worst_case})"


# ============================================================
# 3. Gradienten
# ============================================================

LAYER_CASES = [
    (LayerSpec("conv2d", {"in_channels": 2, "out_channels": 3}), (2, 2, 5, 4), "train"),
    (LayerSpec("batchnorm2d", {"channels": 2}), (3, 2, 3, 3), "train"),
    (LayerSpec("batchnorm1d", {"channels": 3}), (5, 3), "train"),
    (LayerSpec("maxpool2x2"), (1, 2, 5, 4), "train"),
    (LayerSpec("avgpool", {"kernel": 3, "stride": 3}), (1, 2, 7, 6), "train"),
    (LayerSpec("fully_connected", {"in_features": 4, "out_features": 3}), (5, 4), "train"),
    (LayerSpec("lstm", {"input_size": 3, "hidden": 4}), (2, 4, 3), "train"),
    (LayerSpec("dropout", {"rate": 0.5}), (4, 5), "train"),
    (LayerSpec("relu"), (4, 5), "train"),
    (LayerSpec("leaky_relu"), (4, 5), "train"),
    (LayerSpec("softmax"), (3, 6), "train"),
]


def check_layer_gradients() -> Tuple[bool, str]:
    errors = {spec.kind: grad_check(spec, shape, seed, mode)
              for seed, (spec, shape, mode) in enumerate(LAYER_CASES)}
    worst = max(errors, key=errors.get)
    return errors[worst] < GRAD_TOLERANCE, f"worst {worst} {errors[worst]:.2e}"


def _loss_inputs(seed: int):
    rng = np.random.default_rng(seed)
    t60s = np.array([0.3, 0.5, 0.4, 0.6, 0.3])
    idx = np.array([0, 2, 1, 3, 0])
    logits = Tensor(rng.standard_normal((5, 4)))
    reg = Tensor(np.array([0.35, 0.62, 0.41, 0.5, 0.2]))
    return t60s, idx, logits, reg, rng


def check_loss_gradients() -> Tuple[bool, str]:
    classes = [0.3, 0.4, 0.5, 0.6]
    t60s, idx, logits, reg, rng = _loss_inputs(5)
    pen = np.zeros((5, 1))
    pre = check_gradients(
        lambda: loss_pretrain(outputs_from_heads(reg, logits, pen, classes), t60s, idx, 0.1, 0.9),
        {"logits": logits, "reg": reg})
    late = Tensor(np.abs(rng.standard_normal((5, 3, 4))))
    target = np.abs(rng.standard_normal((5, 3, 4)))
    joint = check_gradients(
        lambda: loss_joint(outputs_from_heads(reg, logits, pen, classes), t60s, idx, late, target, 0.7, 0.1),
        {"logits": logits, "reg": reg, "late": late})
    worst = max(max(pre.values()), max(joint.values()))
    return worst < GRAD_TOLERANCE, f"max rel. error {worst:.2e}"


# ============================================================
# 4. Verlust-Arithmetik
# ============================================================

def check_expectation() -> Tuple[bool, str]:
    grid = FULL_T60_GRID
    one_hot = np.eye(len(grid)) * 200.0
    creg = outputs_from_heads(np.zeros(len(grid)), one_hot, np.zeros((len(grid), 1)), grid).creg_value.data
    uniform = outputs_from_heads(np.zeros(1), np.zeros((1, len(grid))), np.zeros((1, 1)), grid)
    err = max(np.max(np.abs(creg - np.array(grid))), abs(float(uniform.creg_value.data[0]) - 0.9))
    return err <= 1e-12, f"max error {err:.2e}"


def check_pretrain_optimum() -> Tuple[bool, str]:
    classes = [0.3, 0.4, 0.5, 0.6]
    t60s = np.array([0.3, 0.5, 0.6, 0.4, 0.5])
    idx = np.array([0, 2, 3, 1, 2])
    out = outputs_from_heads(t60s.copy(), np.eye(4)[idx] * 100.0, np.zeros((5, 2)), classes)
    value = float(loss_pretrain(out, t60s, idx, 0.1, 0.9).data)
    return abs(value + 4.0) <= 1e-6, f"loss {value:.8f}"


def check_joint_affine() -> Tuple[bool, str]:
    t60s, idx, logits, reg, rng = _loss_inputs(6)
    late = np.abs(rng.standard_normal((5, 3, 4)))
    target = np.abs(rng.standard_normal((5, 3, 4)))
    out = outputs_from_heads(reg.data, logits.data, np.zeros((5, 1)), [0.3, 0.4, 0.5, 0.6])
    value = {g: float(loss_joint(out, t60s, idx, Tensor(late), target, g, 0.1).data) for g in (0.0, 0.5, 1.0)}
    err = abs(value[0.5] - 0.5 * (value[0.0] + value[1.0]))
    return err <= 1e-12, f"deviation {err:.2e}"


# ============================================================
# 5. Ablauf
# ============================================================

CHECKS: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
    ("stft_round_trip", check_stft_round_trip),
    ("parseval", check_parseval),
    ("feature_rows", check_feature_rows),
    ("partition", check_partition),
    ("schroeder", check_schroeder),
    ("layer_gradients", check_layer_gradients),
    ("loss_gradients", check_loss_gradients),
    ("expectation", check_expectation),
    ("pretrain_optimum", check_pretrain_optimum),
    ("joint_affine", check_joint_affine),
]


def run_selftest(names=None) -> List[dict]:
    """
    Führt die Checks aus; ein Fehler in einem Check zählt als FAIL.

    Returns:
        [{"name", "passed", "detail", "seconds"}, ...]
    """
    results = []
    for name, check in CHECKS:
        if names and name not in names:
            continue
        start = time.perf_counter()
        try:
            passed, detail = check()
        except Exception as e:
            passed, detail = False, f"{type(e).__name__}: {e}"
        seconds = time.perf_counter() - start
        passed = bool(passed)
        if passed:
            logger.info(f"PASS: {name} ({detail}, {seconds:.1f}s)")
        else:
            logger.error(f"FAIL: {name} ({detail})")
        results.append({"name": name, "passed": passed, "detail": detail, "seconds": round(seconds, 3)})
    return results


if __name__ == "__main__":
    sys.exit(0 if all(r["passed"] for r in run_selftest()) else 1)
