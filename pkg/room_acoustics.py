"""
room_acoustics.py
Raumimpulsantworten (RIR) für quaderförmige Räume:
- RoomSpec / Rir / RirParts
- Sabine-Absorption
- Spiegelquellenmethode (Allen & Berkley) mit optionalem 100 Hz Hochpass und
  auf die Schroeder-T60 kalibrierter Wandabsorption
- Zerlegung in Direktschall / frühe / späte Reflexionen
- Schroeder-Messung der T60 (unabhängiges Orakel)
- Speichern als WAV + Sidecar-JSON
"""

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy import signal as sps
from scipy import stats

from config import InfeasibleT60Error, InsufficientDecayError, InvalidArgumentError, save_json_atomic
from logger_system import logger
from signal_core import AudioSignal, read_wav, write_wav

# ============================================================
# Konstanten
# ============================================================
SPEED_OF_SOUND = 343.0      # m/s
SABINE_CONSTANT = 0.16      # s/m, T60 = 0.16·V / (S·α)
DIRECT_WINDOW_S = 0.001     # Direktschall endet 1 ms nach dem Peak
EARLY_WINDOW_S = 0.050      # Übergang früh → spät 50 ms nach dem Peak
RIR_LENGTH_FACTOR = 1.2     # RIR deckt mindestens 1.2·T60 ab
ORDER_ATTENUATION_DB = 60.0 # Default max_order: Spiegelquellen bis -60 dB
HIGHPASS_CUTOFF_HZ = 100.0
FIT_START_DB = -5.0
FIT_END_DB = -35.0
MIN_DECAY_DB = 30.0         # Mindest-Dynamik für eine Schroeder-Messung

CALIBRATION_TOLERANCE = 0.01 # relative T60-Abweichung, ab der die Kalibrierung stoppt
CALIBRATION_MAX_ITER = 8
CALIBRATION_MIN_BETA = 1e-3
CALIBRATION_CACHE_SIZE = 1024
REFERENCE_SOURCE_FRACTIONS = np.array([0.45, 0.47, 0.49])

WALL_MODELS = ("calibrated", "pressure", "sabine")
CLOSED_FORM_WALL_MODELS = ("pressure", "sabine")


# ============================================================
# 1. Datentypen
# ============================================================

@dataclass
class RoomSpec:
    """
    Quaderförmiger Raum mit Quelle und Mikrofon (alles in Metern).
    Quelle und Mikrofon liegen strikt im Raum und sind verschieden.
    """
    dims: Tuple[float, float, float]
    source_pos: Tuple[float, float, float]
    mic_pos: Tuple[float, float, float]

    def __post_init__(self):
        self.dims = tuple(float(d) for d in self.dims)
        self.source_pos = tuple(float(p) for p in self.source_pos)
        self.mic_pos = tuple(float(p) for p in self.mic_pos)
        if len(self.dims) != 3 or len(self.source_pos) != 3 or len(self.mic_pos) != 3:
            raise InvalidArgumentError("RoomSpec needs three dims and three coordinates per position")
        if any(d <= 0 for d in self.dims):
            raise InvalidArgumentError(f"Room dims must be positive, got {self.dims}")
        for name, pos in (("source", self.source_pos), ("mic", self.mic_pos)):
            if not all(0.0 < p < d for p, d in zip(pos, self.dims)):
                raise InvalidArgumentError(f"{name} position {pos} is not strictly inside room {self.dims}")
        if self.distance == 0.0:
            raise InvalidArgumentError("source and mic positions must differ")

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dims
        return 2.0 * (lx * ly + lx * lz + ly * lz)

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.source_pos, self.mic_pos)))

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "source_pos": list(self.source_pos), "mic_pos": list(self.mic_pos)}

    @classmethod
    def from_dict(cls, data: dict) -> "RoomSpec":
        return cls(tuple(data["dims"]), tuple(data["source_pos"]), tuple(data["mic_pos"]))

    @classmethod
    def random_placement(cls, dims, distance: float, clearance: float, rng: np.random.Generator,
                         max_tries: int = 1000) -> "RoomSpec":
        """
        Zufällige Quelle/Mikrofon-Position mit festem Abstand und Wandabstand.

        Raises:
            InvalidArgumentError: Raum zu klein für Abstand + Wandabstand
        """
        lo = np.full(3, clearance)
        hi = np.asarray(dims, dtype=float) - clearance
        if np.any(hi <= lo):
            raise InvalidArgumentError(f"Room {dims} too small for wall clearance {clearance}")
        for _ in range(max_tries):
            src = rng.uniform(lo, hi)
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            mic = src + distance * direction
            if np.all(mic > lo) and np.all(mic < hi):
                return cls(tuple(dims), tuple(src), tuple(mic))
        raise InvalidArgumentError(
            f"Could not place source/mic {distance} m apart with {clearance} m clearance in room {dims}")


@dataclass
class Rir:
    """Impulsantwort mit nomineller T60 (Sekunden)."""
    taps: np.ndarray
    sample_rate: int
    nominal_t60: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64).ravel()
        if self.taps.size == 0:
            raise InvalidArgumentError("Rir must not be empty")
        if not np.all(np.isfinite(self.taps)):
            raise InvalidArgumentError("Rir contains NaN or Inf taps")
        if not np.any(self.taps):
            raise InvalidArgumentError("Rir must contain at least one nonzero tap")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.taps.shape[0]

    def padded(self, n_taps: int) -> "Rir":
        """Mit Nullen auf n_taps verlängert (Korpus-Maximum)."""
        if n_taps <= len(self):
            return self
        taps = np.zeros(n_taps)
        taps[:len(self)] = self.taps
        return Rir(taps, self.sample_rate, self.nominal_t60, dict(self.meta))


@dataclass
class RirParts:
    """Direkt-, Früh- und Spätanteil, jeweils volle Länge, außerhalb ihres Intervalls 0."""
    direct: np.ndarray
    early: np.ndarray
    late: np.ndarray
    boundaries: Tuple[int, int]
    sample_rate: int = 8000

    @property
    def direct_early(self) -> np.ndarray:
        return self.direct + self.early

    @property
    def full(self) -> np.ndarray:
        return self.direct + self.early + self.late


# ============================================================
# 2. Sabine / Spiegelquellen
# ============================================================

def sabine_absorption(room: RoomSpec, t60: float) -> float:
    """
    α = 0.16·V / (S·T60).

    Raises:
        InvalidArgumentError: t60 <= 0
        InfeasibleT60Error: α > 1 (Raum zu klein für die gewünschte T60)
    """
    if t60 <= 0:
        raise InvalidArgumentError(f"t60 must be positive, got {t60}")
    alpha = SABINE_CONSTANT * room.volume / (room.surface * t60)
    if alpha > 1.0:
        raise InfeasibleT60Error(
            f"T60 {t60} s infeasible for room {room.dims}: Sabine absorption {alpha:.4f} > 1")
    return alpha


def reflection_coefficient(alpha: float, wall_model: str = "pressure") -> float:
    """
    Druck-Reflexionsfaktor der Wände.

    "pressure": β = sqrt(1-α).
    "sabine": β = exp(-α/2), die Abklingrate der diffusen Sabine-Näherung.
    "calibrated" hat keine geschlossene Form, siehe calibrated_absorption.
    """
    if wall_model == "pressure":
        return math.sqrt(max(0.0, 1.0 - alpha))
    if wall_model == "sabine":
        return math.exp(-alpha / 2.0)
    raise InvalidArgumentError(f"No closed-form reflection coefficient for wall model {wall_model!r}, "
                               f"use one of {CLOSED_FORM_WALL_MODELS}")


def default_max_order(beta: float, attenuation_db: float = ORDER_ATTENUATION_DB) -> int:
    """Kleinste Ordnung, ab der β^k mindestens attenuation_db unter dem Direktschall liegt."""
    if beta <= 0.0:
        return 0
    if beta >= 1.0:
        raise InvalidArgumentError("reflection coefficient must be < 1 to bound the image order")
    return int(math.ceil((attenuation_db / 20.0) / -math.log10(beta)))


def _axis_images(src: float, mic: float, length: float, r_max: int):
    """Relative Bildkoordinaten und Reflexionszahlen entlang einer Achse."""
    r = np.arange(-r_max, r_max + 1)
    coords = []
    counts = []
    for p in (0, 1):
        coords.append((1 - 2 * p) * src + 2 * r * length - mic)
        counts.append(np.abs(r - p) + np.abs(r))
    return np.concatenate(coords), np.concatenate(counts)


def allen_berkley_highpass(taps: np.ndarray, fs: int, cutoff: float = HIGHPASS_CUTOFF_HZ) -> np.ndarray:
    """
    Hochpass gegen den Gleichanteil, den positive Reflexionsfaktoren aufbauen.
    Zweistufige Rekursion wie in den klassischen Image-Method-Generatoren.
    """
    w = 2.0 * math.pi * cutoff / fs
    r1 = math.exp(-w)
    b1 = 2.0 * r1 * math.cos(w)
    b2 = -r1 * r1
    a1 = -(1.0 + r1)
    # y0 = b1·y1 + b2·y2 + x0 ; out = y0 + a1·y1 + r1·y2
    return sps.lfilter([1.0, a1, r1], [1.0, -b1, -b2], taps)


def rir_length(t60: float, fs: int) -> int:
    """Anzahl Taps für eine nominelle T60 (ceil(1.2·T60·fs))."""
    return int(math.ceil(RIR_LENGTH_FACTOR * t60 * fs))


def _image_taps(room: RoomSpec, n_taps: int, fs: int, beta: float, max_order: int, c: float) -> np.ndarray:
    """Summe aller Spiegelquellen bis max_order Reflexionen, ohne Filter."""
    max_dist = n_taps * c / fs
    axes = []
    for src, mic, length in zip(room.source_pos, room.mic_pos, room.dims):
        r_max = min(int(math.ceil(max_dist / (2.0 * length))) + 1, max_order // 2 + 1)
        axes.append(_axis_images(src, mic, length, r_max))
    (dx, cx), (dy, cy), (dz, cz) = axes

    dyz2 = dy[:, None] ** 2 + dz[None, :] ** 2
    cyz = cy[:, None] + cz[None, :]
    taps = np.zeros(n_taps)
    for x_rel, x_count in zip(dx, cx):
        counts = cyz + x_count
        dist = np.sqrt(x_rel ** 2 + dyz2)
        idx = np.rint(dist * fs / c).astype(np.int64)
        mask = (counts <= max_order) & (idx < n_taps)
        if not np.any(mask):
            continue
        amp = np.power(beta, counts[mask]) / (4.0 * math.pi * dist[mask])
        taps += np.bincount(idx[mask], weights=amp, minlength=n_taps)
    return taps


def _render(room: RoomSpec, t60: float, fs: int, beta: float, max_order: Optional[int], highpass: bool,
            c: float) -> Tuple[np.ndarray, int]:
    if max_order is None:
        max_order = default_max_order(beta)
    if max_order < 0:
        raise InvalidArgumentError(f"max_order must be >= 0, got {max_order}")
    direct_idx = int(np.rint(fs * room.distance / c))
    n_taps = max(rir_length(t60, fs), direct_idx + 1)
    taps = _image_taps(room, n_taps, fs, beta, max_order, c)
    if highpass:
        taps = allen_berkley_highpass(taps, fs)
    return taps, int(max_order)


def reference_placement(room: RoomSpec) -> RoomSpec:
    """
    Feste Quelle/Mikrofon-Anordnung gleichen Abstands (auf 1 nm gerundet) entlang
    der längsten Achse. Passt sie nicht in den Raum, bleibt die Anordnung von room.
    """
    dims = np.asarray(room.dims)
    src = dims * REFERENCE_SOURCE_FRACTIONS
    mic = src.copy()
    axis = int(np.argmax(dims))
    mic[axis] += round(room.distance, 9)
    if mic[axis] >= dims[axis]:
        return room
    return RoomSpec(room.dims, tuple(src), tuple(mic))


@functools.lru_cache(maxsize=CALIBRATION_CACHE_SIZE)
def _calibrate(dims: tuple, source_pos: tuple, mic_pos: tuple, t60: float, fs: int, highpass: bool,
               c: float) -> Tuple[float, float, int]:
    room = RoomSpec(dims, source_pos, mic_pos)
    alpha = sabine_absorption(room, t60)
    decay = -0.5 * math.log(max(1.0 - alpha, CALIBRATION_MIN_BETA ** 2))
    for iteration in range(1, CALIBRATION_MAX_ITER + 1):
        taps, _ = _render(room, t60, fs, math.exp(-decay), None, highpass, c)
        measured = measure_t60_schroeder(taps, fs)
        if abs(measured - t60) <= CALIBRATION_TOLERANCE * t60 or iteration == CALIBRATION_MAX_ITER:
            break
        # Abklingrate ~ -ln β: Korrektur um das Verhältnis gemessen / nominell
        decay = min(decay * measured / t60, -math.log(CALIBRATION_MIN_BETA))
    beta = math.exp(-decay)
    return 1.0 - beta * beta, measured, iteration


def calibrated_absorption(room: RoomSpec, t60: float, fs: int = 8000, highpass: bool = False,
                          c: float = SPEED_OF_SOUND) -> Tuple[float, float, int]:
    """
    Effektiver Absorptionsgrad α_eff, mit dem die Spiegelquellen-RIR (β = sqrt(1-α_eff))
    nach Schroeder genau die nominelle T60 abklingt.

    Start ist die Sabine-Absorption; danach wird -ln β mit gemessen/nominell skaliert,
    bis die Abweichung unter CALIBRATION_TOLERANCE liegt. Gemessen wird auf der
    reference_placement des Raums mit voller Spiegelquellen-Ordnung; das Ergebnis ist
    pro (Raum, Abstand, T60, fs) gecacht.

    Returns:
        (α_eff, gemessene T60 der letzten Iteration, Iterationen)

    Raises:
        InfeasibleT60Error: Sabine-Absorption > 1
        InsufficientDecayError: Referenz-RIR ist nicht messbar
    """
    ref = reference_placement(room)
    return _calibrate(ref.dims, ref.source_pos, ref.mic_pos, float(t60), int(fs), bool(highpass), float(c))


def simulate_rir(room: RoomSpec, t60: float, fs: int = 8000, max_order: Optional[int] = None,
                 highpass: bool = False, wall_model: str = "calibrated", c: float = SPEED_OF_SOUND) -> Rir:
    """
    Spiegelquellenmethode für einen Quader.

    Jede Spiegelquelle erzeugt einen Tap bei round(d/c·fs) mit Amplitude
    β^(#Reflexionen)/(4π d), β = sqrt(1-α). Die Akkumulation läuft über
    np.bincount und ist daher bei gleichen Eingaben bitweise identisch.

    Args:
        room: Raum mit Quelle/Mikrofon
        t60: nominelle Nachhallzeit in Sekunden
        fs: Abtastrate
        max_order: maximale Reflexionszahl (None → -60 dB Kriterium)
        highpass: 100 Hz Allen-Berkley-Hochpass anwenden
        wall_model: "calibrated" (α_eff aus calibrated_absorption), "pressure"
            (β = sqrt(1-α) mit Sabine-α) oder "sabine" (β = exp(-α/2))

    Returns:
        Rir mit Länge >= 1.2·t60·fs

    Raises:
        InfeasibleT60Error, InvalidArgumentError
    """
    if wall_model not in WALL_MODELS:
        raise InvalidArgumentError(f"Unknown wall model {wall_model!r}, use one of {WALL_MODELS}")
    if max_order is not None and max_order < 0:
        raise InvalidArgumentError(f"max_order must be >= 0, got {max_order}")
    alpha = sabine_absorption(room, t60)
    meta = {"room": room.to_dict(), "absorption": alpha}

    if wall_model == "calibrated":
        try:
            alpha_eff, measured, iterations = calibrated_absorption(room, t60, fs, highpass, c)
            beta = reflection_coefficient(alpha_eff, "pressure")
            meta["calibration"] = {"effective_absorption": alpha_eff, "reference_t60": measured,
                                   "iterations": iterations}
        except InsufficientDecayError as e:
            logger.warning(f"T60-Kalibrierung für Raum {room.dims}, T60 {t60} s nicht möglich ({e}), "
                           f"verwende β = sqrt(1-α)")
            beta = reflection_coefficient(alpha, "pressure")
            meta["calibration"] = None
    else:
        beta = reflection_coefficient(alpha, wall_model)

    taps, used_order = _render(room, t60, fs, beta, max_order, highpass, c)
    meta.update({
        "beta": beta,
        "max_order": used_order,
        "highpass": bool(highpass),
        "wall_model": wall_model,
    })
    return Rir(taps, fs, float(t60), meta)


# ============================================================
# 3. Zerlegung
# ============================================================

def decompose_rir(h: Union[Rir, np.ndarray], fs: Optional[int] = None) -> RirParts:
    """
    Zerlegt h in Direktschall [0, p+1ms], frühe (p+1ms, p+50ms] und späte Reflexionen.
    p ist der Index des betragsgrößten Taps.

    Raises:
        InvalidArgumentError: RIR ist leer oder komplett 0
    """
    if isinstance(h, Rir):
        taps, fs = h.taps, h.sample_rate
    else:
        taps = np.asarray(h, dtype=np.float64).ravel()
        fs = fs or 8000
        if taps.size == 0 or not np.any(taps):
            raise InvalidArgumentError("Cannot decompose an empty or all-zero RIR")

    peak = int(np.argmax(np.abs(taps)))
    direct_end = peak + int(round(DIRECT_WINDOW_S * fs))
    early_end = peak + int(round(EARLY_WINDOW_S * fs))

    n = np.arange(taps.shape[0])
    zeros = np.zeros_like(taps)
    direct = np.where(n <= direct_end, taps, zeros)
    early = np.where((n > direct_end) & (n <= early_end), taps, zeros)
    late = np.where(n > early_end, taps, zeros)
    return RirParts(direct, early, late, (direct_end, early_end), fs)


# ============================================================
# 4. Schroeder-Messung
# ============================================================

def energy_decay_curve(taps: np.ndarray) -> np.ndarray:
    """EDC(n) = Σ_{k>=n} h²(k), auf 0 dB normiert, ohne den reinen Null-Schwanz."""
    energy = np.cumsum(taps[::-1] ** 2)[::-1]
    nonzero = np.nonzero(energy > 0)[0]
    if nonzero.size == 0:
        raise InsufficientDecayError("RIR has no energy")
    energy = energy[:nonzero[-1] + 1]
    return 10.0 * np.log10(energy / energy[0])


def measure_t60_schroeder(h: Union[Rir, np.ndarray], fs: Optional[int] = None) -> float:
    """
    T60 aus der Rückwärtsintegration: Geradenfit auf -5 dB .. -35 dB,
    extrapoliert auf 60 dB. Endet die Kurve zwischen -30 und -35 dB,
    reicht der Fit bis zu ihrem Ende.

    Raises:
        InsufficientDecayError: Dynamikbereich < 30 dB
    """
    if isinstance(h, Rir):
        taps, fs = h.taps, h.sample_rate
    else:
        taps, fs = np.asarray(h, dtype=np.float64).ravel(), fs or 8000

    edc = energy_decay_curve(taps)
    if edc[-1] > -MIN_DECAY_DB:
        raise InsufficientDecayError(
            f"Energy decay reaches only {edc[-1]:.1f} dB, need {MIN_DECAY_DB:.0f} dB for a T60 fit")

    fit_end = max(FIT_END_DB, float(edc[-1]))
    region = np.nonzero((edc <= FIT_START_DB) & (edc >= fit_end))[0]
    if region.size < 2:
        raise InsufficientDecayError(f"Too few samples in the -5..{fit_end:.0f} dB region for a T60 fit")
    fit = stats.linregress(region / fs, edc[region])
    if fit.slope >= 0:
        raise InsufficientDecayError(f"Energy decay curve is not decaying (slope {fit.slope:.3f} dB/s)")
    return float(-60.0 / fit.slope)


# ============================================================
# 5. Persistenz
# ============================================================

def sidecar_path(wav_path) -> Path:
    wav_path = Path(wav_path)
    return wav_path.with_suffix(".json")


def save_rir(path, rir: Rir, measured_t60: Optional[float] = None):
    """
    Schreibt die RIR als float32-WAV plus Sidecar-JSON
    (Raum, Positionen, nominelle/gemessene T60, fs, max_order).
    """
    write_wav(path, AudioSignal(rir.taps, rir.sample_rate), fmt="float32")
    record = dict(rir.meta)
    record.update({
        "fs": rir.sample_rate,
        "nominal_t60": rir.nominal_t60,
        "measured_t60": measured_t60,
        "n_taps": len(rir),
    })
    save_json_atomic(sidecar_path(path), record, backup=False)


def load_rir(path) -> Rir:
    """Liest WAV + Sidecar (falls vorhanden)."""
    audio = read_wav(path)
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        with open(side, "r", encoding="utf-8") as f:
            meta = json.load(f)
    return Rir(audio.samples, audio.sample_rate, float(meta.get("nominal_t60") or 0.0), meta)
