"""
signal_core.py
Zeit-Frequenz-Analyse und -Synthese für DerevKit:
- AudioSignal / StftConfig / Spektrogramm-Typen
- Faltung, STFT, ISTFT (gewichtetes Overlap-Add)
- T60-Features (Log-Betrag + sin/cos der Phase) und Normalisierung
- Kubikwurzel-komprimierte Beträge
- WAV Ein-/Ausgabe (soundfile)
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import soundfile as sf
from scipy import signal as sps

from config import InvalidArgumentError, ShapeError

# ============================================================
# Konstanten
# ============================================================
EPS_LOG = 1e-8      # log(|S| + EPS_LOG)
EPS_STD = 1e-8      # Untergrenze der Standardabweichung
EPS_WSUM = 1e-10    # Fenster-Summe, ab der istft rekonstruiert

WAV_SUBTYPES = {"float32": "FLOAT", "pcm16": "PCM_16"}


# ============================================================
# 1. Datentypen
# ============================================================

@dataclass
class AudioSignal:
    """
    Mono-Signal mit Abtastrate.

    Attributes:
        samples: 1-D float64 Array, nominell in [-1, 1]
        sample_rate: Abtastrate in Hz (> 0)
    """
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidArgumentError(
                f"AudioSignal must be mono (1-D), got shape {self.samples.shape}")
        if int(self.sample_rate) <= 0:
            raise InvalidArgumentError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise InvalidArgumentError("AudioSignal contains NaN or Inf samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def fit_length(self, n_samples: int) -> "AudioSignal":
        """Schneidet ab oder füllt mit Nullen auf n_samples auf."""
        if len(self) >= n_samples:
            return AudioSignal(self.samples[:n_samples].copy(), self.sample_rate)
        padded = np.zeros(n_samples)
        padded[:len(self)] = self.samples
        return AudioSignal(padded, self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    """
    STFT-Parameter. Default ist die Konfiguration aus der Veröffentlichung:
    480er Hamming-Fenster, 512-Punkt-FFT, Hop 120 (75% Überlappung).
    """
    window_len: int = 480
    fft_size: int = 512
    hop: int = 120
    window_kind: str = "hamming"

    def __post_init__(self):
        if not 0 < self.hop <= self.window_len <= self.fft_size:
            raise InvalidArgumentError(
                f"StftConfig requires 0 < hop <= window_len <= fft_size, got "
                f"hop={self.hop}, window_len={self.window_len}, fft_size={self.fft_size}")
        if self.fft_size % 2:
            raise InvalidArgumentError(f"fft_size must be even, got {self.fft_size}")
        if self.window_kind not in ("hamming", "hann"):
            raise InvalidArgumentError(f"Unsupported window kind: {self.window_kind}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window(self) -> np.ndarray:
        return sps.get_window(self.window_kind, self.window_len, fftbins=True)

    def frame_count(self, n_samples: int) -> int:
        """T_frames = floor((len - window_len) / hop) + 1 (ohne Center-Padding)."""
        if n_samples < self.window_len:
            return 0
        return (n_samples - self.window_len) // self.hop + 1

    def to_dict(self) -> dict:
        return {"window_len": self.window_len, "fft_size": self.fft_size,
                "hop": self.hop, "window": self.window_kind}

    @classmethod
    def from_dict(cls, data: dict) -> "StftConfig":
        return cls(window_len=int(data["window_len"]), fft_size=int(data["fft_size"]),
                   hop=int(data["hop"]), window_kind=data.get("window", "hamming"))


@dataclass
class ComplexSpectrogram:
    """Einseitiges STFT-Gitter, Form (F, T_frames)."""
    bins: np.ndarray
    config: StftConfig
    sample_rate: int = 8000

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.complex128)
        if self.bins.ndim != 2 or self.bins.shape[0] != self.config.n_bins:
            raise ShapeError(
                f"Spectrogram must have shape ({self.config.n_bins}, T), got {self.bins.shape}")

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)

    def phase(self) -> np.ndarray:
        return np.angle(self.bins)


@dataclass
class FeatureMap:
    """T60-Eingangsfeatures: 3F Zeilen (Log-Betrag, sin θ, cos θ) × T_frames."""
    values: np.ndarray
    normalized: bool = False

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class NormStats:
    """Zeilenweise Mittelwerte/Standardabweichungen über alle Trainings-Frames."""
    mean: np.ndarray
    std: np.ndarray
    count: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), EPS_STD)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeError(
                f"NormStats mean/std must be equal-length vectors, got {self.mean.shape} and {self.std.shape}")

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez(f, mean=self.mean, std=self.std, count=np.array(self.count))

    @classmethod
    def load(cls, path) -> "NormStats":
        with np.load(path) as data:
            return cls(mean=data["mean"], std=data["std"], count=int(data["count"]))


@dataclass
class CompressedMagnitude:
    """|S|^(1/3), Form (F, T_frames), nichtnegativ."""
    values: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size and np.min(self.values) < 0:
            raise InvalidArgumentError("CompressedMagnitude must be nonnegative")

    @property
    def shape(self):
        return self.values.shape


# ============================================================
# 2. Faltung
# ============================================================

def convolve(a: Union[AudioSignal, np.ndarray], b, sample_rate: Optional[int] = None) -> AudioSignal:
    """
    Lineare Faltung x(t) = s(t) * h(t).

    Args:
        a: AudioSignal (oder Array, dann sample_rate angeben)
        b: Impulsantwort als Sequenz (Array, Liste oder Objekt mit .taps)

    Returns:
        AudioSignal der Länge len(a) + len(b) - 1

    Raises:
        InvalidArgumentError: wenn ein Argument leer ist
    """
    if isinstance(a, AudioSignal):
        samples, rate = a.samples, a.sample_rate
    else:
        samples, rate = np.asarray(a, dtype=np.float64), sample_rate or 8000
    taps = np.asarray(getattr(b, "taps", b), dtype=np.float64).ravel()
    if samples.size == 0 or taps.size == 0:
        raise InvalidArgumentError(
            f"convolve needs non-empty inputs, got lengths {samples.size} and {taps.size}")
    return AudioSignal(sps.convolve(samples, taps, mode="full"), rate)


# ============================================================
# 3. STFT / ISTFT
# ============================================================

def stft(x: AudioSignal, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    """
    Kurzzeit-Fourier-Transformation ohne Center-Padding.

    Frame t deckt die Samples [t*hop, t*hop + window_len) ab; gefenstert,
    auf fft_size mit Nullen aufgefüllt, einseitige DFT.

    Raises:
        InvalidArgumentError: Signal kürzer als ein Fenster
    """
    n_frames = cfg.frame_count(len(x))
    if n_frames == 0:
        raise InvalidArgumentError(
            f"Signal of {len(x)} samples is shorter than one window ({cfg.window_len})")
    frames = np.lib.stride_tricks.sliding_window_view(x.samples, cfg.window_len)[::cfg.hop][:n_frames]
    frames = frames * cfg.window()
    bins = np.fft.rfft(frames, n=cfg.fft_size, axis=1).T
    return ComplexSpectrogram(bins, cfg, x.sample_rate)


def istft(S: ComplexSpectrogram, length: Optional[int] = None) -> AudioSignal:
    """
    Inverse STFT per gewichtetem Overlap-Add.

    Jeder Frame wird mit dem Analysefenster erneut gewichtet und die Summe durch
    die akkumulierte quadrierte Fenstersumme geteilt (Hamming bei 75% ist nicht
    exakt COLA). Samples mit Fenstersumme <= EPS_WSUM bleiben 0.

    Args:
        S: Spektrogramm
        length: optionale Ziellänge (Nullen anhängen oder abschneiden)
    """
    cfg = S.config
    window = cfg.window()
    n_frames = S.n_frames
    out_len = (n_frames - 1) * cfg.hop + cfg.window_len if n_frames else 0

    frames = np.fft.irfft(S.bins.T, n=cfg.fft_size, axis=1)[:, :cfg.window_len] * window
    acc = np.zeros(out_len)
    wsum = np.zeros(out_len)
    wsq = window ** 2
    for t in range(n_frames):
        start = t * cfg.hop
        acc[start:start + cfg.window_len] += frames[t]
        wsum[start:start + cfg.window_len] += wsq

    out = np.zeros(out_len)
    covered = wsum > EPS_WSUM
    out[covered] = acc[covered] / wsum[covered]

    if length is not None:
        out = AudioSignal(out, S.sample_rate).fit_length(length).samples if out_len else np.zeros(length)
    return AudioSignal(out, S.sample_rate)


# ============================================================
# 4. Features
# ============================================================

def compress_magnitude(S: ComplexSpectrogram) -> CompressedMagnitude:
    """Kubikwurzel-Kompression |S|^(1/3)."""
    return CompressedMagnitude(np.cbrt(S.magnitude()))


def extract_t60_features(S: ComplexSpectrogram, stats: Optional[NormStats] = None) -> FeatureMap:
    """
    Log-Betrag ⊕ sin θ ⊕ cos θ entlang der Frequenzachse (3F Zeilen).

    Args:
        S: Spektrogramm
        stats: optionale NormStats; dann wird jede Zeile (v - mean) / std

    Raises:
        ShapeError: Länge der Statistik passt nicht zu 3F
    """
    theta = S.phase()
    values = np.vstack([np.log(S.magnitude() + EPS_LOG), np.sin(theta), np.cos(theta)])
    if stats is None:
        return FeatureMap(values, normalized=False)
    return normalize_features(FeatureMap(values, normalized=False), stats)


def normalize_features(features: FeatureMap, stats: NormStats) -> FeatureMap:
    if stats.mean.shape[0] != features.n_rows:
        raise ShapeError(
            f"NormStats length {stats.mean.shape[0]} does not match feature rows {features.n_rows}")
    values = (features.values - stats.mean[:, None]) / stats.std[:, None]
    return FeatureMap(values, normalized=True)


def fit_normalization(features: Iterable[FeatureMap]) -> NormStats:
    """
    Zeilenweise Mittelwert/Standardabweichung über alle Frames aller Maps.

    Die Maps werden nacheinander mit paarweiser Varianz-Kombination (Chan et al.)
    zusammengeführt, daher reicht ein Durchlauf und kein Gesamtarray im Speicher.

    Raises:
        InvalidArgumentError: leere Sammlung
    """
    count = 0
    mean = None
    m2 = None
    for fmap in features:
        values = fmap.values
        n_b = values.shape[1]
        if n_b == 0:
            continue
        mean_b = values.mean(axis=1)
        m2_b = ((values - mean_b[:, None]) ** 2).sum(axis=1)
        if mean is None:
            count, mean, m2 = n_b, mean_b, m2_b
            continue
        if mean_b.shape != mean.shape:
            raise ShapeError(f"Feature maps disagree in row count: {mean.shape[0]} vs {mean_b.shape[0]}")
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta ** 2 * (count * n_b / total)
        count = total

    if mean is None:
        raise InvalidArgumentError("fit_normalization needs at least one non-empty feature map")
    std = np.sqrt(m2 / count)
    return NormStats(mean=mean, std=np.maximum(std, EPS_STD), count=count)


# ============================================================
# 5. WAV Ein-/Ausgabe
# ============================================================

def read_wav(path, expected_rate: Optional[int] = None) -> AudioSignal:
    """
    Liest eine Mono-WAV-Datei (PCM16 oder 32-bit float).

    Raises:
        InvalidArgumentError: mehrkanalig oder falsche Abtastrate (kein Resampling)
    """
    data, rate = sf.read(str(path), always_2d=True, dtype="float64")
    if data.shape[1] != 1:
        raise InvalidArgumentError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if expected_rate is not None and rate != expected_rate:
        raise InvalidArgumentError(
            f"{path}: sample rate {rate} Hz does not match expected {expected_rate} Hz (no resampling)")
    return AudioSignal(data[:, 0], rate)


def write_wav(path, x: AudioSignal, fmt: str = "float32"):
    """Schreibt ein AudioSignal als WAV (float32 oder pcm16)."""
    if fmt not in WAV_SUBTYPES:
        raise InvalidArgumentError(f"Unsupported WAV format {fmt!r}, use one of {sorted(WAV_SUBTYPES)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples = x.samples
    if fmt == "pcm16":
        samples = np.clip(samples, -1.0, 1.0)
    sf.write(str(path), samples.astype(np.float32), x.sample_rate, subtype=WAV_SUBTYPES[fmt])
