"""
config.py
Zentrale Konfiguration für DerevKit:
- Pfade
- Fehlerklassen (gemeinsam für alle Module)
- Default-Einstellungen (Desk-Scale)
- Config-Manager mit Validierung und sicherem Speichern
"""

from pathlib import Path
import copy
import json
import os
import shutil
import time
from typing import Any, Optional


# ============================================================
# 1. Pfade
# ============================================================

BASE_DIR = Path(__file__).resolve().parent

CONFIGS_DIR = BASE_DIR / "configs"
DESK_CONFIG_PATH = CONFIGS_DIR / "desk.json"
PAPER_CONFIG_PATH = CONFIGS_DIR / "paper.json"

VERSION = "1.0.0"


# ============================================================
# 2. Fehlerklassen
# ============================================================

class DerevKitError(Exception):
    """Basisklasse aller DerevKit-Fehler."""


class ConfigError(DerevKitError, ValueError):
    """Ungültige Konfiguration oder ungültige CLI-Argumente (Exit-Code 2)."""


class InvalidArgumentError(DerevKitError, ValueError):
    """Ungültiges Argument einer Operation (leere Signale, falsche Rate, ...)."""


class ShapeError(DerevKitError, ValueError):
    """Inkompatible Tensor- oder Spektrogramm-Formen."""


class InfeasibleT60Error(InvalidArgumentError):
    """Sabine-Absorption > 1: Raum zu klein für die gewünschte T60."""


class InsufficientDecayError(DerevKitError, ValueError):
    """Die Energieabklingkurve erreicht die -35 dB nicht."""


class UndefinedCorrelationError(DerevKitError, ValueError):
    """Korrelation bei Varianz 0 nicht definiert."""


class InvalidStateError(DerevKitError, RuntimeError):
    """Optimizer-Schritt ohne Gradient o.ä."""


class MigrationError(DerevKitError, ValueError):
    """Checkpoints passen in ihren Dimensionen nicht zusammen."""


class ContractError(DerevKitError, ValueError):
    """Eingabe verletzt einen Vertrag (z.B. nicht normalisierte Features)."""


# ============================================================
# 3. Default-Einstellungen (Desk-Scale)
# ============================================================

FULL_T60_GRID = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5]

DEFAULT_SETTINGS = {
    "dataset": {
        "fs": 8000,
        "duration": 2.0,
        "stft": {
            "window_len": 480,
            "fft_size": 512,
            "hop": 120,
            "window": "hamming"
        },
        "rooms": {
            "seen": [[9.0, 8.0, 7.0]],
            "unseen": [[9.0, 9.0, 10.0]]
        },
        "t60_grid": list(FULL_T60_GRID),
        "task": "t60",
        "derev_t60s": [0.3, 0.6, 0.9],
        "rirs_per_cell": {"train": 5, "val": 1, "test": 2},
        "cleans_per_rir": 1,
        "clean_dir": None,
        "reuse_cleans_across_rooms": False,
        "mic_distance": 1.0,
        "wall_clearance": 0.5,
        "max_order": None,
        "highpass": False,
        "wall_model": "calibrated"
    },
    "t60_net": {
        "channels": [4, 4, 8, 8, 8, 8],
        "cls_hidden1": 32,
        "penultimate_dim": 16,
        "reg_hidden": 16,
        "reg_channels": 8,
        "avgpool_kernel": 3,
        "avgpool_stride": 3,
        "leaky_slope": 0.1,
        "alpha": 0.1,
        "beta": 0.9,
        "rank_temperature": 0.1,
        "classes": None,
        "epochs": 20,
        "batch": 16,
        "lr": 0.001,
        "seed": 0
    },
    "derev": {
        "lstm_layers": 3,
        "hidden": 64,
        "dropout": 0.5,
        "late_target": "residual",
        "epochs": 20,
        "batch": 16,
        "lr": 0.001,
        "seed": 0
    },
    "joint": {
        "gamma": 0.7,
        "alpha": 0.1,
        "t60_checkpoint": None,
        "derev_checkpoint": None,
        "epochs": 10,
        "batch": 16,
        "lr": 0.001,
        "seed": 0,
        "link_feature": "penultimate",
        "freeze_t60": False
    },
    "evaluation": {
        "split": "test",
        "oracle": False
    },
    "paths": {
        "work_dir": "work",
        "manifest": None
    },
    "runtime": {
        "workers": 1,
        "precision": "float64",
        "seed": 0,
        "cache_items": 512
    }
}


# ============================================================
# 4. Validierung
# ============================================================

def _is_dims_list(value):
    return (isinstance(value, list) and all(
        isinstance(d, list) and len(d) == 3 and all(_is_number(x) and x > 0 for x in d)
        for d in value))


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_unit(value):
    return _is_number(value) and 0.0 <= value <= 1.0


def _is_positive(value):
    return _is_number(value) and value > 0


def _is_count(value):
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _is_optional_str(value):
    return value is None or isinstance(value, str)


def _is_bool(value):
    return isinstance(value, bool)


# Wertebereiche pro Schlüssel; Typen kommen aus DEFAULT_SETTINGS
VALIDATORS = {
    "dataset.fs": lambda v: isinstance(v, int) and v > 0,
    "dataset.duration": _is_positive,
    "dataset.stft.window_len": lambda v: isinstance(v, int) and v > 0,
    "dataset.stft.fft_size": lambda v: isinstance(v, int) and v > 0 and v % 2 == 0,
    "dataset.stft.hop": lambda v: isinstance(v, int) and v > 0,
    "dataset.stft.window": lambda v: v in ("hamming", "hann"),
    "dataset.rooms.seen": _is_dims_list,
    "dataset.rooms.unseen": _is_dims_list,
    "dataset.t60_grid": lambda v: isinstance(v, list) and len(v) >= 2 and all(_is_positive(x) for x in v),
    "dataset.task": lambda v: v in ("t60", "derev"),
    "dataset.derev_t60s": lambda v: isinstance(v, list) and len(v) >= 1 and all(_is_positive(x) for x in v),
    "dataset.rirs_per_cell.train": _is_count,
    "dataset.rirs_per_cell.val": _is_count,
    "dataset.rirs_per_cell.test": _is_count,
    "dataset.cleans_per_rir": lambda v: isinstance(v, int) and v >= 1,
    "dataset.clean_dir": _is_optional_str,
    "dataset.mic_distance": _is_positive,
    "dataset.wall_clearance": lambda v: _is_number(v) and v >= 0,
    "dataset.max_order": lambda v: v is None or _is_count(v),
    "dataset.reuse_cleans_across_rooms": _is_bool,
    "dataset.highpass": _is_bool,
    "dataset.wall_model": lambda v: v in ("calibrated", "pressure", "sabine"),
    "t60_net.channels": lambda v: isinstance(v, list) and len(v) == 6 and all(isinstance(c, int) and c > 0 for c in v),
    "t60_net.cls_hidden1": lambda v: isinstance(v, int) and v > 0,
    "t60_net.penultimate_dim": lambda v: isinstance(v, int) and v > 0,
    "t60_net.reg_hidden": lambda v: isinstance(v, int) and v > 0,
    "t60_net.reg_channels": lambda v: isinstance(v, int) and v > 0,
    "t60_net.avgpool_kernel": lambda v: isinstance(v, int) and v > 0,
    "t60_net.avgpool_stride": lambda v: isinstance(v, int) and v > 0,
    "t60_net.leaky_slope": lambda v: _is_number(v) and 0 <= v < 1,
    "t60_net.alpha": _is_unit,
    "t60_net.beta": _is_unit,
    "t60_net.rank_temperature": _is_positive,
    "t60_net.classes": lambda v: v is None or (isinstance(v, list) and len(v) >= 1 and all(_is_positive(x) for x in v)),
    "t60_net.epochs": _is_count,
    "t60_net.batch": lambda v: isinstance(v, int) and v >= 2,
    "t60_net.lr": _is_positive,
    "t60_net.seed": _is_count,
    "derev.lstm_layers": lambda v: isinstance(v, int) and v >= 1,
    "derev.hidden": lambda v: isinstance(v, int) and v > 0,
    "derev.dropout": lambda v: _is_number(v) and 0 <= v < 1,
    "derev.late_target": lambda v: v in ("residual", "signal"),
    "derev.epochs": _is_count,
    "derev.batch": lambda v: isinstance(v, int) and v >= 1,
    "derev.lr": _is_positive,
    "derev.seed": _is_count,
    "joint.gamma": _is_unit,
    "joint.alpha": _is_unit,
    "joint.t60_checkpoint": _is_optional_str,
    "joint.derev_checkpoint": _is_optional_str,
    "joint.epochs": _is_count,
    "joint.batch": lambda v: isinstance(v, int) and v >= 2,
    "joint.lr": _is_positive,
    "joint.seed": _is_count,
    "joint.link_feature": lambda v: v in ("penultimate", "regression", "onehot"),
    "joint.freeze_t60": _is_bool,
    "evaluation.oracle": _is_bool,
    "evaluation.split": lambda v: v in ("train", "val", "test"),
    "paths.work_dir": lambda v: isinstance(v, str) and v != "",
    "paths.manifest": _is_optional_str,
    "runtime.workers": lambda v: isinstance(v, int) and v >= 1,
    "runtime.precision": lambda v: v in ("float64", "float32"),
    "runtime.seed": _is_count,
    "runtime.cache_items": lambda v: isinstance(v, int) and not isinstance(v, bool) and v >= 1,
}


def _check_type(path, default, value):
    """Prüft den Typ eines Werts gegen den Default-Wert."""
    if default is None or value is None:
        return
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {value!r}")
    elif isinstance(default, (int, float)):
        if not _is_number(value):
            raise ConfigError(f"{path}: expected number, got {value!r}")
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list, got {value!r}")


def _merge(defaults: dict, override: dict, prefix=""):
    """
    Mischt override rekursiv über defaults.
    Unbekannte Schlüssel werden abgelehnt.
    """
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"Unknown config key: {path}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected section object, got {value!r}")
            merged[key] = _merge(defaults[key], value, prefix=path + ".")
        else:
            _check_type(path, defaults[key], value)
            merged[key] = copy.deepcopy(value)
    return merged


def _walk(settings: dict, prefix=""):
    for key, value in settings.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _walk(value, prefix=path + ".")
        else:
            yield path, value


# ============================================================
# 5. Sicheres Speichern
# ============================================================

def replace_with_retry(tmp_path, path, max_retries=5):
    """Rename mit Retry (Netzlaufwerke/Sync-Ordner halten Dateien kurz fest)."""
    for i in range(max_retries):
        try:
            os.replace(tmp_path, path)
            return
        except OSError:
            if i == max_retries - 1:
                raise
            time.sleep(0.2)


def save_json_atomic(path, data, backup=True):
    """
    Speichert JSON sicher.
    Features:
    - Backup: Erstellt <name>.json.bak vor dem Speichern
    - Atomic Write: Schreibt in .tmp und benennt um
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    # 1. Backup erstellen (falls Original existiert)
    if backup and path.exists():
        shutil.copy2(path, path.with_suffix(path.suffix + ".bak"))

    # 2. Atomic Write
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")

        replace_with_retry(tmp_path, path)
    finally:
        if tmp_path.exists():
            try:
                os.remove(tmp_path)
            except OSError:
                pass


# ============================================================
# 6. Config Manager
# ============================================================

class Config:
    """
    Lädt, validiert und speichert die Experiment-Konfiguration.
    Ohne Datei → Default-Werte (Desk-Scale).
    """

    def __init__(self, path=None, overrides: Optional[dict] = None):
        """
        Initialisiert den Config Manager.

        Args:
            path: JSON-Datei mit (Teil-)Einstellungen oder None
            overrides: Dict {"t60_net.epochs": 5, ...} aus CLI-Flags

        Raises:
            ConfigError: Datei fehlt/korrupt, unbekannte Schlüssel, ungültige Werte
        """
        self.path = Path(path) if path else None
        self.settings = copy.deepcopy(DEFAULT_SETTINGS)
        self.load()
        for key, value in (overrides or {}).items():
            self._assign(key, value)
        self.validate()

    def load(self):
        """Lädt die JSON-Datei und mischt sie über die Defaults."""
        if self.path is None:
            return
        if not self.path.exists():
            raise ConfigError(f"Config file not found: {self.path}")
        try:
            with open(self.path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Config file {self.path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {self.path} must contain a JSON object")
        self.settings = _merge(DEFAULT_SETTINGS, data)

    def validate(self):
        """
        Prüft alle Werte, bevor irgendeine Arbeit beginnt.

        Raises:
            ConfigError: mit dem gepunkteten Pfad des ersten ungültigen Werts
        """
        for path, value in _walk(self.settings):
            check = VALIDATORS.get(path)
            if check is not None and not check(value):
                raise ConfigError(f"Invalid value for {path}: {value!r}")

        stft = self.settings["dataset"]["stft"]
        if not stft["hop"] <= stft["window_len"] <= stft["fft_size"]:
            raise ConfigError(
                f"dataset.stft requires hop <= window_len <= fft_size, got "
                f"{stft['hop']}/{stft['window_len']}/{stft['fft_size']}")

        grid = self.settings["dataset"]["t60_grid"]
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError(f"dataset.t60_grid must be strictly increasing: {grid}")
        for key in ("dataset.derev_t60s", "t60_net.classes"):
            values = self.get(key)
            if values is None:
                continue
            missing = [v for v in values if not any(abs(v - g) < 1e-9 for g in grid)]
            if missing:
                raise ConfigError(f"{key}: values {missing} are not on the T60 grid {grid}")
        classes = self.get("t60_net.classes")
        if classes is not None and len(classes) < 2:
            raise ConfigError(f"t60_net.classes needs at least two T60 values, got {classes}")

    def get(self, path, default=None):
        """
        Zugriff auf verschachtelte Einstellungen:
        config.get("t60_net.alpha")
        """
        value = self.settings
        for key in path.split("."):
            if not isinstance(value, dict) or key not in value:
                return default
            value = value[key]
        return value

    def set(self, path, value):
        """
        Setzt verschachtelte Einstellungen und validiert erneut:
        config.set("joint.gamma", 0.2)
        Bei ungültigem Wert bleibt der vorige Zustand erhalten.
        """
        previous = copy.deepcopy(self.settings)
        try:
            self._assign(path, value)
            self.validate()
        except ConfigError:
            self.settings = previous
            raise

    def section(self, name) -> dict:
        """Kopie eines Abschnitts (dataset, t60_net, ...)."""
        return copy.deepcopy(self.settings[name])

    def _assign(self, path, value):
        keys = path.split(".")
        obj = self.settings
        defaults: Any = DEFAULT_SETTINGS
        for key in keys[:-1]:
            if key not in obj or not isinstance(obj[key], dict):
                raise ConfigError(f"Unknown config key: {path}")
            obj = obj[key]
            defaults = defaults[key]
        if keys[-1] not in obj or isinstance(obj[keys[-1]], dict):
            raise ConfigError(f"Unknown config key: {path}")
        _check_type(path, defaults[keys[-1]], value)
        obj[keys[-1]] = value

    def save(self, path=None):
        """Speichert die effektive Konfiguration (Backup + Atomic Write)."""
        target = Path(path) if path else self.path
        if target is None:
            raise ConfigError("No path given for saving the config")
        save_json_atomic(target, self.settings)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.settings)
