"""
metrics.py
Bewertungsmaße: MSE, MAE, PCC, SRCC für T60-Schätzungen, SDR für Wellenformen.
MetricReport: Einzelwerte + Aggregate (gesamt und pro T60), JSON + CSV.
"""

from dataclasses import dataclass, field
from pathlib import Path
import json
import math
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats

from config import InvalidArgumentError, UndefinedCorrelationError, save_json_atomic
from logger_system import logger
from signal_core import AudioSignal

SDR_CAP_DB = 100.0
REPORT_SCHEMA_VERSION = 1
RECORD_FIELDS = ("id", "t60_true", "t60_reg", "t60_creg", "sdr_unprocessed", "sdr_enhanced")
_VAR_EPS = 1e-24


# ============================================================
# 1. Skalare Maße
# ============================================================

def _pair(x, y, minimum: int):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"sequences differ in length: {x.size} vs {y.size}")
    if x.size < minimum:
        raise InvalidArgumentError(f"need at least {minimum} values, got {x.size}")
    return x, y


def mse(pred, true) -> float:
    pred, true = _pair(pred, true, 1)
    return float(np.mean((pred - true) ** 2))


def mae(pred, true) -> float:
    pred, true = _pair(pred, true, 1)
    return float(np.mean(np.abs(pred - true)))


def pcc(x, y) -> float:
    """
    Pearson-Korrelation.

    Raises:
        InvalidArgumentError: weniger als 2 Werte / ungleiche Länge
        UndefinedCorrelationError: Varianz 0
    """
    x, y = _pair(x, y, 2)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx <= _VAR_EPS or syy <= _VAR_EPS:
        raise UndefinedCorrelationError("correlation undefined for zero-variance input")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def srcc(x, y) -> float:
    """Spearman: PCC der Ränge (Bindungen → mittlere Ränge)."""
    x, y = _pair(x, y, 2)
    return pcc(stats.rankdata(x), stats.rankdata(y))


def sdr(reference: Union[AudioSignal, np.ndarray], estimate: Union[AudioSignal, np.ndarray]) -> float:
    """
    SDR mit Projektion auf die Referenz (Einzelquelle).

    s_target = <est, ref>/||ref||² · ref, e = est - s_target,
    SDR = 10·log10(||s_target||² / ||e||²), begrenzt auf ±100 dB.

    Raises:
        InvalidArgumentError: stille Referenz
    """
    ref = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    est = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    if ref.size != est.size:
        n = min(ref.size, est.size)
        logger.warning(f"SDR: Längen {ref.size} und {est.size} werden auf {n} gekürzt")
        ref, est = ref[:n], est[:n]
    ref_energy = float(ref @ ref)
    if ref_energy <= 0.0:
        raise InvalidArgumentError("SDR needs a non-silent reference")
    target = (float(est @ ref) / ref_energy) * ref
    error = est - target
    target_energy = float(target @ target)
    error_energy = float(error @ error)
    if error_energy <= 0.0:
        return SDR_CAP_DB if target_energy > 0.0 else -SDR_CAP_DB
    if target_energy <= 0.0:
        return -SDR_CAP_DB
    return float(np.clip(10.0 * np.log10(target_energy / error_energy), -SDR_CAP_DB, SDR_CAP_DB))


def _safe(fn, *args) -> Optional[float]:
    """Maß oder None, wenn es auf diesen Daten nicht definiert ist."""
    try:
        return fn(*args)
    except (UndefinedCorrelationError, InvalidArgumentError):
        return None


def t60_summary(pred: Sequence[float], true: Sequence[float]) -> Dict[str, Optional[float]]:
    """MSE, MAE, PCC, SRCC einer Schätzreihe (undefinierte Werte → None)."""
    return {
        "mse": _safe(mse, pred, true),
        "mae": _safe(mae, pred, true),
        "pcc": _safe(pcc, pred, true),
        "srcc": _safe(srcc, pred, true),
    }


# ============================================================
# 2. MetricReport
# ============================================================

def _mean_std(values: List[float]) -> Dict[str, Optional[float]]:
    if not values:
        return {"mean": None, "std": None}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def _group_key(t60: Optional[float]) -> str:
    return "unknown" if t60 is None else f"{t60:.2f}"


def compute_aggregates(records: List[dict]) -> Dict[str, dict]:
    """
    Aggregate über alle Einträge ("all") und pro nominaler T60 ("0.90", ...).
    """
    groups: Dict[str, List[dict]] = {"all": list(records)}
    for rec in records:
        groups.setdefault(_group_key(rec.get("t60_true")), []).append(rec)

    out = {}
    for key in sorted(groups, key=lambda k: (k != "all", k)):
        recs = groups[key]
        agg: Dict[str, object] = {"n": len(recs)}
        for branch in ("reg", "creg"):
            pairs = [(r[f"t60_{branch}"], r["t60_true"]) for r in recs
                     if r.get(f"t60_{branch}") is not None and r.get("t60_true") is not None]
            if pairs:
                pred, true = zip(*pairs)
                agg[branch] = t60_summary(pred, true)
        for name in ("sdr_unprocessed", "sdr_enhanced"):
            values = [r[name] for r in recs if r.get(name) is not None]
            if values:
                agg[name] = _mean_std(values)
        gains = [r["sdr_enhanced"] - r["sdr_unprocessed"] for r in recs
                 if r.get("sdr_enhanced") is not None and r.get("sdr_unprocessed") is not None]
        if gains:
            agg["sdr_gain"] = _mean_std(gains)
        out[key] = agg
    return out


def _close(a, b, tol=1e-9) -> bool:
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_close(a[k], b[k], tol) for k in a)
    if a is None or b is None:
        return a is None and b is None
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return abs(a - b) <= tol * max(1.0, abs(a), abs(b))
    return a == b


@dataclass
class MetricReport:
    """
    Einzelwerte + Aggregate einer Evaluation.

    Attributes:
        records: [{id, t60_true, t60_reg, t60_creg, sdr_unprocessed, sdr_enhanced}, ...]
        aggregates: aus records berechnet (gesamt + pro T60)
        meta: Modus (model/oracle), Checkpoint, Split, Fehlerliste, ...
    """
    records: List[dict] = field(default_factory=list)
    aggregates: Dict[str, dict] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: List[dict], meta: Optional[dict] = None) -> "MetricReport":
        records = [{k: rec.get(k) for k in RECORD_FIELDS} for rec in records]
        return cls(records, compute_aggregates(records), dict(meta or {}))

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "meta": self.meta,
            "aggregates": self.aggregates,
            "records": self.records,
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=list(RECORD_FIELDS))

    def save(self, path) -> Path:
        """Schreibt <name>.json und die CSV-Kopie <name>.csv."""
        path = Path(path)
        save_json_atomic(path, self.to_dict(), backup=False)
        self.to_frame().to_csv(path.with_suffix(".csv"), index=False)
        return path

    @classmethod
    def load(cls, path) -> "MetricReport":
        """
        Liest einen Report und prüft die Aggregate gegen die Einzelwerte.

        Raises:
            InvalidArgumentError: unbekannte Schema-Version oder inkonsistente Aggregate
        """
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        if data.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise InvalidArgumentError(f"{path}: unsupported report schema {data.get('schema_version')!r}")
        report = cls(data["records"], data["aggregates"], data.get("meta", {}))
        if not _close(compute_aggregates(report.records), report.aggregates):
            raise InvalidArgumentError(f"{path}: aggregates do not match the per-example records")
        return report
