"""
t60_net.py
Zusammengesetzter T60-Schätzer.

- Gemeinsamer CNN-Feature-Extraktor (6 Conv-Schichten, 3 Max-Pools)
- Regressions-Zweig (Conv + ReLU → AvgPool → FC → Skalar)
- Klassifikations-Zweig (2 FC → Penultimate → Logits → Softmax → Erwartungswert)
- Vortrainings-Verlust mit CE, MSE und Korrelations-Termen (Soft-Rank-Spearman)
- Trainingsschleife mit RMSprop, Historie + CSV
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

import autodiff as ad
from autodiff import Tensor
from background import DEFAULT_CACHE_ITEMS, BatchPrefetcher, OrderedWorkerPool, RowCache
from checkpoint import Checkpoint
from config import (
    ConfigError, ContractError, InvalidArgumentError, MigrationError, ShapeError,
)
from dataset_synth import DatasetManifest, ManifestRecord
from layers import LayerSpec, Sequential
from logger_system import logger
from metrics import t60_summary
from optim import OptimizerState, make_optimizer, optimizer_step
from signal_core import AudioSignal, FeatureMap, NormStats, StftConfig, extract_t60_features, read_wav, stft

POOL_COUNT = 3
CHECKPOINT_KIND = "t60"


# ============================================================
# 1. Konfiguration und Ausgaben
# ============================================================

@dataclass
class T60NetConfig:
    """
    Architektur des T60-Netzes.

    Attributes:
        class_times: Klassenmitten T_i in Sekunden (streng steigend)
        channels: Kanäle der 6 Conv-Schichten
        cls_hidden1 / penultimate_dim: FC-Breiten des Klassifikations-Zweigs
        reg_hidden / reg_channels: FC-Breite und Conv-Kanäle des Regressions-Zweigs
        n_rows / n_frames: feste Eingabegröße (3F × Frames)
    """
    class_times: List[float]
    channels: Tuple[int, ...] = (16, 16, 32, 32, 64, 64)
    cls_hidden1: int = 512
    penultimate_dim: int = 128
    reg_hidden: int = 128
    reg_channels: int = 64
    avgpool_kernel: int = 3
    avgpool_stride: int = 3
    leaky_slope: float = 0.1
    n_rows: int = 771
    n_frames: int = 442

    def __post_init__(self):
        self.class_times = [float(t) for t in self.class_times]
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.class_times) < 2:
            raise ConfigError(f"T60 net needs at least 2 classes, got {self.class_times}")
        if any(b <= a for a, b in zip(self.class_times, self.class_times[1:])):
            raise ConfigError(f"class_times must be strictly increasing: {self.class_times}")
        if len(self.channels) != 6:
            raise ConfigError(f"T60 net needs 6 conv channel counts, got {list(self.channels)}")

    @property
    def n_classes(self) -> int:
        return len(self.class_times)

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        return latent_shape(self.n_rows, self.n_frames, self.channels[-1])

    @property
    def reg_pooled_shape(self) -> Tuple[int, int]:
        _, rows, frames = self.latent_shape
        k, s = self.avgpool_kernel, self.avgpool_stride
        if rows < k or frames < k:
            raise ShapeError(f"latent {rows}x{frames} is smaller than the regression avgpool kernel {k}")
        return (rows - k) // s + 1, (frames - k) // s + 1

    def to_dict(self) -> dict:
        data = asdict(self)
        data["channels"] = list(self.channels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "T60NetConfig":
        return cls(**data)

    @classmethod
    def from_section(cls, section: dict, class_times: Sequence[float], n_rows: int, n_frames: int) -> "T60NetConfig":
        """Baut die Architektur aus dem t60_net-Abschnitt der Konfiguration."""
        return cls(
            class_times=list(class_times), channels=tuple(section["channels"]),
            cls_hidden1=section["cls_hidden1"], penultimate_dim=section["penultimate_dim"],
            reg_hidden=section["reg_hidden"], reg_channels=section["reg_channels"],
            avgpool_kernel=section["avgpool_kernel"], avgpool_stride=section["avgpool_stride"],
            leaky_slope=section["leaky_slope"], n_rows=n_rows, n_frames=n_frames,
        )


def latent_shape(n_rows: int, n_frames: int, channels: int = 64) -> Tuple[int, int, int]:
    """Form des Extraktor-Ausgangs: drei Abrundungs-Halbierungen pro Achse."""
    rows, frames = n_rows, n_frames
    for _ in range(POOL_COUNT):
        if rows < 2 or frames < 2:
            raise ShapeError(f"input {n_rows}x{n_frames} is too small for {POOL_COUNT} 2x2 poolings")
        rows, frames = rows // 2, frames // 2
    return channels, rows, frames


@dataclass
class T60Outputs:
    """
    Ausgaben beider Zweige für einen Batch.

    reg_value (N,), class_logits (N, H), class_probs (N, H), creg_value (N,), penultimate (N, P)
    """
    reg_value: Tensor
    class_logits: Tensor
    class_probs: Tensor
    creg_value: Tensor
    penultimate: Tensor

    @property
    def batch_size(self) -> int:
        return self.class_logits.shape[0]

    def numpy(self) -> Dict[str, np.ndarray]:
        return {k: getattr(self, k).data for k in
                ("reg_value", "class_logits", "class_probs", "creg_value", "penultimate")}


def outputs_from_heads(reg_value, class_logits, penultimate, class_times: Sequence[float]) -> T60Outputs:
    """Softmax und klassifikationsbasierte Regression Σ p_i·T_i aus den Logits."""
    logits = ad.as_tensor(class_logits)
    probs = ad.softmax(logits, axis=-1)
    times = np.asarray(class_times, dtype=logits.dtype).reshape(-1, 1)
    if times.shape[0] != logits.shape[1]:
        raise ShapeError(f"{logits.shape[1]} logits but {times.shape[0]} class times")
    creg = ad.matmul(probs, times).reshape(-1)
    return T60Outputs(ad.as_tensor(reg_value).reshape(-1), logits, probs, creg, ad.as_tensor(penultimate))


def concat_outputs(parts: Sequence[T60Outputs]) -> T60Outputs:
    if len(parts) == 1:
        return parts[0]
    fields = ("reg_value", "class_logits", "class_probs", "creg_value", "penultimate")
    return T60Outputs(*[ad.concat([getattr(p, f) for p in parts], axis=0) for f in fields])


# ============================================================
# 2. Netz
# ============================================================

def _trunk_specs(cfg: T60NetConfig) -> List[LayerSpec]:
    c = cfg.channels
    leaky = {"slope": cfg.leaky_slope}
    specs: List[LayerSpec] = []
    in_ch = 1
    # Pool nach Conv 2, Conv 4 und zwischen Conv 5 und 6
    for i, out_ch in enumerate(c):
        specs += [
            LayerSpec("conv2d", {"in_channels": in_ch, "out_channels": out_ch}),
            LayerSpec("batchnorm2d", {"channels": out_ch}),
            LayerSpec("leaky_relu", leaky),
        ]
        if i in (1, 3, 4):
            specs.append(LayerSpec("maxpool2x2"))
        in_ch = out_ch
    return specs


class T60Net:
    """
    Gewichte und Vorwärtsrechnung des T60-Netzes.

    Parameter-Namen: "trunk.<i>.<name>", "reg_conv.", "reg_fc.", "cls_fc.", "cls_out.".
    """

    def __init__(self, cfg: T60NetConfig, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        leaky = {"slope": cfg.leaky_slope}
        ch, rows, frames = cfg.latent_shape
        pooled_rows, pooled_frames = cfg.reg_pooled_shape

        self.trunk = Sequential.from_specs(_trunk_specs(cfg), rng, dtype)
        self.reg_conv = Sequential.from_specs([
            LayerSpec("conv2d", {"in_channels": ch, "out_channels": cfg.reg_channels}),
            LayerSpec("relu"),
            LayerSpec("avgpool", {"kernel": cfg.avgpool_kernel, "stride": cfg.avgpool_stride}),
        ], rng, dtype)
        self.reg_fc = Sequential.from_specs([
            LayerSpec("fully_connected", {"in_features": cfg.reg_channels * pooled_rows * pooled_frames,
                                          "out_features": cfg.reg_hidden}),
            LayerSpec("batchnorm1d", {"channels": cfg.reg_hidden}),
            LayerSpec("leaky_relu", leaky),
            LayerSpec("fully_connected", {"in_features": cfg.reg_hidden, "out_features": 1}),
            LayerSpec("relu"),
        ], rng, dtype)
        self.cls_fc = Sequential.from_specs([
            LayerSpec("fully_connected", {"in_features": ch * rows * frames, "out_features": cfg.cls_hidden1}),
            LayerSpec("batchnorm1d", {"channels": cfg.cls_hidden1}),
            LayerSpec("leaky_relu", leaky),
            LayerSpec("fully_connected", {"in_features": cfg.cls_hidden1, "out_features": cfg.penultimate_dim}),
            LayerSpec("batchnorm1d", {"channels": cfg.penultimate_dim}),
            LayerSpec("leaky_relu", leaky),
        ], rng, dtype)
        self.cls_out = Sequential.from_specs([
            LayerSpec("fully_connected", {"in_features": cfg.penultimate_dim, "out_features": cfg.n_classes}),
        ], rng, dtype)
        # Regressions-Ausgang startet in der Mitte des Rasters (ReLU nicht tot)
        self.reg_fc.layers[3].params["bias"].data[...] = np.mean(cfg.class_times)

    def _parts(self) -> Dict[str, Sequential]:
        return {"trunk.": self.trunk, "reg_conv.": self.reg_conv, "reg_fc.": self.reg_fc,
                "cls_fc.": self.cls_fc, "cls_out.": self.cls_out}

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for prefix, part in self._parts().items():
            out.update(part.named_parameters(prefix))
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, part in self._parts().items():
            out.update(part.named_buffers(prefix))
        return out

    def state_arrays(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.parameters().items()}
        state.update(self.buffers())
        return state

    def load_state(self, arrays: Dict[str, np.ndarray]):
        """
        Übernimmt Parameter und Puffer.

        Raises:
            MigrationError: fehlender Tensor oder abweichende Form
        """
        targets = {name: p.data for name, p in self.parameters().items()}
        targets.update(self.buffers())
        for name, target in targets.items():
            if name not in arrays:
                raise MigrationError(f"T60 checkpoint lacks tensor {name!r} (expected shape {target.shape})")
            source = np.asarray(arrays[name])
            if source.shape != target.shape:
                raise MigrationError(
                    f"T60 tensor {name!r}: checkpoint shape {source.shape} vs model shape {target.shape}")
            target[...] = source.astype(self.dtype)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, prefix: str = "t60/") -> "T60Net":
        header = ckpt.header.get("t60_net")
        if header is None:
            raise MigrationError("checkpoint has no T60 network description")
        dtype = np.float32 if ckpt.header.get("precision") == "float32" else np.float64
        net = cls(T60NetConfig.from_dict(header), seed=0, dtype=dtype)
        net.load_state(ckpt.subset(prefix))
        return net

    # --- Vorwärts ---
    def extract(self, x, train: bool = False) -> Tensor:
        return self.trunk(ad.as_tensor(x), train=train)

    def heads(self, latent: Tensor, train: bool = False) -> T60Outputs:
        n = latent.shape[0]
        reg = self.reg_conv(latent, train=train)
        reg = self.reg_fc(reg.reshape(n, -1), train=train)
        penultimate = self.cls_fc(latent.reshape(n, -1), train=train)
        logits = self.cls_out(penultimate, train=train)
        return outputs_from_heads(reg, logits, penultimate, self.cfg.class_times)

    def __call__(self, x, train: bool = False) -> T60Outputs:
        return self.heads(self.extract(x, train), train)

    def predict(self, x: np.ndarray, chunk: int = 32) -> Dict[str, np.ndarray]:
        """Eval-Modus in Blöcken, Ergebnis als numpy-Arrays."""
        parts = [self(x[i:i + chunk], train=False).numpy() for i in range(0, x.shape[0], chunk)]
        return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}


# ============================================================
# 3. Eingaben
# ============================================================

def fit_frames(values: np.ndarray, n_frames: int) -> np.ndarray:
    """Schneidet auf n_frames ab bzw. füllt mit 0 (= Mittelwert nach Normalisierung) auf."""
    if values.shape[1] >= n_frames:
        return values[:, :n_frames]
    return np.pad(values, ((0, 0), (0, n_frames - values.shape[1])))


def features_to_batch(maps: Union[FeatureMap, Sequence[FeatureMap]], cfg: T60NetConfig, dtype=np.float64) -> np.ndarray:
    """
    FeatureMaps → Batch (N, 1, 3F, n_frames).

    Raises:
        ContractError: nicht normalisierte Features
        ShapeError: falsche Zeilenzahl
    """
    if isinstance(maps, FeatureMap):
        maps = [maps]
    batch = np.zeros((len(maps), 1, cfg.n_rows, cfg.n_frames), dtype=dtype)
    for i, fmap in enumerate(maps):
        if not fmap.normalized:
            raise ContractError("T60 feature extractor needs normalized features (apply NormStats first)")
        if fmap.n_rows != cfg.n_rows:
            raise ShapeError(f"feature map has {fmap.n_rows} rows, network expects {cfg.n_rows}")
        batch[i, 0] = fit_frames(fmap.values, cfg.n_frames)
    return batch


def signal_features(x: AudioSignal, stft_cfg: StftConfig, stats: NormStats, cfg: T60NetConfig,
                    dtype=np.float64) -> np.ndarray:
    """Audiosignal → normalisierte Eingabe (1, 1, 3F, n_frames)."""
    return features_to_batch(extract_t60_features(stft(x, stft_cfg), stats), cfg, dtype)


def feature_extractor_forward(f, net: T60Net, mode: str = "eval") -> Tensor:
    """
    Gemeinsamer Extraktor: FeatureMap(s) oder fertiger Batch → Latent (N, C, R/8, T/8).

    Raises:
        ContractError: FeatureMap nicht normalisiert
    """
    if isinstance(f, FeatureMap) or (isinstance(f, (list, tuple)) and f and isinstance(f[0], FeatureMap)):
        f = features_to_batch(f, net.cfg, net.dtype)
    return net.extract(f, train=(mode == "train"))


def t60_forward(latent: Tensor, net: T60Net, mode: str = "eval") -> T60Outputs:
    """
    Beide Köpfe auf dem Latent.

    Raises:
        ShapeError: Latent passt nicht zur Konfiguration
    """
    latent = ad.as_tensor(latent)
    if latent.shape[1:] != net.cfg.latent_shape:
        raise ShapeError(f"latent shape {latent.shape[1:]} does not match expected {net.cfg.latent_shape}")
    return net.heads(latent, train=(mode == "train"))


# ============================================================
# 4. Verlust
# ============================================================

CORR_EPS = 1e-12


def soft_rank(x: Tensor, temperature: float) -> Tensor:
    """Differenzierbare Ränge: 0.5 + Σ_j σ((x_i − x_j)/τ), für distinkte Werte nahe 1..N."""
    x = ad.as_tensor(x).reshape(-1)
    n = x.shape[0]
    diff = x.reshape(n, 1) - x.reshape(1, n)
    return ad.sigmoid(diff * (1.0 / temperature)).sum(axis=1) + 0.5


def correlation_magnitude(x: Tensor, y: Tensor) -> Tensor:
    """|Pearson(x, y)| als Tensor; bei Varianz 0 in x oder y der Wert 0."""
    x, y = ad.as_tensor(x).reshape(-1), ad.as_tensor(y).reshape(-1)
    if np.std(x.data) < CORR_EPS or np.std(y.data) < CORR_EPS:
        return Tensor(np.array(0.0))
    dx = x - x.mean()
    dy = y - y.mean()
    r = (dx * dy).sum() / ad.sqrt((dx * dx).sum() * (dy * dy).sum())
    return ad.abs_(r)


def _check_unit(name: str, value: float):
    if not 0.0 <= value <= 1.0:
        raise InvalidArgumentError(f"{name} must be in [0, 1], got {value}")


def classification_loss(outputs: T60Outputs, t60s: np.ndarray, class_idx: np.ndarray, alpha: float) -> Tensor:
    """α·CE + (1−α)·MSE der klassifikationsbasierten Regression."""
    _check_unit("alpha", alpha)
    target = np.asarray(t60s, dtype=outputs.creg_value.dtype)
    ce = ad.cross_entropy(outputs.class_logits, np.asarray(class_idx))
    mse_creg = ((outputs.creg_value - target) ** 2).mean()
    return ce * alpha + mse_creg * (1.0 - alpha)


def loss_pretrain(outputs: Union[T60Outputs, Sequence[T60Outputs]], t60s, class_idx,
                  alpha: float, beta: float, temperature: float = 0.1) -> Tensor:
    """
    Vortrainings-Verlust beider Zweige:
    β(α·CE + (1−α)·MSE_creg) + (1−β)·MSE_reg − |ρ_reg| − |η_reg| − |ρ_cls| − |η_cls|

    ρ = Pearson, η = Pearson der Soft-Ränge (beides über den Mini-Batch).

    Raises:
        InvalidArgumentError: Batch < 2 oder α/β außerhalb [0, 1]
    """
    if not isinstance(outputs, T60Outputs):
        outputs = concat_outputs(list(outputs))
    _check_unit("alpha", alpha)
    _check_unit("beta", beta)
    t60s = np.asarray(t60s, dtype=outputs.reg_value.dtype).reshape(-1)
    n = outputs.batch_size
    if n < 2:
        raise InvalidArgumentError(f"pretraining loss needs a batch of at least 2, got {n}")
    if t60s.shape[0] != n or np.asarray(class_idx).shape[0] != n:
        raise ShapeError(f"batch of {n} outputs but {t60s.shape[0]} targets")

    mse_reg = ((outputs.reg_value - t60s) ** 2).mean()
    weighted = classification_loss(outputs, t60s, class_idx, alpha) * beta + mse_reg * (1.0 - beta)
    target = Tensor(t60s)
    target_ranks = soft_rank(target, temperature)
    correlations = (
        correlation_magnitude(outputs.reg_value, target)
        + correlation_magnitude(soft_rank(outputs.reg_value, temperature), target_ranks)
        + correlation_magnitude(outputs.creg_value, target)
        + correlation_magnitude(soft_rank(outputs.creg_value, temperature), target_ranks)
    )
    return weighted - correlations


def accuracy(class_logits, class_idx) -> float:
    logits = np.asarray(getattr(class_logits, "data", class_logits))
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(class_idx)))


# ============================================================
# 5. Training
# ============================================================

def make_batches(n: int, batch: int, rng: np.random.Generator, min_size: int = 1) -> List[np.ndarray]:
    """Zufällige Batches; ein zu kleiner Rest wird dem vorletzten Batch zugeschlagen."""
    order = rng.permutation(n)
    batches = [order[i:i + batch] for i in range(0, n, batch)]
    if len(batches) > 1 and len(batches[-1]) < min_size:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


class FeatureCache:
    """
    Normalisierte T60-Eingaben pro Manifest-Zeile, geladen bei Bedarf.
    Im Speicher bleiben höchstens max_items Zeilen (LRU).
    """

    def __init__(self, manifest: DatasetManifest, stats: NormStats, cfg: T60NetConfig, dtype=np.float64,
                 max_items: int = DEFAULT_CACHE_ITEMS):
        self.manifest = manifest
        self.stats = stats
        self.cfg = cfg
        self.dtype = dtype
        self._cache = RowCache(self._compute, max_items)

    def _compute(self, row: ManifestRecord) -> np.ndarray:
        x = read_wav(self.manifest.resolve(row.paths["reverb"]), self.manifest.sample_rate)
        return signal_features(x, self.manifest.stft, self.stats, self.cfg, self.dtype)[0]

    def load(self, row: ManifestRecord) -> np.ndarray:
        return self._cache.get(row.id, row)

    def __len__(self) -> int:
        return len(self._cache)

    def batch(self, rows: Sequence[ManifestRecord]) -> np.ndarray:
        return np.stack([self.load(r) for r in rows])

    def preload(self, rows: Sequence[ManifestRecord], workers: int = 1):
        """Parallel vorladen, höchstens so viele Zeilen wie der Cache fasst."""
        todo = [r for r in rows if r.id not in self._cache][:self._cache.max_items]
        _, errors = OrderedWorkerPool(workers, progress=False).map(self.load, todo, desc="Features")
        if errors:
            index, message = errors[0]
            raise InvalidArgumentError(f"could not load features for {todo[index].id}: {message}")


def resolve_classes(section: dict, manifest: DatasetManifest, rows: Sequence[ManifestRecord]) -> List[float]:
    """
    Klassen des Netzes (Konfiguration oder Manifest) und Prüfung der Labels.

    Raises:
        ConfigError: ein Beispiel liegt nicht auf den Klassen
    """
    classes = [float(t) for t in (section.get("classes") or manifest.classes)]
    off = sorted({r.t60 for r in rows if not any(abs(r.t60 - c) < 1e-9 for c in classes)})
    if off:
        raise ConfigError(f"dataset T60 values {off} are not among the network classes {classes}")
    return classes


def class_indices(rows: Sequence[ManifestRecord], classes: Sequence[float]) -> np.ndarray:
    return np.array([int(np.argmin([abs(r.t60 - c) for c in classes])) for r in rows], dtype=np.int64)


def _frame_count(rows: Sequence[ManifestRecord]) -> int:
    frames = {r.frames for r in rows}
    if len(frames) != 1:
        logger.warning(f"Beispiele mit unterschiedlichen Frame-Zahlen {sorted(frames)}, nutze das Maximum")
    return max(frames)


def predict_rows(net: T60Net, cache: FeatureCache, rows: Sequence[ManifestRecord],
                 chunk: int = 32) -> Dict[str, np.ndarray]:
    """Eval-Modus-Vorhersagen für Manifest-Zeilen, blockweise aus dem Cache geladen."""
    parts = [net.predict(cache.batch(rows[i:i + chunk]), chunk) for i in range(0, len(rows), chunk)]
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}


def evaluate_t60(net: T60Net, pred: Dict[str, np.ndarray], t60s: np.ndarray, idx: np.ndarray,
                 alpha: float, beta: float, temperature: float) -> dict:
    """Eval-Modus-Kennzahlen eines Splits (Verlust, Genauigkeit, MSE/MAE/PCC/SRCC pro Zweig)."""
    out = {"acc": accuracy(pred["class_logits"], idx), "loss": None}
    if len(t60s) >= 2:
        outputs = outputs_from_heads(pred["reg_value"], pred["class_logits"], pred["penultimate"],
                                     net.cfg.class_times)
        out["loss"] = float(loss_pretrain(outputs, t60s, idx, alpha, beta, temperature).data)
    for branch, key in (("reg", "reg_value"), ("creg", "creg_value")):
        for name, value in t60_summary(pred[key], t60s).items():
            out[f"{name}_{branch}"] = value
    return out


def build_t60_checkpoint(net: T60Net, state: Optional[OptimizerState], stats: NormStats, stft_cfg: StftConfig,
                         fs: int, seed: int, history: List[dict], section: dict) -> Checkpoint:
    tensors = {f"t60/{k}": v for k, v in net.state_arrays().items()}
    tensors["norm/mean"] = stats.mean
    tensors["norm/std"] = stats.std
    if state is not None:
        tensors.update(state.slot_arrays())
    header = {
        "kind": CHECKPOINT_KIND,
        "t60_net": net.cfg.to_dict(),
        "stft": stft_cfg.to_dict(),
        "fs": int(fs),
        "seed": int(seed),
        "precision": "float32" if net.dtype == np.float32 else "float64",
        "optimizer": None if state is None else state.hyperparameters(),
        "loss": {"alpha": section["alpha"], "beta": section["beta"],
                 "rank_temperature": section["rank_temperature"]},
        "history": history,
    }
    return Checkpoint(header, tensors)


def norm_stats_from_checkpoint(ckpt: Checkpoint) -> NormStats:
    if "norm/mean" not in ckpt.tensors:
        raise MigrationError("checkpoint carries no normalization statistics")
    return NormStats(ckpt.tensors["norm/mean"], ckpt.tensors["norm/std"])


def train_t60(manifest: DatasetManifest, section: dict, epochs: Optional[int] = None, seed: Optional[int] = None,
              workers: int = 1, precision: str = "float64", progress: bool = True,
              cache_items: int = DEFAULT_CACHE_ITEMS) -> Checkpoint:
    """
    RMSprop-Vortraining des T60-Netzes auf dem Trainings-Split.

    Args:
        manifest: Datensatz (mit NormStats)
        section: t60_net-Abschnitt der Konfiguration
        epochs / seed: überschreiben die Werte aus section
        cache_items: höchstens so viele Eingaben bleiben im Speicher

    Returns:
        Checkpoint mit Gewichten, NormStats, Optimizer-Zustand und Historie

    Raises:
        ConfigError: Datensatz passt nicht zu den Klassen / leerer Trainings-Split
    """
    epochs = section["epochs"] if epochs is None else int(epochs)
    seed = section["seed"] if seed is None else int(seed)
    dtype = np.float32 if precision == "float32" else np.float64
    train_rows = manifest.rows("train")
    val_rows = manifest.rows("val")
    if len(train_rows) < 2:
        raise ConfigError(f"T60 training needs at least 2 training examples, got {len(train_rows)}")
    classes = resolve_classes(section, manifest, train_rows + val_rows)
    stats = manifest.load_norm_stats()
    cfg = T60NetConfig.from_section(section, classes, stats.mean.shape[0], _frame_count(train_rows))
    net = T60Net(cfg, seed=seed, dtype=dtype)
    state = make_optimizer("rmsprop", section["lr"])
    params = net.parameters()
    alpha, beta, tau = section["alpha"], section["beta"], section["rank_temperature"]
    logger.info(f"T60-Training: {len(train_rows)} Beispiele, {cfg.n_classes} Klassen, "
                f"Eingabe {cfg.n_rows}x{cfg.n_frames}, {epochs} Epochen")

    cache = FeatureCache(manifest, stats, cfg, dtype, cache_items)
    t60_train = np.array([r.t60 for r in train_rows])
    idx_train = class_indices(train_rows, classes)
    t60_val = np.array([r.t60 for r in val_rows])
    idx_val = class_indices(val_rows, classes)
    if epochs > 0:
        cache.preload(train_rows + val_rows, workers)

    rng = np.random.default_rng(seed)
    history: List[dict] = []
    for epoch in tqdm(range(1, epochs + 1), desc="T60", disable=not progress or None, leave=False):
        batches = make_batches(len(train_rows), section["batch"], rng, min_size=2)
        losses, correct = [], 0.0

        def load(batch_idx):
            return batch_idx, cache.batch([train_rows[i] for i in batch_idx])

        for batch_idx, x in BatchPrefetcher(load, batches):
            for p in params.values():
                p.zero_grad()
            outputs = net(x, train=True)
            loss = loss_pretrain(outputs, t60_train[batch_idx], idx_train[batch_idx], alpha, beta, tau)
            ad.backward(loss)
            optimizer_step(state, params)
            losses.append(float(loss.data))
            correct += accuracy(outputs.class_logits, idx_train[batch_idx]) * len(batch_idx)

        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "train_acc": correct / len(train_rows)}
        if val_rows:
            pred_val = predict_rows(net, cache, val_rows)
            record.update({f"val_{k}": v for k, v in
                           evaluate_t60(net, pred_val, t60_val, idx_val, alpha, beta, tau).items()})
        history.append(record)
        logger.info(f"T60 Epoche {epoch}/{epochs}: Loss {record['train_loss']:.4f}, "
                    f"Genauigkeit {record['train_acc']:.3f}")

    return build_t60_checkpoint(net, state if epochs > 0 else None, stats, manifest.stft,
                                manifest.sample_rate, seed, history, section)


def write_history_csv(history: List[dict], path) -> Path:
    """Trainings-Historie als CSV (eine Zeile pro Epoche)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(history).to_csv(path, index=False)
    return path


def penultimate_table(net: T60Net, cache: FeatureCache, rows: Sequence[ManifestRecord]) -> pd.DataFrame:
    """Penultimate-Features + Schätzungen pro Beispiel (für externe Visualisierung)."""
    pred = predict_rows(net, cache, rows) if rows else None
    records = []
    for i, row in enumerate(rows):
        rec = {"id": row.id, "split": row.split, "room_id": row.room_id, "t60": row.t60,
               "t60_reg": float(pred["reg_value"][i]), "t60_creg": float(pred["creg_value"][i])}
        rec.update({f"f{j}": float(v) for j, v in enumerate(pred["penultimate"][i])})
        records.append(rec)
    return pd.DataFrame(records)
