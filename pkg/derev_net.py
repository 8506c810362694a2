"""
derev_net.py
LSTM-Schätzer des Spätanteils mit spektraler Subtraktion und das Joint-Netz.

- DerevNet: gestapelte LSTMs → FC → nichtnegative Schätzung des Spätanteils
  (Kubikwurzel-Betrag), Frame für Frame, ohne Zukunftskontext
- spectral_subtract / reconstruct_waveform: Subtraktion und Rücktransformation
  mit der halligen Phase
- Joint-Netz: T60-Merkmale (Penultimate, Regression oder One-Hot) als
  zusätzlicher Kontext der ersten LSTM-Schicht, null-initialisiert
- pretrain_derev (Adam), finetune_joint (Adam, γ-gewichteter Verlust), enhance
- Evaluation (Modell oder Orakel) und Export von Referenz/Ergebnis-Paaren
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

import autodiff as ad
from autodiff import Tensor
from background import DEFAULT_CACHE_ITEMS, BatchPrefetcher, OrderedWorkerPool, RowCache
from checkpoint import Checkpoint, load_checkpoint
from config import (
    ConfigError, InvalidArgumentError, MigrationError, ShapeError, save_json_atomic,
)
from dataset_synth import DatasetManifest, ManifestRecord
from layers import LayerSpec, build_layer
from logger_system import logger
from metrics import MetricReport, sdr
from optim import OptimizerState, make_optimizer, optimizer_step
from signal_core import (
    AudioSignal, ComplexSpectrogram, CompressedMagnitude, StftConfig, compress_magnitude, istft,
    read_wav, stft, write_wav,
)
from t60_net import (
    FeatureCache, T60Net, T60Outputs, classification_loss, class_indices, make_batches,
    norm_stats_from_checkpoint, signal_features,
)

OUTPUT_BIAS_INIT = 0.1
OUTPUT_WEIGHT_SCALE = 0.1
LINK_FEATURES = ("penultimate", "regression", "onehot")
T60_JOINT_PREFIXES = ("trunk.", "cls_fc.", "cls_out.")
T60_REG_PREFIXES = ("reg_conv.", "reg_fc.")
LATE_TARGETS = ("residual", "signal")
LOSS_CHUNK = 32  # Zeilen pro Block bei Verlusten über einen ganzen Split


# ============================================================
# 1. Konfiguration
# ============================================================

@dataclass
class DerevNetConfig:
    """
    Attributes:
        n_bins: F (Frequenz-Bins, Ein- und Ausgabe)
        lstm_layers / hidden / dropout: LSTM-Stapel
        context_dim: Länge des T60-Kontexts (0 = reines Dereverberations-Netz)
    """
    n_bins: int = 257
    lstm_layers: int = 3
    hidden: int = 512
    dropout: float = 0.5
    context_dim: int = 0

    def __post_init__(self):
        if self.n_bins <= 0 or self.lstm_layers <= 0 or self.hidden <= 0:
            raise ConfigError(f"invalid derev network dimensions: {asdict(self)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"derev dropout must be in [0, 1), got {self.dropout}")

    @property
    def input_dim(self) -> int:
        return self.n_bins + self.context_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DerevNetConfig":
        return cls(**data)

    @classmethod
    def from_section(cls, section: dict, n_bins: int) -> "DerevNetConfig":
        return cls(n_bins=n_bins, lstm_layers=section["lstm_layers"], hidden=section["hidden"],
                   dropout=section["dropout"])


@dataclass
class JointConfig:
    """Fine-Tuning-Parameter des Joint-Netzes (γ gewichtet T60- gegen Dereverberations-Verlust)."""
    gamma: float = 0.7
    alpha: float = 0.1
    t60_checkpoint: Optional[str] = None
    derev_checkpoint: Optional[str] = None
    epochs: int = 60
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    link_feature: str = "penultimate"
    freeze_t60: bool = False

    def __post_init__(self):
        for name in ("gamma", "alpha"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"{name} must be in [0, 1], got {value}")
        if self.link_feature not in LINK_FEATURES:
            raise ConfigError(f"link_feature must be one of {LINK_FEATURES}, got {self.link_feature!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_section(cls, section: dict) -> "JointConfig":
        return cls(**{k: section[k] for k in cls.__dataclass_fields__ if k in section})


# ============================================================
# 2. Netz
# ============================================================

class DerevNet:
    """LSTM-Stapel + Ausgangs-FC; Parameter "lstm.<i>.<name>" und "out.<name>"."""

    def __init__(self, cfg: DerevNetConfig, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.lstm = []
        for i in range(cfg.lstm_layers):
            size = cfg.n_bins if i == 0 else cfg.hidden
            self.lstm.append(build_layer(LayerSpec("lstm", {"input_size": size, "hidden": cfg.hidden}), rng, dtype))
        self.dropout = build_layer(LayerSpec("dropout", {"rate": cfg.dropout}))
        self.out = build_layer(
            LayerSpec("fully_connected", {"in_features": cfg.hidden, "out_features": cfg.n_bins}), rng, dtype)
        # kleine Gewichte + positiver Bias: die ReLU am Ausgang startet aktiv
        self.out.params["weight"].data *= OUTPUT_WEIGHT_SCALE
        self.out.params["bias"].data[...] = OUTPUT_BIAS_INIT
        if cfg.context_dim:
            self.lstm[0].extend_context(cfg.context_dim)

    def extend_context(self, dim: int):
        """Null-initialisierte Kontext-Spalten für die erste LSTM-Schicht."""
        if self.cfg.context_dim:
            raise MigrationError(f"derev network already has a context input of {self.cfg.context_dim} dims")
        self.lstm[0].extend_context(dim)
        self.cfg.context_dim = dim

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.lstm):
            out.update({f"lstm.{i}.{k}": v for k, v in layer.params.items()})
        out.update({f"out.{k}": v for k, v in self.out.params.items()})
        return out

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.parameters().items()}

    def load_state(self, arrays: Dict[str, np.ndarray]):
        """
        Raises:
            MigrationError: fehlender Tensor oder abweichende Form (mit beiden Formen)
        """
        for name, param in self.parameters().items():
            if name not in arrays:
                raise MigrationError(f"derev checkpoint lacks tensor {name!r} (expected shape {param.shape})")
            source = np.asarray(arrays[name])
            if source.shape != param.shape:
                raise MigrationError(
                    f"derev tensor {name!r}: checkpoint shape {source.shape} vs model shape {param.shape}")
            param.data[...] = source.astype(self.dtype)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, prefix: str = "derev/") -> "DerevNet":
        header = ckpt.header.get("derev_net")
        if header is None:
            raise MigrationError("checkpoint has no derev network description")
        dtype = np.float32 if ckpt.header.get("precision") == "float32" else np.float64
        net = cls(DerevNetConfig.from_dict(header), seed=0, dtype=dtype)
        net.load_state(ckpt.subset(prefix))
        return net

    def __call__(self, x, context=None, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = ad.as_tensor(x)
        last = len(self.lstm) - 1
        for i, layer in enumerate(self.lstm):
            h = layer(h, train=train, rng=rng, context=context if i == 0 else None)
            if i < last:
                h = self.dropout(h, train=train, rng=rng)
        n, t, hidden = h.shape
        y = self.out(h.reshape(n * t, hidden))
        return ad.relu(y.reshape(n, t, self.cfg.n_bins))


def as_frame_major(x: Union[CompressedMagnitude, np.ndarray]) -> np.ndarray:
    """CompressedMagnitude (F, T) → (1, T, F); Arrays (N, T, F) bleiben unverändert."""
    if isinstance(x, CompressedMagnitude):
        return x.values.T[None, :, :]
    x = np.asarray(x)
    return x[None] if x.ndim == 2 else x


def derev_forward(net: DerevNet, x, t60_feat=None, mode: str = "eval",
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Spätanteil-Schätzung (N, T, F), kausal über die Frames, ≥ 0.

    Raises:
        ShapeError: Bin-Zahl oder Kontext-Länge passt nicht zur Konfiguration
    """
    x = x if isinstance(x, Tensor) else Tensor(as_frame_major(x).astype(net.dtype, copy=False))
    if x.ndim != 3 or x.shape[2] != net.cfg.n_bins:
        raise ShapeError(f"derev input must be (N, T, {net.cfg.n_bins}), got {x.shape}")
    if t60_feat is not None:
        t60_feat = ad.as_tensor(t60_feat)
        if t60_feat.ndim == 1:
            t60_feat = t60_feat.reshape(1, -1)
        if t60_feat.shape[1] != net.cfg.context_dim:
            raise ShapeError(
                f"T60 feature has {t60_feat.shape[1]} dims, network context expects {net.cfg.context_dim}")
    return net(x, context=t60_feat, train=(mode == "train"), rng=rng)


def spectral_subtract(reverb: CompressedMagnitude, late_est: CompressedMagnitude) -> CompressedMagnitude:
    """max(reverb − late_est, 0) elementweise."""
    if reverb.shape != late_est.shape:
        raise ShapeError(f"spectral subtraction shape mismatch: {reverb.shape} vs {late_est.shape}")
    return CompressedMagnitude(np.maximum(reverb.values - late_est.values, 0.0))


def late_target(reverb: CompressedMagnitude, direct_early: Optional[CompressedMagnitude],
                late: Optional[CompressedMagnitude], mode: str = "residual") -> CompressedMagnitude:
    """
    Trainingsziel für den Spätanteil.

    "residual": max(reverb − direct_early, 0) im Kubikwurzel-Bereich; die Subtraktion
                liefert damit min(direct_early, reverb) zurück
    "signal":   Kubikwurzel-Betrag des Spätanteils selbst

    Raises:
        InvalidArgumentError: unbekannter Modus
    """
    if mode == "residual":
        return spectral_subtract(reverb, direct_early)
    if mode == "signal":
        return late
    raise InvalidArgumentError(f"Unknown late target {mode!r}, use one of {LATE_TARGETS}")


def reconstruct_waveform(de_mag: CompressedMagnitude, reverb_spec: ComplexSpectrogram,
                         length: Optional[int] = None) -> AudioSignal:
    """Betrag de_mag³ mit der halligen Phase, dann ISTFT."""
    if de_mag.shape != reverb_spec.bins.shape:
        raise ShapeError(f"magnitude {de_mag.shape} does not match spectrogram {reverb_spec.bins.shape}")
    bins = de_mag.values ** 3 * np.exp(1j * reverb_spec.phase())
    return istft(ComplexSpectrogram(bins, reverb_spec.config, reverb_spec.sample_rate), length)


# ============================================================
# 3. Verluste
# ============================================================

def mse_loss(pred: Tensor, target) -> Tensor:
    return ((pred - np.asarray(target, dtype=pred.dtype)) ** 2).mean()


def loss_joint(t60_out: T60Outputs, t60s, class_idx, late_est: Tensor, late_target,
               gamma: float, alpha: float) -> Tensor:
    """
    γ·[α·CE + (1−α)·MSE_creg] + (1−γ)·MSE(Spätanteil)

    Raises:
        InvalidArgumentError: γ oder α außerhalb [0, 1]
    """
    if not 0.0 <= gamma <= 1.0:
        raise InvalidArgumentError(f"gamma must be in [0, 1], got {gamma}")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgumentError(f"alpha must be in [0, 1], got {alpha}")
    late_est = ad.as_tensor(late_est)
    if late_est.shape != np.shape(late_target):
        raise ShapeError(f"late estimate {late_est.shape} vs target {np.shape(late_target)}")
    return (classification_loss(t60_out, t60s, class_idx, alpha) * gamma
            + mse_loss(late_est, late_target) * (1.0 - gamma))


# ============================================================
# 4. Daten
# ============================================================

class SpectralCache:
    """
    Kubikwurzel-Beträge (T, F) von Hall-Signal und Zielgröße pro Manifest-Zeile.
    Im Speicher bleiben höchstens max_items Zeilen (LRU).
    """

    def __init__(self, manifest: DatasetManifest, dtype=np.float64, target: str = "residual",
                 max_items: int = DEFAULT_CACHE_ITEMS):
        if target not in LATE_TARGETS:
            raise InvalidArgumentError(f"Unknown late target {target!r}, use one of {LATE_TARGETS}")
        self.manifest = manifest
        self.dtype = dtype
        self.target = target
        self._cache = RowCache(self._compute, max_items)

    def _spectrum(self, row: ManifestRecord, key: str) -> CompressedMagnitude:
        wav = read_wav(self.manifest.resolve(row.paths[key]), self.manifest.sample_rate)
        return compress_magnitude(stft(wav, self.manifest.stft))

    def _compute(self, row: ManifestRecord) -> Tuple[np.ndarray, np.ndarray]:
        reverb = self._spectrum(row, "reverb")
        direct_early = self._spectrum(row, "direct_early") if self.target == "residual" else None
        late = self._spectrum(row, "late") if self.target == "signal" else None
        y = late_target(reverb, direct_early, late, self.target)
        return reverb.values.T.astype(self.dtype), y.values.T.astype(self.dtype)

    def load(self, row: ManifestRecord) -> Tuple[np.ndarray, np.ndarray]:
        return self._cache.get(row.id, row)

    def __len__(self) -> int:
        return len(self._cache)

    def batch(self, rows: Sequence[ManifestRecord]) -> Tuple[np.ndarray, np.ndarray]:
        pairs = [self.load(r) for r in rows]
        frames = {p[0].shape[0] for p in pairs}
        if len(frames) != 1:
            raise ShapeError(f"batch mixes sequence lengths {sorted(frames)}")
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def preload(self, rows: Sequence[ManifestRecord], workers: int = 1):
        """Parallel vorladen, höchstens so viele Zeilen wie der Cache fasst."""
        todo = [r for r in rows if r.id not in self._cache][:self._cache.max_items]
        _, errors = OrderedWorkerPool(workers, progress=False).map(self.load, todo, desc="Spektren")
        if errors:
            index, message = errors[0]
            raise InvalidArgumentError(f"could not load spectra for {todo[index].id}: {message}")


def _precision(precision: str):
    return np.float32 if precision == "float32" else np.float64


def _precision_name(dtype) -> str:
    return "float32" if np.dtype(dtype) == np.float32 else "float64"


# ============================================================
# 5. Vortraining
# ============================================================

def build_derev_checkpoint(net: DerevNet, state: Optional[OptimizerState], stft_cfg: StftConfig, fs: int,
                           seed: int, history: List[dict], initial_loss: Optional[float],
                           target: str = "residual") -> Checkpoint:
    tensors = {f"derev/{k}": v for k, v in net.state_arrays().items()}
    if state is not None:
        tensors.update(state.slot_arrays())
    header = {
        "kind": "derev",
        "derev_net": net.cfg.to_dict(),
        "late_target": target,
        "stft": stft_cfg.to_dict(),
        "fs": int(fs),
        "seed": int(seed),
        "precision": _precision_name(net.dtype),
        "optimizer": None if state is None else state.hyperparameters(),
        "initial_loss": initial_loss,
        "history": history,
    }
    return Checkpoint(header, tensors)


def split_loss(net: DerevNet, cache: SpectralCache, rows: Sequence[ManifestRecord],
               chunk: int = LOSS_CHUNK) -> float:
    """Eval-Modus-MSE über alle Zeilen, blockweise aus dem Cache geladen."""
    total = 0.0
    for i in range(0, len(rows), chunk):
        x, y = cache.batch(rows[i:i + chunk])
        total += float(mse_loss(derev_forward(net, x), y).data) * len(x)
    return total / len(rows)


def pretrain_derev(manifest: DatasetManifest, section: dict, epochs: Optional[int] = None,
                   seed: Optional[int] = None, workers: int = 1, precision: str = "float64",
                   progress: bool = True, cache_items: int = DEFAULT_CACHE_ITEMS) -> Checkpoint:
    """
    Adam-Training des Dereverberations-Netzes: MSE zwischen geschätztem und
    echtem Spätanteil (Kubikwurzel-Betrag, Zielgröße nach section["late_target"]).

    Raises:
        ConfigError: kein Trainings-Split
    """
    epochs = section["epochs"] if epochs is None else int(epochs)
    seed = section["seed"] if seed is None else int(seed)
    dtype = _precision(precision)
    train_rows = manifest.rows("train")
    val_rows = manifest.rows("val")
    if not train_rows:
        raise ConfigError("derev training needs a non-empty training split")
    cfg = DerevNetConfig.from_section(section, manifest.stft.n_bins)
    net = DerevNet(cfg, seed=seed, dtype=dtype)
    state = make_optimizer("adam", section["lr"])
    params = net.parameters()
    logger.info(f"Dereverberations-Training: {len(train_rows)} Beispiele, {cfg.lstm_layers}x{cfg.hidden} LSTM, "
                f"{epochs} Epochen")

    target = section.get("late_target", "residual")
    cache = SpectralCache(manifest, dtype, target, cache_items)
    initial_loss = None
    history: List[dict] = []
    if epochs > 0:
        cache.preload(train_rows + val_rows, workers)
        initial_loss = split_loss(net, cache, train_rows)

    rng = np.random.default_rng(seed)
    dropout_rng = np.random.default_rng([seed, 1])
    for epoch in tqdm(range(1, epochs + 1), desc="Derev", disable=not progress or None, leave=False):
        losses = []
        batches = make_batches(len(train_rows), section["batch"], rng)
        for x, y in BatchPrefetcher(lambda b: cache.batch([train_rows[i] for i in b]), batches):
            for p in params.values():
                p.zero_grad()
            loss = mse_loss(derev_forward(net, x, mode="train", rng=dropout_rng), y)
            ad.backward(loss)
            optimizer_step(state, params)
            losses.append(float(loss.data) * len(x))
        record = {"epoch": epoch, "train_loss": float(np.sum(losses) / len(train_rows))}
        if val_rows:
            record["val_loss"] = split_loss(net, cache, val_rows)
        history.append(record)
        logger.info(f"Derev Epoche {epoch}/{epochs}: Loss {record['train_loss']:.5f}")

    return build_derev_checkpoint(net, state if epochs > 0 else None, manifest.stft, manifest.sample_rate,
                                  seed, history, initial_loss, target)


# ============================================================
# 6. Joint-Netz
# ============================================================

class JointNet:
    """T60-Netz + Dereverberations-Netz mit T60-Kontext in der ersten LSTM-Schicht."""

    def __init__(self, t60: T60Net, derev: DerevNet, link_feature: str = "penultimate"):
        if link_feature not in LINK_FEATURES:
            raise ConfigError(f"link_feature must be one of {LINK_FEATURES}, got {link_feature!r}")
        self.t60 = t60
        self.derev = derev
        self.link_feature = link_feature

    @property
    def link_dim(self) -> int:
        return link_dim(self.t60, self.link_feature)

    def link(self, outputs: T60Outputs) -> Tensor:
        if self.link_feature == "penultimate":
            return outputs.penultimate
        if self.link_feature == "regression":
            return outputs.reg_value.reshape(-1, 1)
        probs = outputs.class_probs.data
        return Tensor(np.eye(probs.shape[1], dtype=probs.dtype)[np.argmax(probs, axis=1)])

    def parameters(self, include_t60: bool = True) -> Dict[str, Tensor]:
        """
        Trainierbare Parameter. Der Regressionszweig des T60-Netzes erhält nur
        mit Link "regression" einen Gradienten und ist sonst nicht enthalten.
        """
        out = {f"derev/{k}": v for k, v in self.derev.parameters().items()}
        if include_t60:
            prefixes = T60_JOINT_PREFIXES + (T60_REG_PREFIXES if self.link_feature == "regression" else ())
            out.update({f"t60/{k}": v for k, v in self.t60.parameters().items() if k.startswith(prefixes)})
        return out

    def all_parameters(self) -> Dict[str, Tensor]:
        out = {f"derev/{k}": v for k, v in self.derev.parameters().items()}
        out.update({f"t60/{k}": v for k, v in self.t60.parameters().items()})
        return out

    def __call__(self, t60_x, derev_x, train: bool = False, train_t60: Optional[bool] = None,
                 rng: Optional[np.random.Generator] = None) -> Tuple[T60Outputs, Tensor]:
        t60_mode = train if train_t60 is None else train_t60
        outputs = self.t60(t60_x, train=t60_mode)
        late = derev_forward(self.derev, derev_x, self.link(outputs), mode="train" if train else "eval", rng=rng)
        return outputs, late

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "JointNet":
        return cls(T60Net.from_checkpoint(ckpt), DerevNet.from_checkpoint(ckpt),
                   ckpt.header.get("joint", {}).get("link_feature", "penultimate"))


def link_dim(t60: T60Net, link_feature: str) -> int:
    if link_feature == "penultimate":
        return t60.cfg.penultimate_dim
    if link_feature == "regression":
        return 1
    return t60.cfg.n_classes


def check_compatibility(t60_ckpt: Checkpoint, derev_ckpt: Checkpoint, manifest: DatasetManifest):
    """
    Prüft, ob beide vortrainierten Netze zueinander und zum Datensatz passen.

    Raises:
        MigrationError: mit expliziter Angabe der abweichenden Dimensionen
    """
    problems = []
    t60_cfg = t60_ckpt.header.get("t60_net", {})
    derev_cfg = derev_ckpt.header.get("derev_net", {})
    n_bins = manifest.stft.n_bins
    if t60_ckpt.kind != "t60":
        problems.append(f"T60 checkpoint kind is {t60_ckpt.kind!r}, expected 't60'")
    if derev_ckpt.kind != "derev":
        problems.append(f"derev checkpoint kind is {derev_ckpt.kind!r}, expected 'derev'")
    if derev_cfg.get("n_bins") != n_bins:
        problems.append(f"derev n_bins {derev_cfg.get('n_bins')} vs dataset bins {n_bins}")
    if t60_cfg.get("n_rows") != 3 * n_bins:
        problems.append(f"T60 input rows {t60_cfg.get('n_rows')} vs 3*dataset bins {3 * n_bins}")
    if derev_cfg.get("context_dim", 0):
        problems.append(f"derev checkpoint already has a context input of {derev_cfg['context_dim']} dims")
    for name, ckpt in (("T60", t60_ckpt), ("derev", derev_ckpt)):
        if ckpt.header.get("stft") != manifest.stft.to_dict():
            problems.append(f"{name} STFT {ckpt.header.get('stft')} vs dataset STFT {manifest.stft.to_dict()}")
        if ckpt.header.get("fs") != manifest.sample_rate:
            problems.append(f"{name} sample rate {ckpt.header.get('fs')} vs dataset {manifest.sample_rate}")
    if problems:
        raise MigrationError("incompatible checkpoints: " + "; ".join(problems))


def build_joint_checkpoint(net: JointNet, jcfg: JointConfig, state: Optional[OptimizerState], t60_ckpt: Checkpoint,
                           history: List[dict], initial_loss: Optional[float],
                           target: str = "residual") -> Checkpoint:
    tensors = {f"t60/{k}": v for k, v in net.t60.state_arrays().items()}
    tensors.update({f"derev/{k}": v for k, v in net.derev.state_arrays().items()})
    tensors["norm/mean"] = t60_ckpt.tensors["norm/mean"]
    tensors["norm/std"] = t60_ckpt.tensors["norm/std"]
    if state is not None:
        tensors.update(state.slot_arrays())
    header = {
        "kind": "joint",
        "late_target": target,
        "t60_net": net.t60.cfg.to_dict(),
        "derev_net": net.derev.cfg.to_dict(),
        "joint": jcfg.to_dict(),
        "stft": t60_ckpt.header["stft"],
        "fs": t60_ckpt.header["fs"],
        "seed": jcfg.seed,
        "precision": _precision_name(net.derev.dtype),
        "optimizer": None if state is None else state.hyperparameters(),
        "initial_loss": initial_loss,
        "history": history,
    }
    return Checkpoint(header, tensors)


def prepare_joint(t60_ckpt: Checkpoint, derev_ckpt: Checkpoint, manifest: DatasetManifest,
                  link_feature: str = "penultimate") -> JointNet:
    """Lädt beide Netze und erweitert die erste LSTM-Schicht um null-initialisierte Kontext-Spalten."""
    check_compatibility(t60_ckpt, derev_ckpt, manifest)
    net = JointNet(T60Net.from_checkpoint(t60_ckpt), DerevNet.from_checkpoint(derev_ckpt), link_feature)
    if net.t60.dtype != net.derev.dtype:
        raise MigrationError(f"T60 precision {net.t60.dtype} vs derev precision {net.derev.dtype}")
    net.derev.extend_context(net.link_dim)
    return net


def finetune_joint(jcfg: JointConfig, manifest: DatasetManifest, seed: Optional[int] = None,
                   t60_ckpt: Optional[Checkpoint] = None, derev_ckpt: Optional[Checkpoint] = None,
                   workers: int = 1, progress: bool = True,
                   cache_items: int = DEFAULT_CACHE_ITEMS) -> Checkpoint:
    """
    Gemeinsames Fine-Tuning beider Netze mit dem γ-gewichteten Verlust (Adam).

    Raises:
        MigrationError: Checkpoints passen nicht zusammen
        ConfigError: Datensatz-T60 liegt nicht auf den Klassen des T60-Netzes
    """
    seed = jcfg.seed if seed is None else int(seed)
    if t60_ckpt is None:
        if not jcfg.t60_checkpoint:
            raise ConfigError("joint.t60_checkpoint is not set")
        t60_ckpt = load_checkpoint(jcfg.t60_checkpoint)
    if derev_ckpt is None:
        if not jcfg.derev_checkpoint:
            raise ConfigError("joint.derev_checkpoint is not set")
        derev_ckpt = load_checkpoint(jcfg.derev_checkpoint)
    net = prepare_joint(t60_ckpt, derev_ckpt, manifest, jcfg.link_feature)

    train_rows = manifest.rows("train")
    if len(train_rows) < 2:
        raise ConfigError(f"joint fine-tuning needs at least 2 training examples, got {len(train_rows)}")
    classes = net.t60.cfg.class_times
    off = sorted({r.t60 for r in train_rows if not any(abs(r.t60 - c) < 1e-9 for c in classes)})
    if off:
        raise ConfigError(f"dataset T60 values {off} are not among the T60 network classes {classes}")

    dtype = net.derev.dtype
    stats = norm_stats_from_checkpoint(t60_ckpt)
    target = derev_ckpt.header.get("late_target", "signal")
    features = FeatureCache(manifest, stats, net.t60.cfg, dtype, cache_items)
    spectra = SpectralCache(manifest, dtype, target, cache_items)
    t60s = np.array([r.t60 for r in train_rows])
    idx = class_indices(train_rows, classes)
    params = net.parameters(include_t60=not jcfg.freeze_t60)
    state = make_optimizer("adam", jcfg.lr)
    train_t60 = not jcfg.freeze_t60
    logger.info(f"Joint-Fine-Tuning: γ={jcfg.gamma}, α={jcfg.alpha}, Link {jcfg.link_feature} "
                f"({net.link_dim} dims), T60 {'eingefroren' if jcfg.freeze_t60 else 'trainierbar'}")

    def load(batch_idx):
        rows = [train_rows[i] for i in batch_idx]
        x, y = spectra.batch(rows)
        return batch_idx, features.batch(rows), x, y

    initial_loss = None
    if jcfg.epochs > 0:
        features.preload(train_rows, workers)
        spectra.preload(train_rows, workers)
        total = 0.0
        for start in range(0, len(train_rows), LOSS_CHUNK):
            batch_idx, fx, x, y = load(np.arange(start, min(start + LOSS_CHUNK, len(train_rows))))
            out, late = net(fx, x, train=False)
            loss = loss_joint(out, t60s[batch_idx], idx[batch_idx], late, y, jcfg.gamma, jcfg.alpha)
            total += float(loss.data) * len(batch_idx)
        initial_loss = total / len(train_rows)

    rng = np.random.default_rng(seed)
    dropout_rng = np.random.default_rng([seed, 1])
    history: List[dict] = []
    for epoch in tqdm(range(1, jcfg.epochs + 1), desc="Joint", disable=not progress or None, leave=False):
        losses = []
        for batch_idx, fx, x, y in BatchPrefetcher(load, make_batches(len(train_rows), jcfg.batch, rng, min_size=2)):
            for p in net.all_parameters().values():
                p.zero_grad()
            out, late = net(fx, x, train=True, train_t60=train_t60, rng=dropout_rng)
            loss = loss_joint(out, t60s[batch_idx], idx[batch_idx], late, y, jcfg.gamma, jcfg.alpha)
            ad.backward(loss)
            optimizer_step(state, params)
            losses.append(float(loss.data) * len(batch_idx))
        history.append({"epoch": epoch, "train_loss": float(np.sum(losses) / len(train_rows))})
        logger.info(f"Joint Epoche {epoch}/{jcfg.epochs}: Loss {history[-1]['train_loss']:.5f}")

    return build_joint_checkpoint(net, jcfg, state if jcfg.epochs > 0 else None, t60_ckpt, history, initial_loss,
                                  target)


# ============================================================
# 7. Inferenz
# ============================================================

class Enhancer:
    """
    Inferenz-Pfad für Checkpoints der Art "joint" (mit T60-Kontext),
    "derev" (nur Dereverberation) und "t60" (nur T60-Schätzung).
    """

    def __init__(self, ckpt: Checkpoint):
        self.kind = ckpt.kind
        if self.kind not in ("joint", "derev", "t60"):
            raise InvalidArgumentError(f"cannot run inference with a {self.kind!r} checkpoint")
        self.fs = int(ckpt.header["fs"])
        self.stft_cfg = StftConfig.from_dict(ckpt.header["stft"])
        self.t60 = T60Net.from_checkpoint(ckpt) if self.kind in ("joint", "t60") else None
        self.derev = DerevNet.from_checkpoint(ckpt) if self.kind in ("joint", "derev") else None
        self.stats = norm_stats_from_checkpoint(ckpt) if self.t60 is not None else None
        self.joint = None
        if self.kind == "joint":
            self.joint = JointNet(self.t60, self.derev, ckpt.header["joint"]["link_feature"])

    def _check(self, x: AudioSignal):
        if x.sample_rate != self.fs:
            raise InvalidArgumentError(f"input sample rate {x.sample_rate} Hz, checkpoint expects {self.fs} Hz")
        if len(x) < self.stft_cfg.window_len:
            raise InvalidArgumentError(
                f"input of {len(x)} samples is shorter than one STFT window ({self.stft_cfg.window_len})")

    def estimate_t60(self, x: AudioSignal) -> Tuple[Optional[T60Outputs], dict]:
        if self.t60 is None:
            return None, {}
        outputs = self.t60(signal_features(x, self.stft_cfg, self.stats, self.t60.cfg, self.t60.dtype))
        meta = {
            "t60_reg": float(outputs.reg_value.data[0]),
            "t60_creg": float(outputs.creg_value.data[0]),
            "classes": list(self.t60.cfg.class_times),
            "class_probs": [float(p) for p in outputs.class_probs.data[0]],
        }
        return outputs, meta

    def late_estimate(self, reverb: CompressedMagnitude, outputs: Optional[T60Outputs]) -> CompressedMagnitude:
        context = self.joint.link(outputs) if self.joint is not None else None
        late = derev_forward(self.derev, reverb, context)
        return CompressedMagnitude(late.data[0].T.astype(np.float64))

    def __call__(self, x: AudioSignal, length: Optional[int] = None) -> Tuple[Optional[AudioSignal], dict]:
        self._check(x)
        outputs, meta = self.estimate_t60(x)
        if self.derev is None:
            return None, meta
        S = stft(x, self.stft_cfg)
        reverb = compress_magnitude(S)
        de_mag = spectral_subtract(reverb, self.late_estimate(reverb, outputs))
        return reconstruct_waveform(de_mag, S, length), meta


def enhance(x: AudioSignal, ckpt: Checkpoint) -> Tuple[AudioSignal, dict]:
    """
    STFT → T60-Merkmale → Spätanteil → Subtraktion → ISTFT.

    Returns:
        (Signal der Länge istft(T_frames), Metadaten mit T60-Schätzungen)

    Raises:
        InvalidArgumentError: falsche Abtastrate oder Signal kürzer als ein Fenster
    """
    out, meta = Enhancer(ckpt)(x)
    if out is None:
        raise InvalidArgumentError("enhance needs a joint or derev checkpoint")
    return out, meta


def enhance_file(in_path, out_path, ckpt: Checkpoint, fmt: str = "float32") -> dict:
    """WAV → WAV, Metadaten als JSON daneben (<out>.json)."""
    enhancer = Enhancer(ckpt)
    x = read_wav(in_path, enhancer.fs)
    out, meta = enhancer(x)
    if out is None:
        raise InvalidArgumentError("enhance needs a joint or derev checkpoint")
    write_wav(out_path, out, fmt)
    meta = dict(meta, input=str(in_path), output=str(out_path), checkpoint_kind=enhancer.kind)
    save_json_atomic(Path(out_path).with_suffix(".json"), meta, backup=False)
    return meta


# ============================================================
# 8. Evaluation
# ============================================================

class EvaluationRunner:
    """
    Verarbeitet Manifest-Zeilen mit einem Checkpoint oder im Orakel-Modus
    (exakte Zielgröße des Spätanteils statt Netz-Schätzung).
    """

    def __init__(self, manifest: DatasetManifest, ckpt: Optional[Checkpoint] = None, oracle: bool = False,
                 target: str = "residual"):
        if ckpt is None and not oracle:
            raise InvalidArgumentError("evaluation needs a checkpoint unless oracle mode is used")
        if target not in LATE_TARGETS:
            raise InvalidArgumentError(f"Unknown late target {target!r}, use one of {LATE_TARGETS}")
        self.manifest = manifest
        self.oracle = oracle
        self.target = target
        self.enhancer = Enhancer(ckpt) if ckpt is not None else None
        if self.enhancer is not None and self.enhancer.fs != manifest.sample_rate:
            raise MigrationError(f"checkpoint sample rate {self.enhancer.fs} vs dataset {manifest.sample_rate}")

    def process(self, row: ManifestRecord):
        """Returns: (record, direct_early, enhanced oder None)"""
        ex = self.manifest.load_example(row)
        record = {"id": row.id, "t60_true": row.t60, "t60_reg": None, "t60_creg": None,
                  "sdr_unprocessed": sdr(ex.direct_early, ex.reverberant), "sdr_enhanced": None}
        enhanced = None
        if self.oracle:
            S = stft(ex.reverberant, self.manifest.stft)
            reverb = compress_magnitude(S)
            target = late_target(reverb, compress_magnitude(stft(ex.direct_early, self.manifest.stft)),
                                 compress_magnitude(stft(ex.late, self.manifest.stft)), self.target)
            de_mag = spectral_subtract(reverb, target)
            enhanced = reconstruct_waveform(de_mag, S, len(ex.reverberant))
        if self.enhancer is not None:
            model_out, meta = self.enhancer(ex.reverberant, len(ex.reverberant))
            record["t60_reg"] = meta.get("t60_reg")
            record["t60_creg"] = meta.get("t60_creg")
            if not self.oracle:
                enhanced = model_out
        if enhanced is not None:
            record["sdr_enhanced"] = sdr(ex.direct_early, enhanced)
        return record, ex.direct_early, enhanced

    def record(self, row: ManifestRecord) -> dict:
        return self.process(row)[0]


def evaluate(manifest: DatasetManifest, split: str = "test", ckpt: Optional[Checkpoint] = None,
             oracle: bool = False, workers: int = 1, t60s: Optional[Sequence[float]] = None,
             progress: bool = True, target: str = "residual") -> MetricReport:
    """
    Evaluation eines Splits; Fehler einzelner Beispiele landen in meta["errors"].

    Raises:
        InvalidArgumentError: leerer Split oder kein einziges Beispiel auswertbar
    """
    rows = manifest.rows(split, t60s)
    if not rows:
        raise InvalidArgumentError(f"split {split!r} has no examples")
    runner = EvaluationRunner(manifest, ckpt, oracle, target)
    results, errors = OrderedWorkerPool(workers, progress).map(runner.record, rows, desc="Evaluation")
    records = [r for r in results if r is not None]
    if not records:
        raise InvalidArgumentError(f"evaluation failed for all {len(rows)} examples")
    meta = {
        "mode": "oracle" if oracle else (ckpt.kind if ckpt is not None else "none"),
        "split": split,
        "n_examples": len(rows),
        "late_target": target if oracle else None,
        "errors": [{"item": rows[i].id, "error": msg} for i, msg in errors],
    }
    return MetricReport.from_records(records, meta)


def export_eval_pairs(manifest: DatasetManifest, out_dir, split: str = "test", ckpt: Optional[Checkpoint] = None,
                      oracle: bool = False, workers: int = 1, progress: bool = True,
                      target: str = "residual") -> List[dict]:
    """
    Schreibt pro Beispiel <id>_reference.wav (Direkt+Früh) und <id>_enhanced.wav
    gleicher Länge, damit externe Maße angewendet werden können.
    """
    out_dir = Path(out_dir)
    rows = manifest.rows(split)
    runner = EvaluationRunner(manifest, ckpt, oracle, target)

    def export(row):
        _, reference, enhanced = runner.process(row)
        if enhanced is None:
            raise InvalidArgumentError("checkpoint produces no enhanced signal")
        ref_path = out_dir / f"{row.id}_reference.wav"
        enh_path = out_dir / f"{row.id}_enhanced.wav"
        write_wav(ref_path, reference)
        write_wav(enh_path, enhanced.fit_length(len(reference)))
        return {"id": row.id, "reference": ref_path.name, "enhanced": enh_path.name}

    results, errors = OrderedWorkerPool(workers, progress).map(export, rows, desc="Export")
    for index, message in errors:
        logger.error(f"Export {rows[index].id} fehlgeschlagen: {message}")
    pairs = [r for r in results if r is not None]
    save_json_atomic(out_dir / "pairs.json", {"split": split, "pairs": pairs,
                                              "errors": [{"item": rows[i].id, "error": m} for i, m in errors]},
                     backup=False)
    return pairs
