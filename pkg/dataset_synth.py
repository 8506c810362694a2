"""
dataset_synth.py
Synthetische Trainingskorpora nach x = x_de + x_l:
- TrainingExample / ManifestRecord / DatasetManifest
- synthesize_example (Faltung mit Direkt+Früh, Spät und voller RIR)
- synth_speechlike (sprachähnliches Ersatzsignal für TIMIT)
- build_dataset (RIRs simulieren, Beispiele schreiben, NormStats fitten)
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
from scipy import signal as sps

from background import OrderedWorkerPool
from config import DerevKitError, InvalidArgumentError, save_json_atomic
from logger_system import logger
from room_acoustics import (
    RirParts, RoomSpec, decompose_rir, load_rir, measure_t60_schroeder, rir_length, save_rir, simulate_rir,
)
from signal_core import (
    AudioSignal, NormStats, StftConfig, convolve, extract_t60_features, fit_normalization,
    read_wav, stft, write_wav,
)

# ============================================================
# Konstanten
# ============================================================
MANIFEST_VERSION = 1
MANIFEST_FILE = "manifest.jsonl"
HEADER_FILE = "dataset.json"
NORM_STATS_FILE = "norm_stats.npz"
SPLITS = ("train", "val", "test")

SYLLABLE_RATE_HZ = 4.0
LEADING_GAP_S = (0.15, 0.3)
WORD_GAP_S = (0.12, 0.35)
SPEECH_BAND_HZ = (120.0, 3400.0)
PEAK_LEVEL = 0.5


# ============================================================
# 1. Datentypen
# ============================================================

@dataclass
class TrainingExample:
    """Ein Beispiel: hallig, Direkt+Früh (Ziel), Spätanteil, T60-Label."""
    reverberant: AudioSignal
    direct_early: AudioSignal
    late: AudioSignal
    t60_label: float
    t60_class: int
    room_id: str = ""
    rir_id: str = ""
    example_id: str = ""
    warnings: List[str] = field(default_factory=list)


@dataclass
class ManifestRecord:
    """Eine Zeile im manifest.jsonl (Pfade relativ zum Datensatz-Ordner)."""
    id: str
    split: str
    room_id: str
    rir_id: str
    t60: float
    t60_class: int
    paths: Dict[str, str]
    frames: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ManifestRecord":
        return cls(
            id=data["id"], split=data["split"], room_id=data["room_id"], rir_id=data["rir_id"],
            t60=float(data["t60"]), t60_class=int(data["t60_class"]),
            paths=dict(data["paths"]), frames=int(data["frames"]),
        )


@dataclass
class DatasetManifest:
    """
    Buchführung eines Datensatzes: Header (dataset.json) + Zeilen (manifest.jsonl).

    Attributes:
        examples: Liste von ManifestRecord
        stft: StftConfig
        t60_grid: vollständiges T60-Raster (Sekunden)
        seed: Seed des Builds
        norm_stats_path: relativer Pfad der NormStats (.npz) oder None
        root: Ordner, relativ zu dem alle Pfade aufgelöst werden
        info: restliche Header-Felder (task, classes, rooms, errors, warnings, fs)
    """
    examples: List[ManifestRecord]
    stft: StftConfig
    t60_grid: List[float]
    seed: int
    norm_stats_path: Optional[str] = None
    root: Optional[Path] = None
    info: dict = field(default_factory=dict)

    # --- Abfragen ---
    def rows(self, split: Optional[str] = None, t60s: Optional[Sequence[float]] = None) -> List[ManifestRecord]:
        """Zeilen eines Splits, optional auf T60-Werte eingeschränkt."""
        out = []
        for row in self.examples:
            if split is not None and row.split != split:
                continue
            if t60s is not None and not any(abs(row.t60 - t) < 1e-9 for t in t60s):
                continue
            out.append(row)
        return out

    @property
    def sample_rate(self) -> int:
        return int(self.info.get("fs", 8000))

    @property
    def classes(self) -> List[float]:
        return list(self.info.get("classes", self.t60_grid))

    def resolve(self, rel_path: str) -> Path:
        return (self.root or Path(".")) / rel_path

    def load_example(self, row: ManifestRecord) -> TrainingExample:
        """Liest die drei WAVs einer Zeile."""
        fs = self.sample_rate
        return TrainingExample(
            reverberant=read_wav(self.resolve(row.paths["reverb"]), fs),
            direct_early=read_wav(self.resolve(row.paths["direct_early"]), fs),
            late=read_wav(self.resolve(row.paths["late"]), fs),
            t60_label=row.t60, t60_class=row.t60_class,
            room_id=row.room_id, rir_id=row.rir_id, example_id=row.id,
        )

    def load_norm_stats(self) -> NormStats:
        if not self.norm_stats_path:
            raise InvalidArgumentError("Dataset has no normalization statistics")
        return NormStats.load(self.resolve(self.norm_stats_path))

    # --- Persistenz ---
    def header(self) -> dict:
        data = dict(self.info)
        data.update({
            "version": MANIFEST_VERSION,
            "stft": self.stft.to_dict(),
            "t60_grid": list(self.t60_grid),
            "seed": self.seed,
            "norm_stats_path": self.norm_stats_path,
            "manifest": MANIFEST_FILE,
            "n_examples": len(self.examples),
        })
        return data

    def write(self, root=None):
        """Schreibt dataset.json + manifest.jsonl (sortierte Schlüssel, eine Zeile pro Beispiel)."""
        root = Path(root) if root is not None else self.root
        if root is None:
            raise InvalidArgumentError("No dataset directory given for writing the manifest")
        root.mkdir(parents=True, exist_ok=True)
        self.root = root
        save_json_atomic(root / HEADER_FILE, self.header(), backup=False)
        with open(root / MANIFEST_FILE, "w", encoding="utf-8", newline="\n") as f:
            for row in self.examples:
                f.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def read(cls, root, validate: bool = True) -> "DatasetManifest":
        """
        Liest einen Datensatz-Ordner (oder den Pfad zu dataset.json).

        Raises:
            InvalidArgumentError: Header fehlt, ungültiger Split, referenzierte Datei fehlt
        """
        root = Path(root)
        if root.is_file():
            root = root.parent
        header_path = root / HEADER_FILE
        if not header_path.exists():
            raise InvalidArgumentError(f"No dataset header found at {header_path}")
        with open(header_path, "r", encoding="utf-8") as f:
            header = json.load(f)
        examples = []
        with open(root / header.get("manifest", MANIFEST_FILE), "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    examples.append(ManifestRecord.from_dict(json.loads(line)))

        info = {k: v for k, v in header.items()
                if k not in ("version", "stft", "t60_grid", "seed", "norm_stats_path", "manifest", "n_examples")}
        manifest = cls(
            examples=examples,
            stft=StftConfig.from_dict(header["stft"]),
            t60_grid=[float(t) for t in header["t60_grid"]],
            seed=int(header["seed"]),
            norm_stats_path=header.get("norm_stats_path"),
            root=root,
            info=info,
        )
        if validate:
            manifest.validate()
        return manifest

    def validate(self):
        for row in self.examples:
            if row.split not in SPLITS:
                raise InvalidArgumentError(f"Manifest row {row.id}: invalid split {row.split!r}")
            for kind, rel in row.paths.items():
                if not self.resolve(rel).exists():
                    raise InvalidArgumentError(f"Manifest row {row.id}: missing {kind} file {rel}")
        if self.norm_stats_path and not self.resolve(self.norm_stats_path).exists():
            raise InvalidArgumentError(f"Normalization statistics missing: {self.norm_stats_path}")


# ============================================================
# 2. Hilfsfunktionen
# ============================================================

def class_index(t60: float, grid: Sequence[float]) -> int:
    """Index im T60-Raster; für das 0.3..1.5 Raster gleich round((t60 - 0.3)/0.1)."""
    for i, t in enumerate(grid):
        if abs(t - t60) < 1e-9:
            return i
    raise InvalidArgumentError(f"T60 {t60} is not on the grid {list(grid)}")


def t60_tag(t60: float) -> str:
    return f"t{int(round(t60 * 1000)):04d}"


# ============================================================
# 3. Beispiel-Synthese
# ============================================================

def synthesize_example(clean: AudioSignal, parts: RirParts, target_len: Optional[float] = None,
                       t60_label: float = 0.0, t60_class: int = 0, **ids) -> TrainingExample:
    """
    Faltet ein sauberes Signal mit den RIR-Teilen.

    direct_early = clean * (h_d + h_e), late = clean * h_l, reverberant = clean * h.
    Alle drei werden auf die Länge des (ggf. auf target_len gekürzten) Signals geschnitten.

    Args:
        clean: sauberes Signal
        parts: RirParts aus decompose_rir
        target_len: Ziel-Länge in Sekunden (Kürzen/Auffüllen) oder None

    Returns:
        TrainingExample; ein stilles Signal erzeugt eine Warnung statt eines Fehlers
    """
    if target_len is not None:
        clean = clean.fit_length(int(round(target_len * clean.sample_rate)))
    n = len(clean)
    warnings = []
    if not np.any(clean.samples):
        warnings.append("silent clean signal")
        logger.warning(f"Stilles Quellsignal für Beispiel {ids.get('example_id', '?')}")

    reverberant = convolve(clean, parts.full).samples[:n]
    direct_early = convolve(clean, parts.direct_early).samples[:n]
    late = convolve(clean, parts.late).samples[:n]
    rate = clean.sample_rate
    return TrainingExample(
        reverberant=AudioSignal(reverberant, rate),
        direct_early=AudioSignal(direct_early, rate),
        late=AudioSignal(late, rate),
        t60_label=float(t60_label), t60_class=int(t60_class),
        room_id=ids.get("room_id", ""), rir_id=ids.get("rir_id", ""),
        example_id=ids.get("example_id", ""), warnings=warnings,
    )


def synth_speechlike(duration: float, fs: int = 8000, rng_seed: int = 0) -> AudioSignal:
    """
    Sprachähnliches Ersatzsignal: bandbegrenztes Rauschen mit Silben-Hüllkurve (~4 Hz)
    und Pausen zwischen Wörtern. Beginnt immer mit einer Pause >= 150 ms.
    Spitzenwert 0.5.
    """
    if duration <= 0:
        raise InvalidArgumentError(f"duration must be positive, got {duration}")
    rng = np.random.default_rng(rng_seed)
    n = int(round(duration * fs))

    high = min(SPEECH_BAND_HZ[1], 0.45 * fs)
    sos = sps.butter(4, [SPEECH_BAND_HZ[0], high], btype="bandpass", fs=fs, output="sos")
    carrier = sps.sosfilt(sos, rng.standard_normal(n))
    # Spektrale Neigung wie bei Sprache (mehr Energie unten)
    carrier = sps.sosfilt(sps.butter(1, 800.0, btype="lowpass", fs=fs, output="sos"), carrier) + 0.3 * carrier

    envelope = np.zeros(n)
    pos = int(rng.uniform(*LEADING_GAP_S) * fs)
    while pos < n:
        for _ in range(int(rng.integers(1, 5))):
            syl_len = int(fs / SYLLABLE_RATE_HZ * rng.uniform(0.7, 1.3))
            end = min(pos + syl_len, n)
            if end <= pos:
                break
            envelope[pos:end] = rng.uniform(0.5, 1.0) * np.hanning(syl_len)[:end - pos]
            pos = end
        pos += int(rng.uniform(*WORD_GAP_S) * fs)

    x = carrier * envelope
    peak = np.max(np.abs(x)) if n else 0.0
    if peak > 0:
        x = x * (PEAK_LEVEL / peak)
    return AudioSignal(x, fs)


# ============================================================
# 4. Datensatz-Build
# ============================================================

@dataclass
class _RirJob:
    rir_id: str
    split: str
    room_id: str
    dims: tuple
    t60: float
    index: int
    seed: List[int]


@dataclass
class _ExampleJob:
    example_id: str
    split: str
    room_id: str
    rir_id: str
    t60: float
    t60_class: int
    clean_index: int
    rir_path: Path


class DatasetBuilder:
    """
    Baut einen Datensatz aus dem dataset-Abschnitt der Konfiguration.

    Ablauf: Räume/T60/Zähler → RIR-Jobs → Zero-Padding auf das Korpus-Maximum →
    Beispiel-Jobs → WAVs + Manifest → NormStats über den Trainings-Split.
    Train/Val nutzen die "seen" Räume, Test die "unseen" Räume.
    """

    def __init__(self, cfg: dict, seed: int, out_dir, workers: int = 1, t60s: Optional[Sequence[float]] = None):
        self.cfg = cfg
        self.seed = int(seed)
        self.out_dir = Path(out_dir)
        self.pool = OrderedWorkerPool(workers)
        self.fs = int(cfg["fs"])
        self.stft_cfg = StftConfig.from_dict(cfg["stft"])
        self.grid = [float(t) for t in cfg["t60_grid"]]
        if t60s:
            self.t60s = [float(t) for t in t60s]
        elif cfg.get("task", "t60") == "derev":
            self.t60s = [float(t) for t in cfg["derev_t60s"]]
        else:
            self.t60s = list(self.grid)
        for t in self.t60s:
            class_index(t, self.grid)
        self.errors: List[dict] = []
        self.warnings: List[dict] = []
        self.cleans = self._list_cleans()

    # --- Quellen ---
    def _list_cleans(self) -> Optional[List[Path]]:
        clean_dir = self.cfg.get("clean_dir")
        if not clean_dir:
            return None
        files = sorted(Path(clean_dir).rglob("*.wav"))
        if not files:
            raise InvalidArgumentError(f"No WAV files found in clean_dir {clean_dir}")
        logger.info(f"{len(files)} saubere Quellsignale in {clean_dir}")
        return files

    def _load_clean(self, clean_index: int) -> AudioSignal:
        if self.cleans is None:
            return synth_speechlike(self.cfg["duration"], self.fs, rng_seed=self.seed * 1_000_003 + clean_index)
        return read_wav(self.cleans[clean_index % len(self.cleans)], self.fs)

    # --- Räume ---
    def _rooms(self) -> Dict[str, List[tuple]]:
        seen = [tuple(d) for d in self.cfg["rooms"]["seen"]]
        unseen = [tuple(d) for d in self.cfg["rooms"]["unseen"]]
        named_seen = [(f"R{i + 1}", d) for i, d in enumerate(seen)]
        named_unseen = [(f"R{len(seen) + i + 1}", d) for i, d in enumerate(unseen)]
        return {"train": named_seen, "val": named_seen, "test": named_unseen}

    def _rir_jobs(self) -> List[_RirJob]:
        jobs = []
        rooms = self._rooms()
        for s_idx, split in enumerate(SPLITS):
            count = int(self.cfg["rirs_per_cell"][split])
            for r_idx, (room_id, dims) in enumerate(rooms[split]):
                for t_idx, t60 in enumerate(self.t60s):
                    for k in range(count):
                        rir_id = f"{room_id}-{t60_tag(t60)}-{split}-r{k:03d}"
                        jobs.append(_RirJob(rir_id, split, room_id, dims, t60, k,
                                            [self.seed, s_idx, r_idx, t_idx, k]))
        return jobs

    def _simulate(self, job: _RirJob):
        """Simuliert eine RIR, füllt auf die Korpus-Länge auf und speichert sie."""
        rng = np.random.default_rng(job.seed)
        room = RoomSpec.random_placement(job.dims, self.cfg["mic_distance"], self.cfg["wall_clearance"], rng)
        rir = simulate_rir(room, job.t60, self.fs, max_order=self.cfg.get("max_order"),
                           highpass=self.cfg.get("highpass", False),
                           wall_model=self.cfg.get("wall_model", "calibrated"))
        try:
            measured = measure_t60_schroeder(rir)
        except DerevKitError:
            measured = None
        path = self.out_dir / "rirs" / f"{job.rir_id}.wav"
        save_rir(path, rir.padded(self.rir_length), measured_t60=measured)
        return path

    # --- Hauptablauf ---
    def build(self) -> DatasetManifest:
        logger.info(f"Datensatz-Build: {len(self.t60s)} T60-Werte, Seed {self.seed}, Ziel {self.out_dir}")
        self.out_dir.mkdir(parents=True, exist_ok=True)

        rir_jobs = self._rir_jobs()
        # Zero-Padding auf die längste RIR des Korpus
        self.rir_length = max((rir_length(job.t60, self.fs) for job in rir_jobs), default=0)
        simulated, errors = self.pool.map(self._simulate, rir_jobs, desc="RIRs")
        for index, message in errors:
            self.errors.append({"item": rir_jobs[index].rir_id, "error": message})

        ok = [job for job, path in zip(rir_jobs, simulated) if path is not None]
        rir_paths = {job.rir_id: path for job, path in zip(rir_jobs, simulated) if path is not None}

        example_jobs = self._example_jobs(ok, rir_paths)
        results, errors = self.pool.map(self._make_example, example_jobs, desc="Beispiele")
        for index, message in errors:
            self.errors.append({"item": example_jobs[index].example_id, "error": message})
        rows = []
        for job, result in zip(example_jobs, results):
            if result is None:
                continue
            record, warnings = result
            rows.append(record)
            self.warnings.extend({"item": job.example_id, "warning": w} for w in warnings)
        if not rows:
            raise DerevKitError(f"Dataset build produced no examples ({len(self.errors)} errors)")

        norm_rel = self._fit_norm_stats(rows)
        manifest = DatasetManifest(
            examples=rows, stft=self.stft_cfg, t60_grid=self.grid, seed=self.seed,
            norm_stats_path=norm_rel, root=self.out_dir,
            info={
                "task": self.cfg.get("task", "t60"),
                "classes": self.t60s,
                "fs": self.fs,
                "duration": self.cfg["duration"],
                "rooms": {room_id: list(dims) for split_rooms in self._rooms().values()
                          for room_id, dims in split_rooms},
                "rir_length": self.rir_length,
                "reuse_cleans_across_rooms": bool(self.cfg.get("reuse_cleans_across_rooms", False)),
                "errors": self.errors,
                "warnings": self.warnings,
            },
        )
        manifest.write(self.out_dir)
        logger.info(f"Datensatz fertig: {len(rows)} Beispiele, {len(self.errors)} Fehler")
        return manifest

    def _example_jobs(self, rir_jobs: List[_RirJob], rir_paths: Dict[str, Path]) -> List[_ExampleJob]:
        per_rir = int(self.cfg["cleans_per_rir"])
        reuse = bool(self.cfg.get("reuse_cleans_across_rooms", False))
        jobs = []
        counter = 0
        for job in rir_jobs:
            for j in range(per_rir):
                if reuse:
                    # gleiche Quelle für gleiche (split, T60, RIR-Nummer, j) in allen Räumen
                    key = (SPLITS.index(job.split), self.t60s.index(job.t60), job.index, j)
                    clean_index = hash_index(key)
                else:
                    clean_index = counter
                counter += 1
                example_id = f"{job.split}-{job.rir_id.replace(f'-{job.split}', '')}-c{j}"
                jobs.append(_ExampleJob(example_id, job.split, job.room_id, job.rir_id, job.t60,
                                        class_index(job.t60, self.grid), clean_index, rir_paths[job.rir_id]))
        return jobs

    def _make_example(self, job: _ExampleJob):
        clean = self._load_clean(job.clean_index)
        parts = decompose_rir(load_rir(job.rir_path))
        example = synthesize_example(clean, parts, self.cfg["duration"], job.t60, job.t60_class,
                                     room_id=job.room_id, rir_id=job.rir_id, example_id=job.example_id)
        base = Path("wav") / job.split
        paths = {
            "reverb": (base / f"{job.example_id}_reverb.wav").as_posix(),
            "direct_early": (base / f"{job.example_id}_direct_early.wav").as_posix(),
            "late": (base / f"{job.example_id}_late.wav").as_posix(),
        }
        write_wav(self.out_dir / paths["reverb"], example.reverberant)
        write_wav(self.out_dir / paths["direct_early"], example.direct_early)
        write_wav(self.out_dir / paths["late"], example.late)
        record = ManifestRecord(
            id=job.example_id, split=job.split, room_id=job.room_id, rir_id=job.rir_id,
            t60=job.t60, t60_class=job.t60_class, paths=paths,
            frames=self.stft_cfg.frame_count(len(example.reverberant)),
        )
        return record, example.warnings

    def _fit_norm_stats(self, rows: List[ManifestRecord]) -> Optional[str]:
        train = [r for r in rows if r.split == "train"]
        if not train:
            logger.warning("Kein Trainings-Split: keine NormStats")
            return None

        def features() -> Iterator:
            for row in train:
                x = read_wav(self.out_dir / row.paths["reverb"], self.fs)
                yield extract_t60_features(stft(x, self.stft_cfg))

        stats = fit_normalization(features())
        stats.save(self.out_dir / NORM_STATS_FILE)
        return NORM_STATS_FILE


def hash_index(key: tuple) -> int:
    """Deterministischer Quell-Index aus einem Tupel kleiner Ganzzahlen."""
    value = 0
    for part in key:
        value = value * 1009 + int(part)
    return value


def build_dataset(cfg: dict, rng_seed: int, out_dir, workers: int = 1,
                  t60s: Optional[Sequence[float]] = None) -> DatasetManifest:
    """
    Baut den Datensatz deterministisch aus dem dataset-Abschnitt.

    Args:
        cfg: dataset-Abschnitt der Konfiguration
        rng_seed: Seed (gleicher Seed → byte-identisches Manifest)
        out_dir: Zielordner
        workers: Threads für RIR- und Beispiel-Synthese
        t60s: optionale Einschränkung der T60-Werte (müssen im Raster liegen)

    Raises:
        DerevKitError: kein einziges Beispiel erzeugt
    """
    return DatasetBuilder(cfg, rng_seed, out_dir, workers=workers, t60s=t60s).build()
