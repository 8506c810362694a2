"""
DerevKit.py
Hauptstartpunkt: die komplette Pipeline als Unterbefehle.

  rir simulate | decompose | measure
  dataset build
  train t60 | derev
  finetune joint
  enhance
  evaluate
  export-eval-pairs
  export-penultimate
  selftest

Logs gehen nach stderr (und <out>/derevkit.log), Ergebnisse nur in Dateien.
Exit-Codes: 0 Erfolg, 1 Laufzeitfehler, 2 Konfigurations-/Argumentfehler.
"""

import argparse
import logging
import platform
import sys
import traceback
from pathlib import Path
from typing import List, Optional

# Projektordner zum Pfad hinzufügen
sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np
import pandas as pd
import scipy
import soundfile
import tqdm

from checkpoint import load_checkpoint, save_checkpoint
from config import VERSION, Config, ConfigError, DerevKitError, save_json_atomic
from dataset_synth import DatasetManifest, build_dataset
from logger_system import attach_file_handler, detach_handler, logger, set_console_level
from room_acoustics import (
    WALL_MODELS, RoomSpec, decompose_rir, load_rir, measure_t60_schroeder, save_rir, simulate_rir,
)
from signal_core import AudioSignal, write_wav

RUN_RECORD_FILE = "run_record.json"
LOG_FILE = "derevkit.log"
CHECKPOINT_SUFFIX = ".rvtk"


# ============================================================
# 1. Argumente
# ============================================================

class ArgumentError(ConfigError):
    """Ungültige Kommandozeile (Exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def _dims(value: str):
    try:
        dims = [float(v) for v in value.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 9x8x7, got {value!r}")
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise argparse.ArgumentTypeError(f"dims must be three positive numbers, got {value!r}")
    return dims


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON-Konfiguration (Default: Desk-Scale)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="Ausgabe-Ordner bzw. -Datei")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="Threads für Daten/Evaluation")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--precision", choices=["float32", "float64"], default=argparse.SUPPRESS)
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="DerevKit.py", description=f"DerevKit {VERSION}", parents=[common])
    commands = parser.add_subparsers(dest="command", parser_class=_Parser)
    commands.required = True

    # rir
    rir = commands.add_parser("rir", help="Raumimpulsantworten").add_subparsers(dest="action", parser_class=_Parser)
    rir.required = True
    p = rir.add_parser("simulate", parents=[common])
    p.add_argument("--dims", type=_dims, required=True)
    p.add_argument("--t60", type=float, required=True)
    p.add_argument("--fs", type=int, default=None)
    p.add_argument("--distance", type=float, default=None)
    p.add_argument("--clearance", type=float, default=None)
    p.add_argument("--max-order", type=int, default=None)
    p.add_argument("--highpass", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--wall-model", choices=list(WALL_MODELS), default=None)
    p = rir.add_parser("decompose", parents=[common])
    p.add_argument("wav")
    p = rir.add_parser("measure", parents=[common])
    p.add_argument("wav")

    # dataset
    ds = commands.add_parser("dataset").add_subparsers(dest="action", parser_class=_Parser)
    ds.required = True
    p = ds.add_parser("build", parents=[common])
    p.add_argument("--task", choices=["t60", "derev"], default=None)
    p.add_argument("--t60", type=float, action="append", default=None)

    # train
    tr = commands.add_parser("train").add_subparsers(dest="action", parser_class=_Parser)
    tr.required = True
    for name in ("t60", "derev"):
        p = tr.add_parser(name, parents=[common])
        p.add_argument("--dataset", default=None)
        p.add_argument("--epochs", type=int, default=None)
        if name == "t60":
            p.add_argument("--t60", type=float, action="append", default=None, help="Klassen des Netzes")

    # finetune
    ft = commands.add_parser("finetune").add_subparsers(dest="action", parser_class=_Parser)
    ft.required = True
    p = ft.add_parser("joint", parents=[common])
    p.add_argument("--dataset", default=None)
    p.add_argument("--t60-ckpt", default=None)
    p.add_argument("--derev-ckpt", default=None)
    p.add_argument("--gamma", type=float, action="append", default=None)
    p.add_argument("--link-feature", choices=["penultimate", "regression", "onehot"], default=None)
    p.add_argument("--freeze-t60", action="store_true", default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = commands.add_parser("enhance", parents=[common])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)

    for name in ("evaluate", "export-eval-pairs"):
        p = commands.add_parser(name, parents=[common])
        p.add_argument("--dataset", default=None)
        p.add_argument("--ckpt", default=None)
        p.add_argument("--oracle", action="store_true", default=None)
        p.add_argument("--split", choices=["train", "val", "test"], default=None)
        p.add_argument("--t60", type=float, action="append", default=None)

    p = commands.add_parser("export-penultimate", parents=[common])
    p.add_argument("--dataset", default=None)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default=None)

    p = commands.add_parser("selftest", parents=[common])
    p.add_argument("--check", action="append", default=None)
    return parser


def _overrides(args) -> dict:
    """CLI-Flags → gepunktete Config-Overrides."""
    out = {}
    if getattr(args, "seed", None) is not None:
        out["runtime.seed"] = args.seed
        for section in ("t60_net", "derev", "joint"):
            out[f"{section}.seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        out["runtime.workers"] = args.workers
    if getattr(args, "precision", None) is not None:
        out["runtime.precision"] = args.precision
    command = (args.command, getattr(args, "action", None))
    if getattr(args, "epochs", None) is not None:
        section = {("train", "t60"): "t60_net", ("train", "derev"): "derev", ("finetune", "joint"): "joint"}
        out[f"{section[command]}.epochs"] = args.epochs
    if command == ("train", "t60") and args.t60:
        out["t60_net.classes"] = list(args.t60)
    if command == ("dataset", "build"):
        if args.task:
            out["dataset.task"] = args.task
        if args.t60:
            out["dataset.derev_t60s"] = list(args.t60)
    if command == ("finetune", "joint"):
        if args.t60_ckpt:
            out["joint.t60_checkpoint"] = args.t60_ckpt
        if args.derev_ckpt:
            out["joint.derev_checkpoint"] = args.derev_ckpt
        if args.link_feature:
            out["joint.link_feature"] = args.link_feature
        if args.freeze_t60:
            out["joint.freeze_t60"] = True
    if args.command in ("evaluate", "export-eval-pairs"):
        if args.split:
            out["evaluation.split"] = args.split
        if args.oracle:
            out["evaluation.oracle"] = True
    return out


# ============================================================
# 2. Run-Record
# ============================================================

def package_versions() -> dict:
    return {
        "derevkit": VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "soundfile": soundfile.__version__,
        "pandas": pd.__version__,
        "tqdm": tqdm.__version__,
    }


class RunContext:
    """Ausgabe-Ordner, Log-Datei und Buchführung eines Befehls."""

    def __init__(self, args, argv: List[str], config: Config, out_dir: Path):
        self.args = args
        self.argv = list(argv)
        self.config = config
        self.out_dir = out_dir
        self.outputs: List[str] = []
        self.errors: List[dict] = []
        self.partial = False
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.handler = attach_file_handler(out_dir / LOG_FILE)

    @property
    def workers(self) -> int:
        return self.config.get("runtime.workers")

    @property
    def precision(self) -> str:
        return self.config.get("runtime.precision")

    @property
    def cache_items(self) -> int:
        return self.config.get("runtime.cache_items")

    @property
    def progress(self) -> bool:
        return sys.stderr.isatty()

    def output(self, path) -> Path:
        path = Path(path)
        self.outputs.append(str(path))
        return path

    def record(self, status: str, exit_code: int):
        data = {
            "command": " ".join(filter(None, [self.args.command, getattr(self.args, "action", None)])),
            "argv": self.argv,
            "config": self.config.to_dict(),
            "seeds": {k: self.config.get(f"{k}.seed") for k in ("runtime", "t60_net", "derev", "joint")},
            "versions": package_versions(),
            "outputs": self.outputs,
            "partial": self.partial,
            "errors": self.errors,
            "status": status,
            "exit_code": exit_code,
        }
        save_json_atomic(self.out_dir / RUN_RECORD_FILE, data, backup=False)

    def close(self):
        detach_handler(self.handler)


def _out_dir(args, config: Config) -> Path:
    out = getattr(args, "out", None)
    if args.command == "rir" and args.action == "simulate":
        if out is None:
            raise ArgumentError("rir simulate needs --out <file.wav>")
        return Path(out).parent
    if args.command == "enhance":
        if out is None:
            raise ArgumentError("enhance needs --out <file.wav>")
        return Path(out).parent
    return Path(out) if out is not None else Path(config.get("paths.work_dir"))


def _manifest(args, config: Config) -> DatasetManifest:
    path = getattr(args, "dataset", None) or config.get("paths.manifest")
    if not path:
        raise ArgumentError("no dataset given (use --dataset or paths.manifest)")
    return DatasetManifest.read(path)


# ============================================================
# 3. Befehle
# ============================================================

def cmd_rir_simulate(ctx: RunContext):
    args, ds = ctx.args, ctx.config.section("dataset")
    fs = args.fs or ds["fs"]
    seed = ctx.config.get("runtime.seed")
    room = RoomSpec.random_placement(args.dims, args.distance or ds["mic_distance"],
                                     args.clearance or ds["wall_clearance"], np.random.default_rng(seed))
    max_order = ds["max_order"] if args.max_order is None else args.max_order
    highpass = ds["highpass"] if args.highpass is None else args.highpass
    rir = simulate_rir(room, args.t60, fs, max_order=max_order, highpass=highpass,
                       wall_model=args.wall_model or ds["wall_model"])
    try:
        measured = measure_t60_schroeder(rir)
    except DerevKitError as e:
        logger.warning(f"T60-Messung nicht möglich: {e}")
        measured = None
    save_rir(ctx.output(args.out), rir, measured_t60=measured)
    ctx.output(Path(args.out).with_suffix(".json"))
    logger.info(f"RIR gespeichert: {args.out} ({len(rir)} Taps, gemessen T60 {measured})")


def cmd_rir_decompose(ctx: RunContext):
    rir = load_rir(ctx.args.wav)
    parts = decompose_rir(rir)
    stem = Path(ctx.args.wav).stem
    for name in ("direct", "early", "late"):
        write_wav(ctx.output(ctx.out_dir / f"{stem}_{name}.wav"), AudioSignal(getattr(parts, name), rir.sample_rate))
    info = {"source": str(ctx.args.wav), "boundaries": list(parts.boundaries), "fs": rir.sample_rate}
    save_json_atomic(ctx.output(ctx.out_dir / f"{stem}_parts.json"), info, backup=False)


def cmd_rir_measure(ctx: RunContext):
    rir = load_rir(ctx.args.wav)
    measured = measure_t60_schroeder(rir)
    result = {"source": str(ctx.args.wav), "measured_t60": measured, "nominal_t60": rir.nominal_t60 or None}
    save_json_atomic(ctx.output(ctx.out_dir / f"{Path(ctx.args.wav).stem}_measure.json"), result, backup=False)
    logger.info(f"T60 (Schroeder): {measured:.3f} s")


def cmd_dataset_build(ctx: RunContext):
    cfg = ctx.config.section("dataset")
    manifest = build_dataset(cfg, ctx.config.get("runtime.seed"), ctx.out_dir / "dataset", workers=ctx.workers,
                             t60s=ctx.args.t60)
    ctx.output(manifest.root / "dataset.json")
    ctx.errors.extend(manifest.info.get("errors", []))
    ctx.partial = bool(ctx.errors)


def cmd_train_t60(ctx: RunContext):
    from t60_net import train_t60, write_history_csv
    ckpt = train_t60(_manifest(ctx.args, ctx.config), ctx.config.section("t60_net"), workers=ctx.workers,
                     precision=ctx.precision, progress=ctx.progress, cache_items=ctx.cache_items)
    save_checkpoint(ctx.output(ctx.out_dir / f"t60{CHECKPOINT_SUFFIX}"), ckpt)
    write_history_csv(ckpt.history, ctx.output(ctx.out_dir / "t60_history.csv"))


def cmd_train_derev(ctx: RunContext):
    from derev_net import pretrain_derev
    from t60_net import write_history_csv
    ckpt = pretrain_derev(_manifest(ctx.args, ctx.config), ctx.config.section("derev"), workers=ctx.workers,
                          precision=ctx.precision, progress=ctx.progress, cache_items=ctx.cache_items)
    save_checkpoint(ctx.output(ctx.out_dir / f"derev{CHECKPOINT_SUFFIX}"), ckpt)
    write_history_csv(ckpt.history, ctx.output(ctx.out_dir / "derev_history.csv"))


def cmd_finetune_joint(ctx: RunContext):
    """Ein Checkpoint pro --gamma (γ-Sweep)."""
    from derev_net import JointConfig, finetune_joint
    from t60_net import write_history_csv
    section = ctx.config.section("joint")
    manifest = _manifest(ctx.args, ctx.config)
    gammas = ctx.args.gamma or [section["gamma"]]
    t60_ckpt = load_checkpoint(section["t60_checkpoint"], "t60") if section["t60_checkpoint"] else None
    derev_ckpt = load_checkpoint(section["derev_checkpoint"], "derev") if section["derev_checkpoint"] else None
    for gamma in gammas:
        jcfg = JointConfig.from_section(dict(section, gamma=gamma))
        ckpt = finetune_joint(jcfg, manifest, t60_ckpt=t60_ckpt, derev_ckpt=derev_ckpt, workers=ctx.workers,
                              progress=ctx.progress, cache_items=ctx.cache_items)
        tag = f"g{gamma:.2f}"
        save_checkpoint(ctx.output(ctx.out_dir / f"joint_{tag}{CHECKPOINT_SUFFIX}"), ckpt)
        write_history_csv(ckpt.history, ctx.output(ctx.out_dir / f"joint_{tag}_history.csv"))


def cmd_enhance(ctx: RunContext):
    from derev_net import enhance_file
    meta = enhance_file(ctx.args.input, ctx.output(ctx.args.out), load_checkpoint(ctx.args.ckpt))
    ctx.output(Path(ctx.args.out).with_suffix(".json"))
    if meta.get("t60_creg") is not None:
        logger.info(f"Geschätzte T60: {meta['t60_reg']:.3f} s (Regression), {meta['t60_creg']:.3f} s (Klassen)")


def _eval_inputs(ctx: RunContext):
    oracle = ctx.config.get("evaluation.oracle")
    if not ctx.args.ckpt and not oracle:
        raise ArgumentError(f"{ctx.args.command} needs --ckpt or --oracle")
    ckpt = load_checkpoint(ctx.args.ckpt) if ctx.args.ckpt else None
    return _manifest(ctx.args, ctx.config), ckpt, oracle, ctx.config.get("evaluation.split")


def cmd_evaluate(ctx: RunContext):
    from derev_net import evaluate
    manifest, ckpt, oracle, split = _eval_inputs(ctx)
    report = evaluate(manifest, split, ckpt, oracle, workers=ctx.workers, t60s=ctx.args.t60, progress=ctx.progress,
                      target=ctx.config.get("derev.late_target"))
    path = report.save(ctx.output(ctx.out_dir / "report.json"))
    ctx.output(path.with_suffix(".csv"))
    ctx.errors.extend(report.meta["errors"])
    ctx.partial = bool(ctx.errors)
    agg = report.aggregates["all"]
    if agg.get("sdr_enhanced", {}).get("mean") is not None:
        logger.info(f"SDR: {agg['sdr_unprocessed']['mean']:.2f} dB → {agg['sdr_enhanced']['mean']:.2f} dB")


def cmd_export_eval_pairs(ctx: RunContext):
    from derev_net import export_eval_pairs
    manifest, ckpt, oracle, split = _eval_inputs(ctx)
    pairs = export_eval_pairs(manifest, ctx.out_dir / "pairs", split, ckpt, oracle, workers=ctx.workers,
                              progress=ctx.progress, target=ctx.config.get("derev.late_target"))
    ctx.output(ctx.out_dir / "pairs" / "pairs.json")
    ctx.partial = len(pairs) < len(manifest.rows(split))


def cmd_export_penultimate(ctx: RunContext):
    from t60_net import FeatureCache, T60Net, norm_stats_from_checkpoint, penultimate_table
    manifest = _manifest(ctx.args, ctx.config)
    ckpt = load_checkpoint(ctx.args.ckpt)
    if ckpt.kind not in ("t60", "joint"):
        raise ArgumentError(f"export-penultimate needs a t60 or joint checkpoint, got {ckpt.kind!r}")
    net = T60Net.from_checkpoint(ckpt)
    cache = FeatureCache(manifest, norm_stats_from_checkpoint(ckpt), net.cfg, net.dtype, ctx.cache_items)
    rows = manifest.rows(ctx.args.split) if ctx.args.split else manifest.examples
    table = penultimate_table(net, cache, rows)
    table.to_csv(ctx.output(ctx.out_dir / "penultimate.csv"), index=False)


def cmd_selftest(ctx: RunContext):
    from selftest import run_selftest
    results = run_selftest(ctx.args.check)
    save_json_atomic(ctx.output(ctx.out_dir / "selftest.json"), {"checks": results}, backup=False)
    failed = [r["name"] for r in results if not r["passed"]]
    if failed:
        ctx.errors.extend({"item": name, "error": "check failed"} for name in failed)
        raise DerevKitError(f"selftest failed: {', '.join(failed)}")


COMMANDS = {
    ("rir", "simulate"): cmd_rir_simulate,
    ("rir", "decompose"): cmd_rir_decompose,
    ("rir", "measure"): cmd_rir_measure,
    ("dataset", "build"): cmd_dataset_build,
    ("train", "t60"): cmd_train_t60,
    ("train", "derev"): cmd_train_derev,
    ("finetune", "joint"): cmd_finetune_joint,
    ("enhance", None): cmd_enhance,
    ("evaluate", None): cmd_evaluate,
    ("export-eval-pairs", None): cmd_export_eval_pairs,
    ("export-penultimate", None): cmd_export_penultimate,
    ("selftest", None): cmd_selftest,
}


# ============================================================
# 4. Ablauf
# ============================================================

def run(argv: Optional[List[str]] = None) -> int:
    """Führt einen Befehl aus und liefert den Exit-Code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    ctx = None
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "verbose", False):
            set_console_level(logging.DEBUG)
        elif getattr(args, "quiet", False):
            set_console_level(logging.WARNING)
        config = Config(getattr(args, "config", None), _overrides(args))
        ctx = RunContext(args, argv, config, _out_dir(args, config))
        COMMANDS[(args.command, getattr(args, "action", None))](ctx)
        ctx.record("ok", 0)
        return 0
    except ConfigError as e:
        logger.error(f"Konfigurationsfehler: {e}")
        code, status, message = 2, "config_error", str(e)
    except DerevKitError as e:
        logger.error(f"Fehler: {e}")
        logger.debug(traceback.format_exc())
        code, status, message = 1, "error", str(e)
    except Exception as e:
        logger.error(f"Unerwarteter Fehler: {type(e).__name__}: {e}")
        logger.debug(traceback.format_exc())
        code, status, message = 1, "error", f"{type(e).__name__}: {e}"
    finally:
        set_console_level(logging.INFO)
        if ctx is not None:
            ctx.close()
    if ctx is not None:
        ctx.partial = True
        ctx.errors.append({"item": "run", "error": message})
        ctx.record(status, code)
    return code


if __name__ == "__main__":
    sys.exit(run())
