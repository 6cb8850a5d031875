"""``sernet`` command line: synth, extract, train, stats, predict, ablate.

Exit codes: 0 success, 1 partial failure, 2 invalid input or config.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .audio import load_manifest
from .config import RunConfig, load_config
from .errors import CompatibilityError, FoldError, SerError
from .harness import (ablate_paths, clip_features, load_features, prepare_input, run_experiment, synth_dataset,
                      tune_allocator)
from .mfcc import MelConfig, StftConfig, write_mfcc_dump
from .model import build_model, input_shape_for, load_checkpoint, model_stats, save_checkpoint

EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    """Bad command-line input; reported with exit code 2."""


def _err(msg: str) -> None:
    print(f"sernet: {msg}", file=sys.stderr)


def _run_config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _cache_dir(args, cfg: RunConfig):
    return os.environ.get("SER_CACHE_DIR") or getattr(args, "cache_dir", None) or cfg.data.get("cache_dir")


def _jobs(args) -> int:
    return args.jobs if args.jobs else (os.cpu_count() or 1)


def frontend_dict(stft: StftConfig, mel: MelConfig, seconds: float) -> dict:
    return {"stft": dataclasses.asdict(stft), "mel": dataclasses.asdict(mel), "seconds": float(seconds)}


def frontend_hash(stft: StftConfig, mel: MelConfig, seconds: float) -> str:
    blob = json.dumps(frontend_dict(stft, mel, seconds), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    manifest = synth_dataset(args.out, args.classes, args.per_class, args.seed, n_speakers=args.speakers,
                             seconds=args.seconds)
    print(f"wrote {len(manifest.entries)} clips, {manifest.num_classes} classes, "
          f"{len(manifest.speakers)} speakers -> {Path(args.out) / 'manifest.csv'}")
    return EXIT_OK


def _input_files(src: Path) -> list:
    if src.is_dir():
        return sorted(p for p in src.iterdir() if p.suffix.lower() == ".wav")
    if src.is_file() and src.suffix.lower() == ".wav":
        return [src]
    if src.is_file():
        return [Path(e.path) for e in load_manifest(src).entries]
    raise UsageError(f"input {src} does not exist")


def cmd_extract(args) -> int:
    cfg = _run_config(args.config)
    seconds = args.seconds if args.seconds is not None else cfg.train.input_seconds
    files = _input_files(Path(args.input))
    if not files:
        _err("no input files")
        return EXIT_INVALID
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ok, failed = 0, 0
    shapes = set()
    # workers never see the cache: dumps are the product here
    feats, errors = load_features(files, cfg.stft, cfg.mel, seconds, None, _jobs(args))
    good = iter(feats)
    for path in files:
        if str(path) in errors:
            failed += 1
            _err(f"{path}: {errors[str(path)]}")
            continue
        coeffs = next(good)
        write_mfcc_dump(out / (path.stem + ".mfcc"), coeffs)
        shapes.add(tuple(coeffs.shape))
        ok += 1
    shape_txt = ", ".join(f"{r}x{c}" for r, c in sorted(shapes)) or "-"
    print(f"extracted {ok} of {len(files)} file(s); shapes {shape_txt}")
    return EXIT_PARTIAL if failed else EXIT_OK


def _train_config(args, cfg: RunConfig):
    changes = {}
    for arg, field in (("loss", "loss"), ("gamma", "gamma"), ("seconds", "input_seconds"), ("seed", "seed"),
                       ("epochs", "epochs"), ("folds", "folds"), ("batch_size", "batch_size")):
        value = getattr(args, arg, None)
        if value is not None:
            changes[field] = value
    return dataclasses.replace(cfg.train, **changes)


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def cmd_train(args) -> int:
    cfg = _run_config(args.config)
    manifest_path = args.manifest or cfg.data.get("manifest")
    if not manifest_path:
        raise UsageError("no manifest given (use --manifest or [data] manifest)")
    manifest = load_manifest(manifest_path)
    train_cfg = _train_config(args, cfg)
    start = time.perf_counter()
    result = run_experiment(manifest, cfg.model, train_cfg, stft=cfg.stft, mel=cfg.mel,
                            cache_dir=_cache_dir(args, cfg), jobs=_jobs(args),
                            log=None if args.quiet else (lambda m: print(m, file=sys.stderr)))
    model = result.model
    model.meta.update(frontend=frontend_dict(cfg.stft, cfg.mel, train_cfg.input_seconds),
                      frontend_hash=frontend_hash(cfg.stft, cfg.mel, train_cfg.input_seconds),
                      labels=list(manifest.label_set))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n32 = save_checkpoint(model, out, "fp32")
    fp16_path = _sidecar(out, ".fp16" + out.suffix)
    n16 = save_checkpoint(model, fp16_path, "fp16")
    report_path = Path(args.report) if args.report else _sidecar(out, ".report.json")
    # wall-clock stays out of the file so equal seeds give byte-identical reports
    report_path.write_text(result.report.to_json(timing=False) + "\n", encoding="utf-8")
    cm_path = _sidecar(report_path, ".confusion.csv") if args.report else _sidecar(out, ".confusion.csv")
    _write_confusion(cm_path, manifest.label_set, result.report.pooled["confusion"])
    agg = result.report.aggregate
    print(json.dumps({
        "ua_mean": agg["ua_mean"], "wa_mean": agg["wa_mean"], "f1_mean": agg["f1_mean"],
        "checkpoint": str(out), "checkpoint_fp16": str(fp16_path), "bytes_fp32": n32, "bytes_fp16": n16,
        "report": str(report_path), "confusion_csv": str(cm_path),
    }, indent=2))
    if not args.quiet:
        print(f"wall clock {time.perf_counter() - start:.1f} s", file=sys.stderr)
    return EXIT_OK


def _write_confusion(path: Path, labels, counts) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\pred"] + list(labels))
    for label, row in zip(labels, counts):
        writer.writerow([label] + list(row))
    path.write_text(buf.getvalue(), encoding="utf-8")


def stats_dict(model, seconds: float, stft: StftConfig = StftConfig()) -> dict:
    shape = input_shape_for(seconds, model.cfg.input_mfcc, stft.hop, stft.frame_len)
    st = model_stats(model, shape)
    with tempfile.TemporaryDirectory() as tmp:
        fp16_bytes = save_checkpoint(model, Path(tmp) / "m.ckpt", "fp16")
    return {
        "n_params": st.n_params,
        "size_mb_fp16": fp16_bytes / 1e6,
        "checkpoint_bytes_fp16": fp16_bytes,
        "mflops": st.mflops,
        "pmu_kb": st.peak_memory_bytes / 1e3,
        "input_shape": st.input_shape,
        "stats": st.to_dict(),
    }


def cmd_stats(args) -> int:
    if args.checkpoint and args.config:
        raise UsageError("give either --config or --checkpoint, not both")
    if args.checkpoint:
        model = _load_ckpt(args.checkpoint)
        stft = StftConfig(**model.meta.get("frontend", {}).get("stft", {}))
    else:
        cfg = _run_config(args.config)
        model = build_model(cfg.model)
        stft = cfg.stft
    print(json.dumps(stats_dict(model, args.seconds, stft), indent=2, sort_keys=True))
    return EXIT_OK


def _load_ckpt(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def cmd_predict(args) -> int:
    model = _load_ckpt(args.checkpoint)
    front = model.meta.get("frontend")
    if not front:
        raise UsageError(f"{args.checkpoint}: no front-end settings stored in checkpoint")
    stft, mel, seconds = StftConfig(**front["stft"]), MelConfig(**front["mel"]), front["seconds"]
    if frontend_hash(stft, mel, seconds) != model.meta.get("frontend_hash"):
        raise CompatibilityError(f"{args.checkpoint}: stored front-end hash does not match its settings")
    if args.config:
        cfg = load_config(args.config)
        if frontend_hash(cfg.stft, cfg.mel, cfg.train.input_seconds) != model.meta["frontend_hash"]:
            raise CompatibilityError("front-end config differs from the one the checkpoint was trained with")
        if cfg.model.with_classes(model.cfg.num_classes).config_hash() != model.cfg.config_hash():
            raise CompatibilityError("model config differs from the checkpoint architecture")
    coeffs = clip_features(args.wav, stft, mel, seconds)
    probs = model.predict_proba(prepare_input(coeffs[None], model.meta))[0].astype(np.float64)
    labels = model.meta.get("labels") or [str(i) for i in range(len(probs))]
    k = int(np.argmax(probs))
    print(json.dumps({"label": labels[k], "probabilities": {lab: float(p) for lab, p in zip(labels, probs)}},
                     indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args.config)
    manifest_path = args.manifest or cfg.data.get("manifest")
    if not manifest_path:
        raise UsageError("no manifest given (use --manifest or [data] manifest)")
    manifest = load_manifest(manifest_path)
    rows = ablate_paths(manifest, _train_config(args, cfg), cfg.model, stft=cfg.stft, mel=cfg.mel,
                        cache_dir=_cache_dir(args, cfg), jobs=_jobs(args))
    text = json.dumps(rows, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(f"{'paths':8s} {'UA':>7s} {'WA':>7s} {'F1':>7s} {'params':>9s}")
    for r in rows:
        print(f"{r['paths']:8s} {r['ua']:7.4f} {r['wa']:7.4f} {r['f1']:7.4f} {r['n_params']:9d}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_overrides(p):
    p.add_argument("--loss", choices=("ce", "focal"))
    p.add_argument("--gamma", type=float, help="focal-loss focusing parameter")
    p.add_argument("--seconds", type=float, help="input length; clips are cut or zero-padded")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--cache-dir", help="MFCC cache (SER_CACHE_DIR takes precedence)")
    p.add_argument("--jobs", type=int, default=0, help="worker processes (default: logical cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sernet", description="Parallel-path CNN emotion recognition on MFCCs.")
    parser.add_argument("--version", action="version", version=f"sernet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic separable corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--speakers", type=int, default=10)
    p.add_argument("--seconds", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="write one MFCC dump per clip")
    p.add_argument("--input", required=True, help="directory of .wav files or a manifest CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seconds", type=float)
    p.add_argument("--jobs", type=int, default=0)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="cross-validate and export the best model")
    p.add_argument("--manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="fp32 checkpoint path; fp16 copy and report sit next to it")
    p.add_argument("--report", help="report JSON path")
    p.add_argument("--quiet", action="store_true")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stats", help="parameter count, fp16 size, MFLOPs, peak memory")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--seconds", type=float, default=3.0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("predict", help="classify one WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--config", help="optional run config that must match the checkpoint")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="single-path vs parallel-path comparison")
    p.add_argument("--manifest")
    p.add_argument("--config")
    p.add_argument("--out", help="write the table as JSON")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    tune_allocator()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except FoldError as exc:
        _err(str(exc))
        return EXIT_PARTIAL
    except (UsageError, SerError, ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
