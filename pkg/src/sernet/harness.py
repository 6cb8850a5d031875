"""Speaker-disjoint cross-validation, the training loop and the synthetic corpus.

Fold protocol: speakers are shuffled with the run seed and dealt
round-robin into ``k`` sessions.  Fold ``i`` tests on session ``i``,
validates on session ``(i + 1) % k`` and trains on everything else.
"""

from __future__ import annotations

import concurrent.futures
import ctypes
import dataclasses
import hashlib
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from .audio import DatasetManifest, ManifestEntry, load_clip, write_manifest, write_wav
from .autograd import Adam, lr_schedule
from .errors import EmptyInputError, FoldError, InfeasibleSplitError
from .losses import get_loss
from .metrics import ConfusionMatrix, MetricsReport, confusion, evaluate, metrics
from .mfcc import MelConfig, StftConfig, extract_mfcc, read_mfcc_dump, write_mfcc_dump
from .model import ModelConfig, ModelStats, build_model, input_shape_for, model_stats, single_path_config


def tune_allocator() -> None:
    """Keep large numpy buffers on the glibc heap instead of fresh mmaps.

    Training allocates and frees the same multi-megabyte activations every
    step; by default glibc returns them to the kernel each time and pays the
    page faults again.  No-op off glibc.
    """
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-4, 0)  # M_MMAP_MAX
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


# ---------------------------------------------------------------------------
# folds


@dataclasses.dataclass
class FoldPlan:
    k: int
    sessions: list  # list of speaker lists
    folds: list  # (train_speakers, val_speakers, test_speakers) per fold

    def to_dict(self) -> dict:
        return {"k": self.k, "sessions": self.sessions,
                "folds": [{"train": tr, "val": va, "test": te} for tr, va, te in self.folds]}


def plan_folds(manifest: DatasetManifest, k: int = 10, seed: int = 0) -> FoldPlan:
    """Group speakers into ``k`` sessions and rotate test/validation over them.

    With fewer than ``k`` speakers each speaker forms its own session
    (``k`` shrinks to the speaker count).
    """
    speakers = manifest.speakers
    if len(speakers) < 3:
        raise InfeasibleSplitError(
            f"need at least 3 speakers for disjoint train/val/test splits, got {len(speakers)}")
    if k < 3:
        raise InfeasibleSplitError(f"need k >= 3 folds, got {k}")
    k = min(k, len(speakers))
    order = np.random.default_rng(seed).permutation(len(speakers))
    sessions = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        sessions[pos % k].append(speakers[idx])
    sessions = [sorted(s) for s in sessions]
    folds = []
    for i in range(k):
        val_i = (i + 1) % k
        train = sorted(s for j, sess in enumerate(sessions) if j not in (i, val_i) for s in sess)
        folds.append((train, list(sessions[val_i]), list(sessions[i])))
    return FoldPlan(k, sessions, folds)


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    loss: str = "focal"
    gamma: float = 2.0
    seed: int = 0
    input_seconds: float = 3.0
    folds: int = 10
    base_lr: float = 1e-4
    weight_decay: float = 1e-6
    lr_decay_start: int = 50
    lr_decay_every: int = 20
    lr_decay_rate: float = 0.15
    standardize: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.input_seconds <= 0:
            raise ValueError("input_seconds must be positive")
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        get_loss(self.loss, self.gamma)

    def lr(self, epoch: int) -> float:
        return lr_schedule(epoch, self.base_lr, self.lr_decay_start, self.lr_decay_every, self.lr_decay_rate)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# features


def feature_key(path, stft: StftConfig, mel: MelConfig, seconds: float) -> str:
    """Content hash of the audio bytes and every front-end setting."""
    h = hashlib.sha256(Path(path).read_bytes())
    h.update(json.dumps([dataclasses.asdict(stft), dataclasses.asdict(mel), float(seconds)],
                        sort_keys=True).encode("utf-8"))
    return h.hexdigest()


def clip_features(path, stft: StftConfig = StftConfig(), mel: MelConfig = MelConfig(), seconds: float = 3.0,
                  cache_dir=None) -> np.ndarray:
    """MFCC map ``[n_mfcc, frames]`` (fp32) of one file, via the cache if given."""
    cached = None
    if cache_dir is not None:
        cached = Path(cache_dir) / (feature_key(path, stft, mel, seconds) + ".mfcc")
        if cached.exists():
            return read_mfcc_dump(cached).coeffs
    coeffs = extract_mfcc(load_clip(path, seconds), stft, mel).coeffs.astype(np.float32)
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        tmp = cached.with_suffix(".tmp")
        write_mfcc_dump(tmp, coeffs)
        tmp.replace(cached)
    return coeffs


def _features_job(args):
    path, stft, mel, seconds, cache_dir = args
    try:
        return clip_features(path, stft, mel, seconds, cache_dir), None
    except Exception as exc:  # reported per file by the caller
        return None, f"{type(exc).__name__}: {exc}"


def load_features(paths, stft: StftConfig = StftConfig(), mel: MelConfig = MelConfig(), seconds: float = 3.0,
                  cache_dir=None, jobs: int = 1):
    """Return ``(features, errors)``; ``errors`` maps path to message for failures."""
    jobs_args = [(str(p), stft, mel, seconds, cache_dir) for p in paths]
    if jobs > 1 and len(jobs_args) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_features_job, jobs_args, chunksize=8))
    else:
        results = [_features_job(a) for a in jobs_args]
    feats, errors = [], {}
    for (path, *_), (coeffs, err) in zip(jobs_args, results):
        if err is not None:
            errors[path] = err
        else:
            feats.append(coeffs)
    return feats, errors


def manifest_features(manifest: DatasetManifest, stft: StftConfig, mel: MelConfig, seconds: float,
                      cache_dir=None, jobs: int = 1):
    """``(x [N, n_mfcc, T], y [N])`` for every manifest row; any failure raises."""
    feats, errors = load_features([e.path for e in manifest.entries], stft, mel, seconds, cache_dir, jobs)
    if errors:
        path, msg = next(iter(errors.items()))
        raise EmptyInputError(f"{len(errors)} file(s) could not be read, first: {path}: {msg}")
    y = np.array([manifest.label_index(e.label) for e in manifest.entries], dtype=np.int64)
    return np.stack(feats), y


# ---------------------------------------------------------------------------
# one fold


@dataclasses.dataclass
class FoldData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    labels: list = None


@dataclasses.dataclass
class FoldResult:
    model: object
    report: MetricsReport
    best_epoch: int
    best_val_ua: float
    history: dict
    test_confusion: ConfusionMatrix


def _standardizer(x_train: np.ndarray):
    """Per-coefficient mean and std over training maps and frames."""
    mean = x_train.mean(axis=(0, 2))
    std = x_train.std(axis=(0, 2))
    std = np.where(std > 1e-6, std, 1.0)
    return mean.astype(np.float32), std.astype(np.float32)


def prepare_input(x: np.ndarray, meta: dict) -> np.ndarray:
    """Maps ``[N, n_mfcc, T]`` to model input ``[N, n_mfcc, T, 1]``, standardized per ``meta``."""
    x = np.asarray(x, dtype=np.float32)
    if "feature_mean" in meta:
        mean = np.asarray(meta["feature_mean"], dtype=np.float32)[None, :, None]
        std = np.asarray(meta["feature_std"], dtype=np.float32)[None, :, None]
        x = (x - mean) / std
    return x[..., None]


def train_fold(model_cfg: ModelConfig, train_cfg: TrainConfig, data: FoldData, fold: int = 0) -> FoldResult:
    """Train one fold and evaluate the best-validation checkpoint on its test split.

    Candidates are the initial model (epoch 0) and the model after each
    epoch; the winner maximizes validation UA, ties broken by lower
    validation loss, then by the earlier epoch.
    """
    if len(data.x_train) == 0:
        raise EmptyInputError("training split is empty")
    c = model_cfg.num_classes
    counts = np.bincount(data.y_train, minlength=c)
    for cls in np.flatnonzero(counts == 0):
        name = data.labels[cls] if data.labels else str(cls)
        warnings.warn(f"fold {fold}: class {name!r} has no training samples", RuntimeWarning, stacklevel=2)

    init_ss, shuffle_ss, dropout_ss = np.random.SeedSequence([train_cfg.seed, fold]).spawn(3)
    model = build_model(model_cfg, rng=np.random.default_rng(init_ss))
    model.set_dropout_rng(np.random.default_rng(dropout_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    if train_cfg.standardize:
        mean, std = _standardizer(data.x_train)
        model.meta.update(feature_mean=mean.tolist(), feature_std=std.tolist())
    prep = lambda a: prepare_input(a, model.meta)  # noqa: E731
    x_train, x_val, x_test = prep(data.x_train), prep(data.x_val), prep(data.x_test)
    has_val = len(x_val) > 0
    if not has_val:
        x_val, y_val = x_train, data.y_train
    else:
        y_val = data.y_val

    loss_fn = get_loss(train_cfg.loss, train_cfg.gamma)
    opt = Adam(model.parameters(), lr=train_cfg.base_lr, weight_decay=train_cfg.weight_decay)
    bs = train_cfg.batch_size

    def validate():
        probs = model.predict_proba(x_val, bs)
        ua = evaluate(probs.argmax(axis=1), y_val, c).ua
        return ua, float(loss_fn(probs, y_val).item())

    val_ua, val_loss = validate()
    best_key = (val_ua, -val_loss)
    best_state, best_epoch = model.state_dict(), 0
    history = {"train_loss": [], "val_ua": [val_ua], "val_loss": [val_loss], "lr": []}

    for epoch in range(1, train_cfg.epochs + 1):
        lr = train_cfg.lr(epoch - 1)
        order = shuffle_rng.permutation(len(x_train))
        losses = []
        for i in range(0, len(order), bs):
            idx = order[i:i + bs]
            loss = loss_fn(model.forward(x_train[idx], training=True), data.y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(float(loss.item()) * len(idx))
        val_ua, val_loss = validate()
        history["train_loss"].append(sum(losses) / len(order))
        history["val_ua"].append(val_ua)
        history["val_loss"].append(val_loss)
        history["lr"].append(lr)
        if (val_ua, -val_loss) > best_key:
            best_key = (val_ua, -val_loss)
            best_state, best_epoch = model.state_dict(), epoch

    model.load_state_dict(best_state)
    model.meta.update(best_epoch=best_epoch, labels=list(data.labels or range(c)))
    if len(x_test):
        preds = model.predict_proba(x_test, bs).argmax(axis=1)
        cm = confusion(preds, data.y_test, c)
        report = metrics(cm)
    else:
        raise EmptyInputError(f"fold {fold}: test split is empty")
    return FoldResult(model, report, best_epoch, best_key[0], history, cm)


# ---------------------------------------------------------------------------
# experiments


@dataclasses.dataclass
class ExperimentReport:
    folds: list  # per-fold dicts: fold, speakers, best_epoch, metrics
    aggregate: dict
    pooled: dict
    model_stats: ModelStats
    config: dict
    labels: list
    wall_clock_s: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "folds": self.folds,
            "aggregate": self.aggregate,
            "pooled": self.pooled,
            "model_stats": self.model_stats.to_dict(),
            "config": self.config,
            "labels": self.labels,
        }
        if timing:
            d["wall_clock_s"] = self.wall_clock_s
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["folds"], d["aggregate"], d["pooled"], ModelStats.from_dict(d["model_stats"]),
                   d["config"], d["labels"], d.get("wall_clock_s", 0.0))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls.from_dict(json.loads(text))

    def fold_metrics(self) -> list:
        return [MetricsReport.from_dict(f["metrics"]) for f in self.folds]


@dataclasses.dataclass
class ExperimentResult:
    report: ExperimentReport
    model: object  # best-validation model over all folds
    fold_results: list


def _aggregate(reports) -> dict:
    out = {}
    for key in ("ua", "wa", "f1"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[f"{key}_mean"] = float(vals.mean())
        out[f"{key}_std"] = float(vals.std())
    return out


def _fold_job(args):
    model_cfg, train_cfg, data, fold = args
    tune_allocator()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = train_fold(model_cfg, train_cfg, data, fold)
    return result, [str(w.message) for w in caught]


def run_experiment(manifest: DatasetManifest, model_cfg: ModelConfig, train_cfg: TrainConfig, *,
                   stft: StftConfig = StftConfig(), mel: MelConfig = MelConfig(), cache_dir=None,
                   jobs: int = 1, features=None, log=None) -> ExperimentResult:
    """Run every fold of the speaker-disjoint plan and aggregate.

    Headline numbers are means of per-fold metrics; the pooled confusion
    matrix over all test folds is reported too.  ``features`` may carry
    precomputed ``(x, y)`` for the manifest rows.
    """
    start = time.perf_counter()
    tune_allocator()
    model_cfg = model_cfg.with_classes(manifest.num_classes)
    plan = plan_folds(manifest, train_cfg.folds, train_cfg.seed)
    if features is None:
        features = manifest_features(manifest, stft, mel, train_cfg.input_seconds, cache_dir, jobs)
    x, y = features

    jobs_args = []
    for i, (train_spk, val_spk, test_spk) in enumerate(plan.folds):
        tr, va, te = (manifest.subset(s) for s in (train_spk, val_spk, test_spk))
        data = FoldData(x[tr], y[tr], x[va], y[va], x[te], y[te], list(manifest.label_set))
        jobs_args.append((model_cfg, train_cfg, data, i))

    results = [None] * len(jobs_args)
    if jobs > 1 and len(jobs_args) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_fold_job, a): a[3] for a in jobs_args}
            for fut in concurrent.futures.as_completed(futures):
                i = futures[fut]
                try:
                    results[i] = fut.result()
                except Exception as exc:
                    raise FoldError(i, f"{type(exc).__name__}: {exc}") from exc
    else:
        for a in jobs_args:
            try:
                results[a[3]] = _fold_job(a)
            except Exception as exc:
                raise FoldError(a[3], f"{type(exc).__name__}: {exc}") from exc
            if log is not None:
                r = results[a[3]][0]
                log(f"fold {a[3]}: test UA {r.report.ua:.4f} (best epoch {r.best_epoch})")

    fold_results = []
    for i, (res, msgs) in enumerate(results):
        for m in msgs:
            warnings.warn(m, RuntimeWarning, stacklevel=2)
        fold_results.append(res)
    fold_dicts = []
    for i, res in enumerate(fold_results):
        tr, va, te = plan.folds[i]
        fold_dicts.append({
            "fold": i,
            "train_speakers": tr,
            "val_speakers": va,
            "test_speakers": te,
            "best_epoch": res.best_epoch,
            "best_val_ua": res.best_val_ua,
            "metrics": res.report.to_dict(),
        })
    pooled_cm = fold_results[0].test_confusion
    for res in fold_results[1:]:
        pooled_cm = pooled_cm + res.test_confusion
    # exported model: best validation UA, earliest fold on ties
    best = max(range(len(fold_results)), key=lambda i: (fold_results[i].best_val_ua, -i))
    model = fold_results[best].model
    model.meta.update(fold=best)

    shape = input_shape_for(train_cfg.input_seconds, model_cfg.input_mfcc, stft.hop, stft.frame_len)
    report = ExperimentReport(
        folds=fold_dicts,
        aggregate=_aggregate([r.report for r in fold_results]),
        pooled=metrics(pooled_cm).to_dict(),
        model_stats=model_stats(model, shape),
        config={"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                "stft": dataclasses.asdict(stft), "mel": dataclasses.asdict(mel), "k": plan.k},
        labels=list(manifest.label_set),
        wall_clock_s=time.perf_counter() - start,
    )
    return ExperimentResult(report, model, fold_results)


def ablate_paths(manifest: DatasetManifest, train_cfg: TrainConfig, model_cfg: ModelConfig = ModelConfig(),
                 **kw) -> list:
    """Compare single-path Body I variants (matched filter count) with all paths.

    Returns one row per configuration: ``h``, ``v``, ``l`` and the full
    model, each with UA/WA/F1 means and the parameter count.
    """
    x_y = kw.pop("features", None)
    if x_y is None:
        x_y = manifest_features(manifest, kw.get("stft", StftConfig()), kw.get("mel", MelConfig()),
                                train_cfg.input_seconds, kw.get("cache_dir"), kw.get("jobs", 1))
    variants = [(role, single_path_config(model_cfg, role)) for role in ("h", "v", "l")]
    variants.append(("+".join(p.role for p in model_cfg.paths), model_cfg))
    rows = []
    for name, cfg in variants:
        res = run_experiment(manifest, cfg, train_cfg, features=x_y, **kw)
        agg = res.report.aggregate
        rows.append({"paths": name, "ua": agg["ua_mean"], "wa": agg["wa_mean"], "f1": agg["f1_mean"],
                     "n_params": res.report.model_stats.n_params})
    return rows


# ---------------------------------------------------------------------------
# synthetic corpus


def class_center_hz(c: int, num_classes: int) -> float:
    """Chirp centre for class ``c``: log-spaced from 300 Hz to 6 kHz."""
    return 300.0 * 20.0 ** (c / (num_classes - 1))


def _band_noise(rng, n: int, sr: int, lo: float, hi: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(f < lo) | (f > hi)] = 0.0
    out = np.fft.irfft(spec, n)
    return out / (np.sqrt(np.mean(out ** 2)) + 1e-12)


def synth_clip(c: int, num_classes: int, rng, *, pitch: float = 1.0, seconds: float = 3.0,
               sr: int = 16000) -> np.ndarray:
    """One clip of class ``c``: AM chirp (±10% sweep around the class centre) over band noise."""
    n = int(round(seconds * sr))
    t = np.arange(n) / sr
    fc = class_center_hz(c, num_classes) * pitch
    f0, f1 = 0.9 * fc, 1.1 * fc
    if rng.random() < 0.5:
        f0, f1 = f1, f0
    phase = 2 * np.pi * (f0 * t + (f1 - f0) * t ** 2 / (2 * seconds)) + rng.uniform(0, 2 * np.pi)
    am_rate = 2.0 + 2.0 * c
    envelope = 1.0 + 0.6 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    tone = envelope * np.sin(phase)
    tone /= np.sqrt(np.mean(tone ** 2))
    noise = _band_noise(rng, n, sr, 100.0, 7000.0)
    x = tone + 0.3 * noise
    return 0.9 * x / np.max(np.abs(x))


def synth_dataset(out_dir, num_classes: int = 4, per_class: int = 50, seed: int = 0, *, n_speakers: int = 10,
                  seconds: float = 3.0) -> DatasetManifest:
    """Write a separable ``num_classes``-way corpus of 16 kHz PCM16 clips plus ``manifest.csv``.

    Speakers are assigned by a seeded shuffle that spreads every class
    evenly over the speaker pool; each speaker has a fixed pitch factor.
    """
    if num_classes < 2:
        raise ValueError("synthetic corpus needs at least 2 classes")
    if n_speakers < 1 or per_class < 1:
        raise ValueError("n_speakers and per_class must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    speakers = [f"spk{s:02d}" for s in range(n_speakers)]
    pitch = {s: float(p) for s, p in zip(speakers, rng.uniform(0.93, 1.07, n_speakers))}
    labels = [f"class{c:02d}" for c in range(num_classes)]
    entries = []
    for c, label in enumerate(labels):
        assigned = [speakers[i % n_speakers] for i in rng.permutation(per_class)]
        for j, spk in enumerate(assigned):
            samples = synth_clip(c, num_classes, rng, pitch=pitch[spk], seconds=seconds)
            name = f"{label}_{j:03d}.wav"
            write_wav(out / name, samples, 16000)
            entries.append(ManifestEntry(str(out / name), label, spk))
    write_manifest(out / "manifest.csv", entries)
    return DatasetManifest(entries, labels)


__all__ = [
    "FoldPlan", "plan_folds", "TrainConfig", "FoldData", "FoldResult", "train_fold", "ExperimentReport",
    "ExperimentResult", "run_experiment", "ablate_paths", "synth_dataset", "synth_clip", "class_center_hz",
    "clip_features", "load_features", "manifest_features", "feature_key", "prepare_input", "tune_allocator",
]
