import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_CFG
from sernet.audio import DatasetManifest, ManifestEntry, read_wav
from sernet.errors import InfeasibleSplitError
from sernet.harness import (ExperimentReport, FoldData, TrainConfig, ablate_paths, class_center_hz, clip_features,
                            feature_key, load_features, manifest_features, plan_folds, prepare_input, run_experiment,
                            synth_dataset, train_fold)
from sernet.mfcc import MelConfig, StftConfig
from sernet.model import ModelConfig, build_model, count_params, single_path_config

SECONDS = 0.5


def _manifest(n_speakers, per_speaker=2):
    entries = [ManifestEntry(f"s{s}_{j}.wav", "ab"[j % 2], f"spk{s}") for s in range(n_speakers)
               for j in range(per_speaker)]
    return DatasetManifest(entries, ["a", "b"])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = synth_dataset(root, num_classes=3, per_class=8, seed=1, n_speakers=4, seconds=SECONDS)
    x, y = manifest_features(manifest, StftConfig(), MelConfig(), SECONDS)
    return manifest, (x, y)


def _tiny_train(**kw):
    base = dict(epochs=2, batch_size=8, input_seconds=SECONDS, folds=4)
    base.update(kw)
    return TrainConfig(**base)


# -- fold planning ---------------------------------------------------------------------


@pytest.mark.parametrize("n_speakers", [10, 20, 3, 13])
def test_folds_partition_speakers(n_speakers):
    plan = plan_folds(_manifest(n_speakers), 10, seed=4)
    assert plan.k == min(10, n_speakers) == len(plan.folds)
    everyone = set(_manifest(n_speakers).speakers)
    tests = [s for _, _, te in plan.folds for s in te]
    assert sorted(tests) == sorted(everyone)  # every speaker is tested exactly once
    for train, val, test in plan.folds:
        assert not (set(train) & set(val) or set(train) & set(test) or set(val) & set(test))
        assert set(train) | set(val) | set(test) == everyone
        assert val and test


@given(st.integers(3, 30), st.integers(3, 12), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_fold_plan_property(n_speakers, k, seed):
    plan = plan_folds(_manifest(n_speakers), k, seed)
    sizes = [len(s) for s in plan.sessions]
    assert max(sizes) - min(sizes) <= 1
    assert plan_folds(_manifest(n_speakers), k, seed) == plan


def test_infeasible_split():
    with pytest.raises(InfeasibleSplitError):
        plan_folds(_manifest(2), 10)
    with pytest.raises(InfeasibleSplitError):
        plan_folds(_manifest(5), 2)


def test_train_config_validation_and_schedule():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.loss, cfg.gamma) == (300, 32, "focal", 2.0)
    assert cfg.lr(0) == 1e-4 and cfg.lr(50) == pytest.approx(1e-4 * np.exp(-0.15))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(epochs=-1), dict(batch_size=0), dict(loss="mse"), dict(gamma=-1.0), dict(input_seconds=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- synthetic corpus and features -------------------------------------------------------


def test_synth_dataset_layout(tmp_path):
    m = synth_dataset(tmp_path / "a", num_classes=4, per_class=50, seed=3, seconds=0.1)
    assert len(m.entries) == 200 and len(m.speakers) == 10 and m.label_set == [f"class0{i}" for i in range(4)]
    for spk in m.speakers:  # every speaker holds every class equally often
        labels = [e.label for e in m.entries if e.speaker_id == spk]
        assert sorted(labels) == sorted(m.label_set * 5)
    clip = read_wav(m.entries[0].path)
    assert clip.sample_rate == 16000 and len(clip.samples) == 1600
    assert (tmp_path / "a" / "manifest.csv").exists()


def test_synth_dataset_deterministic(tmp_path):
    a = synth_dataset(tmp_path / "a", num_classes=2, per_class=5, seed=9, n_speakers=5, seconds=0.1)
    b = synth_dataset(tmp_path / "b", num_classes=2, per_class=5, seed=9, n_speakers=5, seconds=0.1)
    for ea, eb in zip(a.entries, b.entries):
        assert open(ea.path, "rb").read() == open(eb.path, "rb").read()
        assert (ea.label, ea.speaker_id) == (eb.label, eb.speaker_id)


def test_class_centres():
    assert class_center_hz(0, 4) == pytest.approx(300.0)
    assert class_center_hz(3, 4) == pytest.approx(6000.0)


def test_synthetic_classes_separable_by_one_feature(corpus):
    """A threshold stump on mean c1 beats chance, so the corpus carries class signal."""
    manifest, (x, y) = corpus
    c1 = x[:, 1, :].mean(axis=1)
    best = 0.0
    for cls in range(3):
        for thr in np.unique(c1):
            pred = c1 >= thr
            for sign in (pred, ~pred):
                best = max(best, np.mean(sign == (y == cls)))
    assert best > 0.8


def test_feature_cache(tmp_path, corpus):
    manifest, (x, _) = corpus
    path = manifest.entries[0].path
    a = clip_features(path, seconds=SECONDS, cache_dir=tmp_path)
    files = list(tmp_path.glob("*.mfcc"))
    assert len(files) == 1 and files[0].stem == feature_key(path, StftConfig(), MelConfig(), SECONDS)
    np.testing.assert_array_equal(a, clip_features(path, seconds=SECONDS, cache_dir=tmp_path))
    np.testing.assert_array_equal(a, x[0])
    assert feature_key(path, StftConfig(), MelConfig(), 3.0) != files[0].stem


def test_load_features_reports_bad_files(tmp_path, corpus):
    manifest, _ = corpus
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"junk")
    feats, errors = load_features([manifest.entries[0].path, str(bad)], seconds=SECONDS)
    assert len(feats) == 1 and list(errors) == [str(bad)]


# -- training ------------------------------------------------------------------------------


def _fold_data(corpus, fold=0):
    manifest, (x, y) = corpus
    tr, va, te = (manifest.subset(s) for s in plan_folds(manifest, 4).folds[fold])
    return FoldData(x[tr], y[tr], x[va], y[va], x[te], y[te], manifest.label_set)


def test_train_fold_deterministic(corpus):
    data = _fold_data(corpus)
    cfg = TINY_CFG.with_classes(3)
    a = train_fold(cfg, _tiny_train(), data)
    b = train_fold(cfg, _tiny_train(), data)
    assert a.history == b.history and a.best_epoch == b.best_epoch
    for (_, ta), (_, tb) in zip(a.model.named_tensors(), b.model.named_tensors()):
        np.testing.assert_array_equal(ta.data, tb.data)


def test_zero_epochs_returns_initial_model(corpus):
    data = _fold_data(corpus)
    cfg = TINY_CFG.with_classes(3)
    res = train_fold(cfg, _tiny_train(epochs=0), data)
    assert res.best_epoch == 0 and res.history["train_loss"] == []
    fresh = build_model(cfg, rng=np.random.default_rng(np.random.SeedSequence([0, 0]).spawn(3)[0]))
    for (_, ta), (_, tb) in zip(res.model.named_tensors(), fresh.named_tensors()):
        np.testing.assert_array_equal(ta.data, tb.data)


def test_training_reduces_loss(corpus):
    res = train_fold(TINY_CFG.with_classes(3), _tiny_train(epochs=8, base_lr=3e-3), _fold_data(corpus))
    losses = res.history["train_loss"]
    assert len(losses) == 8 and losses[-1] < losses[0]
    assert 0 <= res.best_epoch <= 8
    assert len(res.history["val_ua"]) == 9  # includes the untrained model


def test_empty_class_warns(corpus):
    data = _fold_data(corpus)
    keep = data.y_train != 2
    data = dataclasses.replace(data, x_train=data.x_train[keep], y_train=data.y_train[keep])
    with pytest.warns(RuntimeWarning, match="class02"):
        train_fold(TINY_CFG.with_classes(3), _tiny_train(epochs=1), data)


def test_prepare_input_standardizes(corpus):
    _, (x, _) = corpus
    mean, std = x.mean(axis=(0, 2)), x.std(axis=(0, 2))
    out = prepare_input(x, {"feature_mean": mean.tolist(), "feature_std": std.tolist()})
    assert out.shape == x.shape + (1,) and out.dtype == np.float32
    np.testing.assert_allclose(out[..., 0].mean(axis=(0, 2)), 0, atol=1e-4)


def test_run_experiment_report(corpus):
    manifest, feats = corpus
    res = run_experiment(manifest, TINY_CFG, _tiny_train(), features=feats)
    rep = res.report
    assert len(rep.folds) == 4 and rep.config["k"] == 4
    was = [f["metrics"]["wa"] for f in rep.folds]
    assert min(was) <= rep.aggregate["wa_mean"] <= max(was)
    assert sum(map(sum, rep.pooled["confusion"])) == len(manifest.entries)
    assert rep.model_stats.n_params == count_params(res.model)
    again = ExperimentReport.from_json(rep.to_json())
    assert again.to_dict() == json.loads(rep.to_json())
    assert "wall_clock_s" not in rep.to_dict(timing=False)
    assert res.model.meta["fold"] in range(4) and res.model.meta["labels"] == manifest.label_set


def test_run_experiment_reproducible(corpus):
    manifest, feats = corpus
    a = run_experiment(manifest, TINY_CFG, _tiny_train(epochs=1), features=feats).report.to_json(timing=False)
    b = run_experiment(manifest, TINY_CFG, _tiny_train(epochs=1), features=feats).report.to_json(timing=False)
    assert a == b


def test_ablate_paths(corpus):
    manifest, feats = corpus
    rows = ablate_paths(manifest, _tiny_train(epochs=1), TINY_CFG, features=feats)
    assert [r["paths"] for r in rows] == ["h", "v", "l", "h+v+l"]
    expect = [count_params(build_model(single_path_config(TINY_CFG.with_classes(3), r))) for r in "hvl"]
    assert [r["n_params"] for r in rows[:3]] == expect
    for r in rows:
        assert 0 <= r["ua"] <= 1


def test_single_path_variants_match_default_size():
    full = count_params(build_model(ModelConfig()))
    for role in "hvl":
        assert abs(count_params(build_model(single_path_config(ModelConfig(), role))) / full - 1) < 0.05
