import csv
import hashlib
import json

import numpy as np
import pytest

from gcnfuse.experiments import (
    ExperimentConfig,
    SweepGrid,
    build_fold_graphs,
    emit_report,
    run_cv,
    run_sweep,
    stratified_folds,
)
from gcnfuse.graph import fit_imputation, fit_scaling, impute_metadata
from gcnfuse.synthetic import (
    SyntheticSpec,
    centroids,
    generate_synthetic,
    load_dataset,
    save_dataset,
)

FAST = dict(use_encoder=False, iterations=15, folds=3, hidden=(8,))


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SyntheticSpec(per_class=30, image_size=16, seed=3))


def test_generator_is_deterministic():
    a = generate_synthetic(SyntheticSpec(per_class=10, seed=1))
    b = generate_synthetic(SyntheticSpec(per_class=10, seed=1))
    assert np.array_equal(a.images, b.images) and np.array_equal(a.features, b.features)
    assert a.metadata.columns == b.metadata.columns
    c = generate_synthetic(SyntheticSpec(per_class=10, seed=2))
    assert not np.array_equal(a.images, c.images)


def test_generator_contract():
    d = generate_synthetic(SyntheticSpec(n_classes=3, per_class=20, image_size=16))
    assert d.images.shape == (60, 16, 16) and d.images.min() >= 0 and d.images.max() <= 1
    assert np.bincount(d.labels).tolist() == [20, 20, 20]
    assert len(d.metadata.fields) == 10 and d.metadata.has_missing()
    with pytest.raises(ValueError):
        SyntheticSpec(metadata_signal=0.3)


@pytest.mark.parametrize("n_classes", [2, 3])
def test_nearest_centroid_oracle_at_four_sigma(n_classes):
    spec = SyntheticSpec(n_classes=n_classes, per_class=200, separation=4.0, seed=11)
    d = generate_synthetic(spec)
    c = centroids(spec)
    dist = ((d.features[:, None, :] - c[None]) ** 2).sum(axis=2)
    assert (dist.argmin(axis=1) == d.labels).mean() >= 0.99


def test_zero_separation_is_indistinguishable():
    spec = SyntheticSpec(separation=0.0, per_class=400, seed=2)
    d = generate_synthetic(spec)
    assert not centroids(spec).any()
    gap = np.abs(d.features[d.labels == 0].mean(0) - d.features[d.labels == 1].mean(0))
    assert gap.max() < 0.25


def test_dataset_round_trip(tmp_path, small):
    save_dataset(small, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(back.images, small.images)
    assert np.array_equal(back.labels, small.labels)
    assert np.array_equal(back.features, small.features)
    assert back.metadata.columns == small.metadata.columns


def test_five_folds_of_150_per_class():
    labels = np.repeat([0, 1], 150)
    folds = stratified_folds(labels, 5, seed=0)
    assert [len(f) for f in folds] == [60] * 5
    for f in folds:
        assert np.bincount(labels[f]).tolist() == [30, 30]
    assert np.array_equal(np.sort(np.concatenate(folds)), np.arange(300))


@pytest.mark.parametrize("seed", range(5))
def test_folds_partition_and_stratify(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, 97)
    folds = stratified_folds(labels, 4, seed)
    assert np.array_equal(np.sort(np.concatenate(folds)), np.arange(97))
    for f in folds:
        expected = np.bincount(labels, minlength=3) * len(f) / 97
        assert np.all(np.abs(np.bincount(labels[f], minlength=3) - expected) <= 1 + 1e-9)


def test_folds_reject_missing_class():
    with pytest.raises(ValueError, match="missing a class"):
        stratified_folds([0, 0, 0, 0, 1], 3)


def test_no_leakage(small):
    folds = stratified_folds(small.labels, 3, 0)
    test_idx = folds[0]
    train_idx = np.setdiff1d(np.arange(small.n), test_idx)
    feats = small.features
    tr, te, scaling = build_fold_graphs(small, train_idx, test_idx, feats[train_idx], feats[test_idx], 0.5)
    assert tr.n == len(train_idx) and te.n == len(test_idx)
    assert tr.train_mask.all() and te.test_mask.all()
    own = fit_scaling(impute_metadata(small.metadata.subset(train_idx), fit_imputation(small.metadata, train_idx)))
    digest = lambda s: hashlib.sha256(json.dumps(s, sort_keys=True).encode()).hexdigest()
    assert digest(scaling) == digest(own)
    # corrupting test rows changes nothing on the training side
    cols = {k: list(v) for k, v in small.metadata.columns.items()}
    for i in test_idx:
        cols["age"][i] = 999.0
    tampered = type(small)(small.images, small.features, type(small.metadata)(cols), small.labels)
    tr2, _, scaling2 = build_fold_graphs(tampered, train_idx, test_idx, feats[train_idx], feats[test_idx], 0.5)
    assert digest(scaling2) == digest(scaling)
    assert np.array_equal(tr2.features, tr.features)


def test_run_cv_averages(small):
    res = run_cv(small, ExperimentConfig(**FAST))
    accs = [f.report.overall_accuracy for f in res.folds]
    assert abs(res.accuracy - sum(accs) / len(accs)) <= 1e-12
    assert sorted(np.concatenate([f.test_idx for f in res.folds]).tolist()) == list(range(small.n))
    for f in res.folds:
        assert len(f.state.loss) == 15
        assert not set(f.train_idx) & set(f.test_idx)


def test_run_cv_with_encoder_path():
    d = generate_synthetic(SyntheticSpec(per_class=12, image_size=16, seed=4))
    res = run_cv(d, ExperimentConfig(iterations=3, folds=2, encoder_epochs=1, feature_dim=8, hidden=(4,)))
    assert len(res.folds) == 2 and 0 <= res.accuracy <= 1


def test_sweep_reduces_to_cv_and_density_monotone(small):
    base = ExperimentConfig(**FAST)
    one = run_sweep(small, SweepGrid((0.5,), ("mean",), iterations=15, folds=3), base)
    direct = run_cv(small, ExperimentConfig(**dict(FAST, alpha=0.5)))
    assert one.cells[0].accuracy == direct.accuracy
    grid = SweepGrid((0.3, 0.5, 0.7, 0.9), ("mean", "max"), iterations=5, folds=3, seeds=(0, 1))
    res = run_sweep(small, grid, base)
    dens = [res.density(a) for a in grid.alphas]
    assert all(b <= a for a, b in zip(dens, dens[1:]))
    assert len(res.cells) == 8 and all(len(c.accuracies) == 2 for c in res.cells)


def test_sweep_grid_validation():
    with pytest.raises(ValueError, match="increasing"):
        SweepGrid(alphas=(0.6, 0.5))
    with pytest.raises(ValueError, match=r"\[-1, 1\]"):
        SweepGrid(alphas=(0.5, 1.5))
    with pytest.raises(ValueError, match="median"):
        SweepGrid(aggregations=("median",))


def test_cv_report_files(tmp_path, small):
    res = run_cv(small, ExperimentConfig(**FAST))
    emit_report(res, tmp_path / "a")
    out = tmp_path / "a"
    for name in ("metrics.csv", "curves.csv", "confusion_0.csv", "confusion_all.csv", "summary.txt",
                 "report.json", "figures/curves.png", "figures/confusion.png"):
        assert (out / name).exists(), name
    with open(out / "curves.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 15 and list(rows[0]) == ["iteration", "seconds", "loss", "train_accuracy", "test_accuracy"]
    with open(out / "confusion_all.csv") as fh:
        counts = [list(map(int, r[1:])) for r in list(csv.reader(fh))[1:]]
    assert sum(map(sum, counts)) == small.n
    emit_report(res, tmp_path / "b")
    for p in sorted(out.rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(out)).read_bytes(), p.name


def test_timing_recorded_when_requested(small):
    res = run_cv(small, ExperimentConfig(**dict(FAST, iterations=4, record_time=True)))
    secs = res.folds[0].state.seconds
    assert len(secs) == 4 and all(b >= a for a, b in zip(secs, secs[1:]))


def test_sweep_summary_names_table_maximum(tmp_path, small):
    grid = SweepGrid((0.4, 0.7), ("mean", "max"), iterations=10, folds=3)
    res = run_sweep(small, grid, ExperimentConfig(**FAST))
    emit_report(res, tmp_path, figures=False)
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    top = max(rows, key=lambda r: float(r["accuracy"]))
    summary = (tmp_path / "summary.txt").read_text()
    assert f"best alpha={top['alpha']} aggregation={top['aggregation']} accuracy={top['accuracy']}" in summary


def test_report_to_unwritable_path(tmp_path, small):
    res = run_cv(small, ExperimentConfig(**dict(FAST, iterations=2)))
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match=str(blocker)):
        emit_report(res, blocker / "sub")
