"""Cross-validation, threshold x aggregation sweeps and report files."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gcn
from . import numeric as nm
from .encoder import EncoderConfig, EncoderModel, EncoderTrainConfig, encode, train_encoder
from .graph import (
    InstanceGraph,
    assemble_graph,
    build_similarity,
    fit_imputation,
    fit_scaling,
    impute_metadata,
    threshold_graph,
)
from .metrics import METRICS, EvalReport, evaluate
from .synthetic import SyntheticData, SyntheticSpec, generate_synthetic  # noqa: F401


@dataclass
class ExperimentConfig:
    alpha: float = 0.6
    aggregation: str = "mean"
    hidden: tuple[int, ...] = (50, 20)
    iterations: int = 150
    learning_rate: float = 0.05
    folds: int = 5
    seed: int = 0
    use_encoder: bool = True
    encoder_epochs: int = 10
    encoder_lr: float = 0.05
    feature_dim: int = 64
    record_time: bool = False

    def __post_init__(self):
        if not -1.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [-1, 1], got {self.alpha}")
        if self.aggregation not in gcn.AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        self.hidden = tuple(int(w) for w in self.hidden)


def stratified_folds(labels, k: int, seed: int = 0) -> list[np.ndarray]:
    """Sorted test-index arrays; each class is shuffled then dealt round-robin."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("need at least 2 folds")
    rng = nm.make_rng(seed, "folds")
    buckets: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(members.size)]
        for i, idx in enumerate(members):
            buckets[(offset + i) % k].append(int(idx))
        offset += members.size
    folds = [np.array(sorted(b), dtype=np.int64) for b in buckets]
    classes = set(np.unique(labels).tolist())
    for f, test in enumerate(folds):
        if set(labels[test].tolist()) != classes:
            raise ValueError(f"fold {f} is missing a class; too few instances to stratify into {k} folds")
    return folds


def fold_features(data: SyntheticData, train_idx, test_idx, config: ExperimentConfig, fold: int):
    """Encoder features for one fold, the encoder fit on the training split only."""
    if not config.use_encoder:
        if data.features is None:
            raise ValueError("encoder bypass requested but the data carries no feature matrix")
        return data.features[train_idx], data.features[test_idx]
    h, w = data.images.shape[1:]
    enc_cfg = EncoderConfig(h, w, feature_dim=config.feature_dim, n_classes=data.n_classes)
    model = EncoderModel.create(enc_cfg, nm.derive_seed(config.seed, "encoder", fold))
    train_cfg = EncoderTrainConfig(
        epochs=config.encoder_epochs,
        learning_rate=config.encoder_lr,
        seed=nm.derive_seed(config.seed, "encoder-train", fold),
    )
    model, _ = train_encoder(model, data.images[train_idx], data.labels[train_idx], train_cfg)
    return encode(model, data.images[train_idx]), encode(model, data.images[test_idx])


def build_fold_graphs(data: SyntheticData, train_idx, test_idx, train_feats, test_feats, alpha):
    """Separate training and testing graphs; imputation and scaling fit on training rows."""
    fills = fit_imputation(data.metadata, train_idx)
    train_meta = impute_metadata(data.metadata.subset(train_idx), fills)
    test_meta = impute_metadata(data.metadata.subset(test_idx), fills)
    scaling = fit_scaling(train_meta)
    n_tr, n_te = len(train_idx), len(test_idx)
    train_graph = assemble_graph(
        threshold_graph(build_similarity(train_feats), alpha), train_meta,
        data.labels[train_idx], train_mask=np.ones(n_tr, bool), scaling=scaling,
    )
    test_graph = assemble_graph(
        threshold_graph(build_similarity(test_feats), alpha), test_meta,
        data.labels[test_idx], test_mask=np.ones(n_te, bool), scaling=scaling,
    )
    return train_graph, test_graph, scaling


@dataclass
class FoldResult:
    fold: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    report: EvalReport
    state: gcn.TrainState
    train_density: float
    test_density: float
    scaling: dict
    model: gcn.GcnModel


def run_fold(data, train_idx, test_idx, features, config: ExperimentConfig, fold: int) -> FoldResult:
    train_graph, test_graph, scaling = build_fold_graphs(
        data, train_idx, test_idx, *features, config.alpha
    )
    widths = [train_graph.features.shape[1], *config.hidden, data.n_classes]
    model = gcn.GcnModel.create(widths, config.aggregation, nm.derive_seed(config.seed, "gcn", fold))
    model, state = gcn.train(
        model, train_graph,
        gcn.TrainConfig(config.iterations, config.learning_rate, config.record_time),
        eval_graph=test_graph,
    )
    pred, _ = gcn.predict(model, test_graph)
    report = evaluate(test_graph.labels, pred, data.n_classes)
    return FoldResult(
        fold, np.asarray(train_idx), np.asarray(test_idx), report, state,
        train_graph.density(), test_graph.density(), scaling, model,
    )


@dataclass
class CVResult:
    config: ExperimentConfig
    folds: list[FoldResult]
    mean: dict[str, float] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.mean["overall_accuracy"]


def _summarize(folds: list[FoldResult]) -> dict[str, float]:
    out = {"overall_accuracy": float(np.mean([f.report.overall_accuracy for f in folds]))}
    for name in METRICS:
        out[f"macro_{name}"] = float(np.mean([f.report.macro[name] for f in folds]))
    n_classes = len(folds[0].report.per_class)
    for c in range(n_classes):
        for name in METRICS:
            out[f"class{c}_{name}"] = float(np.mean([getattr(f.report.per_class[c], name) for f in folds]))
    out["train_density"] = float(np.mean([f.train_density for f in folds]))
    out["test_density"] = float(np.mean([f.test_density for f in folds]))
    return out


def run_cv(data: SyntheticData, config: ExperimentConfig | None = None, features=None) -> CVResult:
    """k-fold stratified CV; ``features`` optionally caches per-fold encoder output."""
    config = config or ExperimentConfig()
    tests = stratified_folds(data.labels, config.folds, config.seed)
    results = []
    for f, test_idx in enumerate(tests):
        train_idx = np.setdiff1d(np.arange(data.n), test_idx)
        if len(np.unique(data.labels[train_idx])) != data.n_classes:
            raise ValueError(f"training split of fold {f} is missing a class")
        feats = features[f] if features is not None else fold_features(data, train_idx, test_idx, config, f)
        results.append(run_fold(data, train_idx, test_idx, feats, config, f))
    return CVResult(config, results, _summarize(results))


def cv_features(data: SyntheticData, config: ExperimentConfig) -> list:
    """Per-fold (train, test) features, reusable across alpha/aggregation cells."""
    tests = stratified_folds(data.labels, config.folds, config.seed)
    out = []
    for f, test_idx in enumerate(tests):
        train_idx = np.setdiff1d(np.arange(data.n), test_idx)
        out.append(fold_features(data, train_idx, test_idx, config, f))
    return out


@dataclass
class SweepGrid:
    alphas: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9)
    aggregations: tuple[str, ...] = gcn.AGGREGATIONS
    iterations: int = 150
    folds: int = 5
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if not self.alphas or any(b <= a for a, b in zip(self.alphas, self.alphas[1:])):
            raise ValueError("alpha values must be strictly increasing")
        if any(not -1.0 <= a <= 1.0 for a in self.alphas):
            raise ValueError("alpha values must lie in [-1, 1]")
        for kind in self.aggregations:
            if kind not in gcn.AGGREGATIONS:
                raise ValueError(f"unknown aggregation {kind!r}")
        if not self.seeds:
            raise ValueError("need at least one seed")


@dataclass
class SweepCell:
    alpha: float
    aggregation: str
    accuracy: float
    accuracies: list[float]
    density: float
    runs: list[CVResult] = field(repr=False, default_factory=list)


@dataclass
class SweepResult:
    grid: SweepGrid
    cells: list[SweepCell]

    def cell(self, alpha: float, aggregation: str) -> SweepCell:
        for c in self.cells:
            if c.alpha == alpha and c.aggregation == aggregation:
                return c
        raise KeyError((alpha, aggregation))

    def best(self) -> SweepCell:
        # first maximum in grid order
        return max(self.cells, key=lambda c: c.accuracy)

    def density(self, alpha: float) -> float:
        return self.cell(alpha, self.grid.aggregations[0]).density


def run_sweep(data: SyntheticData, grid: SweepGrid, base: ExperimentConfig | None = None) -> SweepResult:
    """One CV per (alpha, aggregation, seed); encoders trained once per seed and fold."""
    base = base or ExperimentConfig()
    runs: dict[tuple, list[CVResult]] = {}
    for seed in grid.seeds:
        seed_cfg = ExperimentConfig(**dict(asdict(base), seed=seed, folds=grid.folds, iterations=grid.iterations))
        feats = cv_features(data, seed_cfg)
        for alpha in grid.alphas:
            for kind in grid.aggregations:
                cfg = ExperimentConfig(**dict(asdict(seed_cfg), alpha=alpha, aggregation=kind))
                runs.setdefault((alpha, kind), []).append(run_cv(data, cfg, feats))
    cells = []
    for alpha in grid.alphas:
        for kind in grid.aggregations:
            cv = runs[(alpha, kind)]
            accs = [r.accuracy for r in cv]
            dens = float(np.mean([r.mean["train_density"] for r in cv]))
            cells.append(SweepCell(alpha, kind, float(np.mean(accs)), accs, dens, cv))
    return SweepResult(grid, cells)


# -- report files ---------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _mean_curve(states: list[gcn.TrainState]):
    n_iter = len(states[0].loss)
    rows = []
    for it in range(n_iter):
        secs = [s.seconds[it] for s in states if len(s.seconds) > it]
        test = [s.test_accuracy[it] for s in states if len(s.test_accuracy) > it]
        rows.append((
            it + 1,
            float(np.mean(secs)) if secs else "",
            float(np.mean([s.loss[it] for s in states])),
            float(np.mean([s.train_accuracy[it] for s in states])),
            float(np.mean(test)) if test else "",
        ))
    return rows


CURVE_HEADER = ("iteration", "seconds", "loss", "train_accuracy", "test_accuracy")


def _emit_cv(result: CVResult, out: Path, figures: bool) -> list[Path]:
    written = []
    rows = []
    for f in result.folds:
        rows.extend(f.report.rows("gcn", f.fold))
    for key, value in result.mean.items():
        rows.append(("gcn", "mean", "summary", key, value))
    _write_csv(out / "metrics.csv", ("model", "fold", "class", "metric", "value"), rows)
    written.append(out / "metrics.csv")

    _write_csv(out / "curves.csv", CURVE_HEADER, _mean_curve([f.state for f in result.folds]))
    written.append(out / "curves.csv")
    for f in result.folds:
        p = out / f"curves_{f.fold}.csv"
        _write_csv(p, CURVE_HEADER, _mean_curve([f.state]))
        written.append(p)
        p = out / f"confusion_{f.fold}.csv"
        n = f.report.confusion.shape[0]
        _write_csv(p, ["true\\pred"] + [str(c) for c in range(n)],
                   [[str(c)] + f.report.confusion[c].tolist() for c in range(n)])
        written.append(p)
    total = sum(f.report.confusion for f in result.folds)
    p = out / "confusion_all.csv"
    _write_csv(p, ["true\\pred"] + [str(c) for c in range(total.shape[0])],
               [[str(c)] + total[c].tolist() for c in range(total.shape[0])])
    written.append(p)

    report = {
        "folds": [dict(f.report.to_dict(), fold=f.fold, train_density=f.train_density,
                       test_density=f.test_density) for f in result.folds],
        "mean": result.mean,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    written.append(out / "report.json")

    m = result.mean
    lines = [
        f"cross-validation: {len(result.folds)} folds, aggregation={result.config.aggregation}, "
        f"alpha={result.config.alpha!r}, hidden={list(result.config.hidden)}, "
        f"iterations={result.config.iterations}",
        f"mean accuracy   {m['overall_accuracy']:.4f}",
        f"macro precision {m['macro_precision']:.4f}",
        f"macro recall    {m['macro_recall']:.4f}",
        f"macro f1        {m['macro_f1']:.4f}",
        f"graph density   train {m['train_density']:.4f}  test {m['test_density']:.4f}",
        "per-fold accuracy " + " ".join(f"{f.report.overall_accuracy:.4f}" for f in result.folds),
    ]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    written.append(out / "summary.txt")

    if figures:
        from . import plotting

        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        written.append(plotting.plot_curves([f.state for f in result.folds], fig_dir / "curves.png"))
        written.append(plotting.plot_confusion(total, fig_dir / "confusion.png"))
    return written


def _emit_sweep(result: SweepResult, out: Path, figures: bool) -> list[Path]:
    rows = [
        (c.alpha, c.aggregation, c.accuracy,
         float(np.std(c.accuracies)), len(c.accuracies), c.density)
        for c in result.cells
    ]
    _write_csv(out / "sweep.csv", ("alpha", "aggregation", "accuracy", "accuracy_std", "seeds", "density"), rows)
    metric_rows = []
    for c in result.cells:
        for s, run in zip(result.grid.seeds, c.runs):
            for key, value in run.mean.items():
                metric_rows.append((f"gcn-{c.aggregation}-a{c.alpha!r}", f"seed{s}", "summary", key, value))
    _write_csv(out / "metrics.csv", ("model", "fold", "class", "metric", "value"), metric_rows)
    best = result.best()
    lines = [
        f"sweep: alphas={list(result.grid.alphas)} aggregations={list(result.grid.aggregations)} "
        f"seeds={list(result.grid.seeds)} folds={result.grid.folds}",
        f"best alpha={best.alpha!r} aggregation={best.aggregation} accuracy={best.accuracy!r}",
        "",
        "alpha    density  " + "  ".join(f"{k:>7}" for k in result.grid.aggregations),
    ]
    for a in result.grid.alphas:
        accs = "  ".join(f"{result.cell(a, k).accuracy:7.4f}" for k in result.grid.aggregations)
        lines.append(f"{a:<8.3f} {result.density(a):7.4f}  {accs}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    written = [out / "sweep.csv", out / "metrics.csv", out / "summary.txt"]
    if figures:
        from . import plotting

        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        written.append(plotting.plot_sweep(result, fig_dir / "sweep.png"))
    return written


def emit_report(result, out_dir, figures: bool = True) -> list[Path]:
    """Write report files for a :class:`CVResult` or :class:`SweepResult` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc.strerror or exc}") from exc
    if isinstance(result, CVResult):
        if not result.folds:
            raise ValueError("no folds to report")
        return _emit_cv(result, out, figures)
    if isinstance(result, SweepResult):
        if not result.cells:
            raise ValueError("empty sweep")
        return _emit_sweep(result, out, figures)
    raise TypeError(f"cannot report {type(result).__name__}")
