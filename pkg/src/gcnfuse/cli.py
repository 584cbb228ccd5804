"""``gcnfuse`` command line: one binary, one subcommand per pipeline stage.

Settings resolve as flags > config file (``--config``, flat ``key = value``)
> defaults.  Each run writes into ``<out>/<command>-<hash>/`` where the hash
covers the resolved config, and echoes that config as ``config.json``.

Exit codes: 0 success, 2 usage error, 3 input error, 4 computation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import gcn
from .encoder import (
    EncoderConfig,
    EncoderModel,
    EncoderTrainConfig,
    encode,
    load_encoder,
    read_features,
    save_encoder,
    saliency_map,
    train_encoder,
    write_features,
)
from .experiments import ExperimentConfig, SweepGrid, emit_report, run_cv, run_sweep
from .graph import (
    assemble_graph,
    build_similarity,
    fit_imputation,
    impute_metadata,
    load_graph,
    save_graph,
    threshold_graph,
)
from .metrics import evaluate
from .numeric import derive_seed
from .synthetic import SyntheticSpec, generate_synthetic, load_dataset, save_dataset

log = logging.getLogger("gcnfuse")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_COMPUTE = 0, 2, 3, 4
OUT_ENV = "GCNFUSE_OUT"
COMMANDS = ("synth", "encode", "build-graph", "train", "eval", "cv", "sweep", "saliency")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    command: str | None = None
    # inputs
    data: str | None = None
    features: str | None = None
    graph: str | None = None
    model: str | None = None
    encoder: str | None = None
    # graph + gcn
    alpha: float = 0.6
    aggregation: str = "mean"
    arch: str = "50,20"
    iters: int = 150
    lr: float = 0.05
    folds: int = 5
    seed: int = 0
    out: str = "runs"
    timing: bool = False
    figures: bool = True
    # synthetic data
    classes: int = 2
    per_class: int = 150
    separation: float = 4.0
    signal: float = 0.8
    noise: float = 1.0
    missing: float = 0.05
    image_size: int = 32
    # encoder
    encoder_epochs: int = 10
    encoder_lr: float = 0.05
    feature_dim: int = 64
    # sweep
    alphas: str = "0.5,0.6,0.7,0.8,0.9"
    aggregations: str = "mean,sum,max"
    seeds: str = "0"
    # saliency
    index: int = 0
    target_class: int = 0

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self.arch.split(",") if w.strip())

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("out")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def run_id(self) -> str:
        digest = hashlib.sha256(self.to_json().encode()).hexdigest()[:12]
        return f"{self.command}-{digest}"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw):
    kind = type(getattr(RunConfig(), key)) if getattr(RunConfig(), key) is not None else str
    if isinstance(raw, str) and kind is not str:
        token = raw.strip()
        try:
            if kind is bool:
                if token.lower() in ("1", "true", "yes", "on"):
                    return True
                if token.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError
            return kind(token)
        except ValueError:
            raise UsageError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    values = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key = value, got {line!r}")
        if key not in _FIELDS or key == "command":
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        values[key] = _coerce(key, value.strip())
    return values


def validate(cfg: RunConfig) -> RunConfig:
    def bad(msg):
        raise UsageError(msg)

    if cfg.command is not None and cfg.command not in COMMANDS:
        bad(f"unknown command {cfg.command!r}")
    if not -1.0 <= cfg.alpha <= 1.0:
        bad(f"--alpha {cfg.alpha}: must lie in [-1, 1]")
    if cfg.aggregation not in gcn.AGGREGATIONS:
        bad(f"--aggregation {cfg.aggregation}: choose from {', '.join(gcn.AGGREGATIONS)}")
    try:
        hidden = cfg.hidden
        alphas = [float(a) for a in cfg.alphas.split(",")]
        [int(s) for s in cfg.seeds.split(",")]
    except ValueError as exc:
        bad(f"cannot parse list value: {exc}")
    if any(w < 1 for w in hidden):
        bad(f"--arch {cfg.arch}: widths must be positive integers")
    if any(not -1.0 <= a <= 1.0 for a in alphas) or any(b <= a for a, b in zip(alphas, alphas[1:])):
        bad(f"--alphas {cfg.alphas}: must be strictly increasing values in [-1, 1]")
    for kind in cfg.aggregations.split(","):
        if kind not in gcn.AGGREGATIONS:
            bad(f"--aggregations {cfg.aggregations}: unknown aggregation {kind!r}")
    if cfg.iters < 0:
        bad(f"--iters {cfg.iters}: must be >= 0")
    if cfg.lr < 0 or cfg.encoder_lr < 0:
        bad("learning rates must be >= 0")
    if cfg.folds < 2:
        bad(f"--folds {cfg.folds}: must be >= 2")
    if not 2 <= cfg.classes <= 8:
        bad(f"--classes {cfg.classes}: must lie in [2, 8]")
    if cfg.per_class < 1 or cfg.encoder_epochs < 0 or cfg.feature_dim < 1:
        bad("--per-class, --feature-dim must be >= 1 and --encoder-epochs >= 0")
    if not 0.5 <= cfg.signal <= 1.0:
        bad(f"--signal {cfg.signal}: must lie in [0.5, 1]")
    if cfg.separation < 0 or cfg.noise <= 0 or not 0 <= cfg.missing < 1:
        bad("--separation must be >= 0, --noise > 0, --missing in [0, 1)")
    if cfg.image_size < 8 or cfg.image_size % 8:
        bad(f"--image-size {cfg.image_size}: must be a positive multiple of 8")
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    for name, f in _FIELDS.items():
        if name == "command":
            continue
        flag = "--" + name.replace("_", "-")
        default = f.default
        if isinstance(default, bool):
            common.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        elif name == "aggregation":
            common.add_argument(flag, dest=name, choices=gcn.AGGREGATIONS, default=None)
        else:
            kind = type(default) if default is not None else str
            common.add_argument(flag, dest=name, type=kind, default=None, metavar=name.upper())
    common.add_argument("--config", dest="config_file", default=None, help="key = value file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="gcnfuse", description="Similarity-graph GCN pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for cmd in COMMANDS:
        sub.add_parser(cmd, parents=[common])
    return parser


def parse_config(argv=None, environ=None) -> RunConfig:
    """Resolve flags over config-file values over defaults."""
    environ = os.environ if environ is None else environ
    ns = build_parser().parse_args(list(argv or []))
    values = {}
    if environ.get(OUT_ENV):
        values["out"] = environ[OUT_ENV]
    if getattr(ns, "config_file", None):
        values.update(read_config_file(ns.config_file))
    for name in _FIELDS:
        v = getattr(ns, name, None)
        if v is not None:
            values[name] = v
    return validate(RunConfig(**values))


# -- commands --------------------------------------------------------------------------


def _need(cfg: RunConfig, key: str) -> Path:
    value = getattr(cfg, key)
    if not value:
        raise InputError(f"{cfg.command} needs --{key.replace('_', '-')}")
    path = Path(value)
    if not path.exists():
        raise InputError(f"--{key.replace('_', '-')} {value}: not found")
    return path


def _experiment(cfg: RunConfig, use_encoder=True) -> ExperimentConfig:
    return ExperimentConfig(
        alpha=cfg.alpha, aggregation=cfg.aggregation, hidden=cfg.hidden, iterations=cfg.iters,
        learning_rate=cfg.lr, folds=cfg.folds, seed=cfg.seed, use_encoder=use_encoder,
        encoder_epochs=cfg.encoder_epochs, encoder_lr=cfg.encoder_lr,
        feature_dim=cfg.feature_dim, record_time=cfg.timing,
    )


def _load_data(cfg: RunConfig):
    try:
        data = load_dataset(_need(cfg, "data"))
        if cfg.features:
            feats, _ = read_features(_need(cfg, "features"))
            if len(feats) != data.n:
                raise InputError(f"{cfg.features}: {len(feats)} rows for {data.n} instances")
            data.features = feats
    except (FileNotFoundError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    return data


def cmd_synth(cfg, run):
    spec = SyntheticSpec(
        n_classes=cfg.classes, per_class=cfg.per_class, separation=cfg.separation,
        metadata_signal=cfg.signal, noise=cfg.noise, missing_rate=cfg.missing,
        image_size=cfg.image_size, seed=derive_seed(cfg.seed, "synth") % 2**32,
    )
    data = generate_synthetic(spec)
    save_dataset(data, run)
    (run / "summary.txt").write_text(
        f"{data.n} instances, {data.n_classes} classes, images {cfg.image_size}x{cfg.image_size}\n"
    )


def _train_encoder_on(cfg, data, stage="encoder"):
    h, w = data.images.shape[1:]
    model = EncoderModel.create(
        EncoderConfig(h, w, feature_dim=cfg.feature_dim, n_classes=data.n_classes),
        derive_seed(cfg.seed, stage),
    )
    return train_encoder(
        model, data.images, data.labels,
        EncoderTrainConfig(cfg.encoder_epochs, cfg.encoder_lr, seed=derive_seed(cfg.seed, stage, "train")),
    )


def cmd_encode(cfg, run):
    data = _load_data(cfg)
    model, hist = _train_encoder_on(cfg, data)
    write_features(encode(model, data.images), run / "features.csv")
    save_encoder(model, run / "encoder.npz")
    with open(run / "encoder_curve.csv", "w") as fh:
        fh.write("epoch,loss,accuracy\n")
        for e, (l, a) in enumerate(zip(hist.loss, hist.accuracy)):
            fh.write(f"{e},{l!r},{a!r}\n")
    (run / "summary.txt").write_text(
        f"encoder loss {hist.loss[0]:.4f} -> {min(hist.loss):.4f}, accuracy {max(hist.accuracy):.4f}\n"
    )


def cmd_build_graph(cfg, run):
    data = _load_data(cfg)
    if data.features is None:
        raise InputError("build-graph needs --features (or a data directory with latent.csv)")
    table = impute_metadata(data.metadata, fit_imputation(data.metadata))
    edges = threshold_graph(build_similarity(data.features), cfg.alpha)
    graph = assemble_graph(edges, table, data.labels, train_mask=np.ones(data.n, bool))
    save_graph(graph, run / "graph")
    (run / "summary.txt").write_text(
        f"{graph.n} nodes, {graph.m} edges, density {graph.density():.4f}, "
        f"{graph.isolated()} isolated, alpha {cfg.alpha!r}\n"
    )


def _load_graph(cfg):
    try:
        graph = load_graph(_need(cfg, "graph"))
    except (FileNotFoundError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    if graph.features is None or graph.labels is None:
        raise InputError(f"{cfg.graph}: graph needs features.csv and labels")
    return graph


def cmd_train(cfg, run):
    graph = _load_graph(cfg)
    widths = [graph.features.shape[1], *cfg.hidden, int(graph.labels.max()) + 1]
    model = gcn.GcnModel.create(widths, cfg.aggregation, derive_seed(cfg.seed, "gcn"))
    model, state = gcn.train(model, graph, gcn.TrainConfig(cfg.iters, cfg.lr, cfg.timing))
    gcn.save_model(model, run / "model.txt")
    with open(run / "curves.csv", "w") as fh:
        fh.write("iteration,seconds,loss,train_accuracy\n")
        for i, (l, a) in enumerate(zip(state.loss, state.train_accuracy)):
            secs = repr(state.seconds[i]) if state.seconds else ""
            fh.write(f"{i + 1},{secs},{l!r},{a!r}\n")
    final = state.loss[-1] if state.loss else float("nan")
    (run / "summary.txt").write_text(f"{state.iteration} iterations, final loss {final:.4f}\n")


def cmd_eval(cfg, run):
    try:
        model = gcn.load_model(_need(cfg, "model"))
    except (FileNotFoundError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    graph = _load_graph(cfg)
    mask = graph.test_mask if graph.test_mask is not None and graph.test_mask.any() else np.ones(graph.n, bool)
    pred, _ = gcn.predict(model, graph)
    report = evaluate(graph.labels[mask], pred[mask], model.n_classes)
    (run / "report.json").write_text(report.to_json() + "\n")
    with open(run / "metrics.csv", "w") as fh:
        fh.write("model,fold,class,metric,value\n")
        for row in report.rows("gcn", "eval"):
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    (run / "summary.txt").write_text(
        f"accuracy {report.overall_accuracy:.4f} macro f1 {report.macro['f1']:.4f} on {report.total} nodes\n"
    )


def cmd_cv(cfg, run):
    data = _load_data(cfg)
    result = run_cv(data, _experiment(cfg, use_encoder=not cfg.features))
    emit_report(result, run, figures=cfg.figures)


def cmd_sweep(cfg, run):
    data = _load_data(cfg)
    grid = SweepGrid(
        alphas=tuple(float(a) for a in cfg.alphas.split(",")),
        aggregations=tuple(cfg.aggregations.split(",")),
        iterations=cfg.iters, folds=cfg.folds,
        seeds=tuple(int(s) for s in cfg.seeds.split(",")),
    )
    result = run_sweep(data, grid, _experiment(cfg, use_encoder=not cfg.features))
    emit_report(result, run, figures=cfg.figures)


def cmd_saliency(cfg, run):
    data = _load_data(cfg)
    if not 0 <= cfg.index < data.n:
        raise UsageError(f"--index {cfg.index}: must lie in [0, {data.n})")
    if cfg.encoder:
        try:
            model = load_encoder(_need(cfg, "encoder"))
        except (FileNotFoundError, ValueError) as exc:
            raise InputError(str(exc)) from exc
    else:
        model, _ = _train_encoder_on(cfg, data)
    if not 0 <= cfg.target_class < model.config.n_classes:
        raise UsageError(f"--target-class {cfg.target_class}: must lie in [0, {model.config.n_classes})")
    image = data.images[cfg.index]
    smap = saliency_map(model, image, cfg.target_class)
    np.savetxt(run / "saliency.csv", smap, delimiter=",", fmt="%r")
    if cfg.figures:
        from .plotting import plot_saliency

        (run / "figures").mkdir(exist_ok=True)
        plot_saliency(image, smap, run / "figures" / "saliency.png")


HANDLERS = {
    "synth": cmd_synth, "encode": cmd_encode, "build-graph": cmd_build_graph, "train": cmd_train,
    "eval": cmd_eval, "cv": cmd_cv, "sweep": cmd_sweep, "saliency": cmd_saliency,
}


def dispatch(cfg: RunConfig) -> int:
    """Run one subcommand; returns the exit status."""
    if cfg.command is None:
        print(build_parser().format_help(), file=sys.stderr)
        return EXIT_USAGE
    run = Path(cfg.out) / cfg.run_id()
    try:
        run.mkdir(parents=True, exist_ok=True)
        (run / "config.json").write_text(cfg.to_json())
        HANDLERS[cfg.command](cfg, run)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, ArithmeticError) as exc:
        print(f"computation error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    print(run)
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING)
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
