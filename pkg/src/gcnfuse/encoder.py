"""Three-stage convolutional encoder: images -> feature vectors.

Each stage is a 3x3 same-padded convolution, ReLU, then 2x2 max pooling.
The pooled map is flattened and projected linearly to ``feature_dim``
features; a linear classification head on top is used only for training.
Images are (n, height, width) arrays with values in [0, 1].
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import numeric as nm
from .numeric import ShapeError, Tape, Var


@dataclass(frozen=True)
class EncoderConfig:
    height: int = 32
    width: int = 32
    channels: tuple[int, ...] = (8, 16, 32)
    feature_dim: int = 64
    n_classes: int = 2

    def __post_init__(self):
        stride = 2 ** len(self.channels)
        if self.height % stride or self.width % stride:
            raise ValueError(f"image size {self.height}x{self.width} must be divisible by {stride}")
        if self.feature_dim < 1 or self.n_classes < 2:
            raise ValueError("feature_dim must be >= 1 and n_classes >= 2")

    @property
    def flat_dim(self) -> int:
        stride = 2 ** len(self.channels)
        return (self.height // stride) * (self.width // stride) * self.channels[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c_in = 1
        for k, c_out in enumerate(self.channels):
            shapes[f"conv{k}.w"] = (9 * c_in, c_out)
            shapes[f"conv{k}.b"] = (c_out,)
            c_in = c_out
        shapes["proj.w"] = (self.flat_dim, self.feature_dim)
        shapes["proj.b"] = (self.feature_dim,)
        shapes["head.w"] = (self.feature_dim, self.n_classes)
        shapes["head.b"] = (self.n_classes,)
        return shapes


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: dict[str, np.ndarray]
    seed: int = 0

    @classmethod
    def create(cls, config: EncoderConfig, seed: int = 0) -> "EncoderModel":
        rng = nm.make_rng(seed, "encoder-init")
        params = {}
        for name, shape in config.param_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                params[name] = nm.glorot_uniform(rng, shape[0], shape[1], shape)
        return cls(config, params, seed)

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def check_images(images, config: EncoderConfig) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (config.height, config.width):
        raise ShapeError(
            f"images of shape {x.shape[1:] if x.ndim == 3 else x.shape} do not match "
            f"encoder input {config.height}x{config.width}"
        )
    return x


# -- tape ops ----------------------------------------------------------------------


def _conv3x3(tape: Tape, x: Var, w: Var, b: Var) -> Var:
    """Same-padded 3x3 convolution on channels-last (n, h, w, c) maps."""
    n, hgt, wid, c_in = x.value.shape
    padded = np.pad(x.value, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # (n, h, w, c, 3, 3) -> (n, h*w, 3*3*c) with (di, dj, c) ordering
    win = sliding_window_view(padded, (3, 3), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n, hgt * wid, 9 * c_in)
    out = nm.batched_matmul(cols, w.value) + b.value
    c_out = w.value.shape[1]

    def vjp(g):
        g = g.reshape(n, hgt * wid, c_out)
        gw = np.zeros_like(w.value)
        for i in range(n):
            gw += cols[i].T @ g[i]
        gb = g.sum(axis=(0, 1))
        gcols = nm.batched_matmul(g, w.value.T).reshape(n, hgt, wid, 3, 3, c_in)
        gpad = np.zeros_like(padded)
        for di in range(3):
            for dj in range(3):
                gpad[:, di:di + hgt, dj:dj + wid, :] += gcols[:, :, :, di, dj, :]
        return gpad[:, 1:-1, 1:-1, :], gw, gb

    return tape.custom(out.reshape(n, hgt, wid, c_out), (x, w, b), vjp)


def _maxpool2(tape: Tape, x: Var) -> Var:
    n, hgt, wid, c = x.value.shape
    blocks = x.value.reshape(n, hgt // 2, 2, wid // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, hgt // 2, wid // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, hgt // 2, wid // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(n, hgt, wid, c),)

    return tape.custom(out, (x,), vjp)


def tape_forward(model: EncoderModel, images: Var, tape: Tape, register: bool = True):
    """Record the encoder on ``tape``; returns ``(features, logits)`` Vars."""
    p = model.params
    get = (lambda k: tape.param(k, p[k])) if register else (lambda k: tape.const(p[k]))
    n = images.value.shape[0]
    h = tape.reshape(images, images.value.shape + (1,))
    for k in range(len(model.config.channels)):
        h = _conv3x3(tape, h, get(f"conv{k}.w"), get(f"conv{k}.b"))
        h = _maxpool2(tape, tape.relu(h))
    flat = tape.reshape(h, (n, -1))
    feats = tape.add_bias(tape.matmul(flat, get("proj.w")), get("proj.b"))
    logits = tape.add_bias(tape.matmul(feats, get("head.w")), get("head.b"))
    return feats, logits


def _run(model: EncoderModel, images) -> tuple[np.ndarray, np.ndarray]:
    x = check_images(images, model.config)
    tape = Tape()
    feats, logits = tape_forward(model, tape.const(x), tape, register=False)
    return feats.value, logits.value


def encode(model: EncoderModel, images, batch_size: int = 64) -> np.ndarray:
    """Feature matrix (n, feature_dim) read before the classification head."""
    x = check_images(images, model.config)
    out = [_run(model, x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.feature_dim))


def classify(model: EncoderModel, images) -> np.ndarray:
    return _run(model, images)[1].argmax(axis=1)


@dataclass
class EncoderTrainConfig:
    epochs: int = 10
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0


@dataclass
class EncoderHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


def loss_and_grads(model: EncoderModel, images, labels):
    tape = Tape()
    _, logits = tape_forward(model, tape.const(images), tape)
    loss = tape.cross_entropy(tape.softmax_rows(logits), labels)
    return float(loss.value), nm.backward(tape, loss)


def train_encoder(model: EncoderModel, images, labels, config: EncoderTrainConfig | None = None):
    """Minibatch SGD on softmax cross-entropy.

    The loss curve holds the full-data loss before training and after each
    epoch, so ``loss[0]`` is the initial loss.  Returns the model with the
    lowest recorded full-data loss, which makes ``loss`` at the returned
    model no larger than the initial loss.
    """
    config = config or EncoderTrainConfig()
    x = check_images(images, model.config)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (len(x),):
        raise ShapeError(f"{len(y)} labels for {len(x)} images")
    if len(np.unique(y)) < 2:
        raise ValueError("encoder training needs at least two classes")
    if y.min() < 0 or y.max() >= model.config.n_classes:
        raise ValueError(f"labels must lie in [0, {model.config.n_classes})")
    model = model.copy()
    rng = nm.make_rng(config.seed, "encoder-batches")
    history = EncoderHistory()

    def record(m):
        probs = nm.softmax_rows(np.concatenate(
            [_run(m, x[i:i + 128])[1] for i in range(0, len(x), 128)]
        ))
        history.loss.append(nm.cross_entropy_loss(probs, y))
        history.accuracy.append(float((probs.argmax(axis=1) == y).mean()))

    record(model)
    best, best_loss = model.copy(), history.loss[0]
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            _, grads = loss_and_grads(model, x[idx], y[idx])
            for name, g in grads.items():
                model.params[name] = model.params[name] - config.learning_rate * g
        record(model)
        if history.loss[-1] <= best_loss:
            best, best_loss = model.copy(), history.loss[-1]
    return best, history


def representation_similarity(model_a: EncoderModel, model_b: EncoderModel, images) -> dict:
    """Per-instance cosine between two encoders' features plus summary stats."""
    if model_a.config.feature_dim != model_b.config.feature_dim:
        raise ShapeError(
            f"feature dimensions differ: {model_a.config.feature_dim} vs {model_b.config.feature_dim}"
        )
    fa, fb = encode(model_a, images), encode(model_b, images)
    sims = np.array([nm.cosine_similarity(u, v) for u, v in zip(fa, fb)])
    return {
        "similarities": sims,
        "mean": float(sims.mean()),
        "median": float(np.median(sims)),
        "min": float(sims.min()),
        "max": float(sims.max()),
    }


def input_gradient(model: EncoderModel, image, target_class: int) -> np.ndarray:
    """Gradient of the target-class logit with respect to the input pixels."""
    x = check_images(image, model.config)
    if len(x) != 1:
        raise ShapeError("saliency takes a single image")
    if not 0 <= target_class < model.config.n_classes:
        raise ValueError(f"class {target_class} outside [0, {model.config.n_classes})")
    tape = Tape()
    inp = tape.param("input", x)
    _, logits = tape_forward(model, inp, tape, register=False)
    score = tape.pick(logits, (0, target_class))
    return nm.backward(tape, score)["input"][0]


def saliency_map(model: EncoderModel, image, target_class: int) -> np.ndarray:
    """|d score / d pixel| scaled so the maximum is 1 (all-zero stays zero)."""
    g = np.abs(input_gradient(model, image, target_class))
    top = g.max()
    return g / top if top > 0 else g


# -- file formats ----------------------------------------------------------------------

_IMG_MAGIC = b"GFIMG001"


def write_images(images, path) -> Path:
    """Binary: 8-byte magic, uint32 LE n/height/width, then float64 LE pixels row-major.

    A ``.csv`` suffix writes the text form instead: a ``n,height,width``
    header line, then one line of height*width pixels per image.
    """
    x = np.asarray(images, dtype=np.float64)
    path = Path(path)
    n, h, w = x.shape
    if path.suffix == ".csv":
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow([n, h, w])
            for img in x:
                wr.writerow([repr(v) for v in img.ravel().tolist()])
    else:
        with open(path, "wb") as fh:
            fh.write(_IMG_MAGIC + struct.pack("<3I", n, h, w))
            fh.write(x.astype("<f8").tobytes())
    return path


def read_images(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image file not found: {path}")
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        n, h, w = (int(v) for v in rows[0])
        x = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(n, h, w)
    else:
        raw = path.read_bytes()
        if raw[:8] != _IMG_MAGIC:
            raise ValueError(f"{path} is not an image batch file")
        n, h, w = struct.unpack("<3I", raw[8:20])
        x = np.frombuffer(raw[20:], dtype="<f8").astype(np.float64)
        if x.size != n * h * w:
            raise ValueError(f"{path}: expected {n * h * w} pixels, found {x.size}")
        x = x.reshape(n, h, w)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError(f"{path}: pixel values must lie in [0, 1]")
    return x


def write_features(features, path, ids=None) -> Path:
    f = np.asarray(features, dtype=np.float64)
    ids = range(len(f)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id"] + [f"f{k}" for k in range(f.shape[1])])
        for i, row in zip(ids, f.tolist()):
            wr.writerow([i] + [repr(v) for v in row])
    return Path(path)


def read_features(path) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "id":
        raise ValueError(f"{path}: expected an 'id' column first")
    ids = [r[0] for r in rows[1:]]
    f = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(len(ids), -1)
    return f, ids


def save_encoder(model: EncoderModel, path) -> Path:
    c = model.config
    np.savez(
        path,
        _config=np.array([c.height, c.width, c.feature_dim, c.n_classes, model.seed]),
        _channels=np.array(c.channels),
        **model.params,
    )
    return Path(path)


def load_encoder(path) -> EncoderModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"encoder file not found: {path}")
    with np.load(path) as z:
        h, w, f, c, seed = (int(v) for v in z["_config"])
        config = EncoderConfig(h, w, tuple(int(v) for v in z["_channels"]), f, c)
        params = {k: z[k].copy() for k in config.param_shapes()}
    return EncoderModel(config, params, seed)
