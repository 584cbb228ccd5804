"""Similarity graphs over encoded instances, fused with patient metadata."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numeric import ShapeError, matmul

NUMERIC_FIELDS = ("offset", "age")

# Two-valued vocabularies; the first value encodes to 0, the second to 1.
CATEGORICAL_FIELDS = {
    "gender": ("M", "F"),
    "survival": ("N", "Y"),
    "rt_pcr": ("N", "Y"),
    "was_icu": ("N", "Y"),
    "in_icu": ("N", "Y"),
    "intubating": ("N", "Y"),
    "intubated": ("N", "Y"),
    "supplemental_o2": ("N", "Y"),
}

FIELDS = NUMERIC_FIELDS + tuple(CATEGORICAL_FIELDS)


@dataclass
class MetadataTable:
    """Column-oriented metadata; ``None`` marks a missing cell."""

    columns: dict[str, list]

    def __post_init__(self):
        unknown = [f for f in self.columns if f not in FIELDS]
        if unknown:
            raise ValueError(f"unknown metadata field(s): {', '.join(unknown)}")
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise ShapeError(f"metadata columns have differing lengths {sorted(lengths)}")
        for name, values in self.columns.items():
            for v in values:
                if v is None:
                    continue
                if name in NUMERIC_FIELDS:
                    if not np.isfinite(v):
                        raise ValueError(f"non-finite value in numeric field {name!r}")
                    if name == "age" and v < 0:
                        raise ValueError("age must be nonnegative")
                elif v not in CATEGORICAL_FIELDS[name]:
                    raise ValueError(
                        f"field {name!r} value {v!r} not in {CATEGORICAL_FIELDS[name]}"
                    )

    @property
    def fields(self) -> list[str]:
        return [f for f in FIELDS if f in self.columns]

    @property
    def n(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def missing(self, name: str) -> list[bool]:
        return [v is None for v in self.columns[name]]

    def has_missing(self) -> bool:
        return any(v is None for col in self.columns.values() for v in col)

    def subset(self, rows) -> "MetadataTable":
        rows = list(rows)
        return MetadataTable({k: [v[i] for i in rows] for k, v in self.columns.items()})


def fit_imputation(table: MetadataTable, rows=None) -> dict:
    """Fill values per field: mean for numeric, mode for categorical.

    Mode ties go to the lexicographically smallest category.
    """
    rows = range(table.n) if rows is None else list(rows)
    fills = {}
    for name in table.fields:
        seen = [table.columns[name][i] for i in rows if table.columns[name][i] is not None]
        if not seen:
            raise ValueError(f"metadata field {name!r} has no observed values")
        if name in NUMERIC_FIELDS:
            fills[name] = float(np.mean(seen))
        else:
            counts = Counter(seen)
            fills[name] = min(counts, key=lambda c: (-counts[c], c))
    return fills


def impute_metadata(table: MetadataTable, fills: dict | None = None) -> MetadataTable:
    if fills is None:
        fills = fit_imputation(table)
    cols = {}
    for name in table.fields:
        cols[name] = [fills[name] if v is None else v for v in table.columns[name]]
    return MetadataTable(cols)


def read_metadata_csv(path) -> MetadataTable:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        names = [h for h in (reader.fieldnames or []) if h != "id"]
        cols: dict[str, list] = {h: [] for h in names}
        for row in reader:
            for h in names:
                cell = row[h].strip()
                if cell == "":
                    cols[h].append(None)
                elif h in NUMERIC_FIELDS:
                    cols[h].append(float(cell))
                else:
                    cols[h].append(cell)
    return MetadataTable(cols)


def write_metadata_csv(table: MetadataTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + table.fields)
        for i in range(table.n):
            row = [i]
            for name in table.fields:
                v = table.columns[name][i]
                row.append("" if v is None else (repr(float(v)) if name in NUMERIC_FIELDS else v))
            w.writerow(row)


# -- similarity + threshold ---------------------------------------------------


def build_similarity(features) -> np.ndarray:
    """Pairwise cosine similarity of feature rows; exactly symmetric, unit diagonal."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError(f"need at least two feature rows, got shape {x.shape}")
    # power-of-two rescale is exact and keeps the Gram matrix finite
    top = np.abs(x).max()
    if np.isfinite(top) and top > 0:
        x = np.ldexp(x, -int(np.frexp(top)[1]))
    gram = matmul(x, x.T)
    sq = np.diag(gram).copy()
    zero = np.flatnonzero(sq == 0.0)
    if zero.size:
        raise ValueError(f"feature row {int(zero[0])} has zero norm")
    # G_ij / sqrt(G_ii G_jj): symmetric, and exactly 1 for duplicate rows
    s = np.clip(gram / np.sqrt(sq[:, None] * sq[None, :]), -1.0, 1.0)
    np.fill_diagonal(s, 1.0)
    return s


@dataclass
class InstanceGraph:
    """Undirected graph over ``n`` nodes with optional node data.

    ``edges`` is an (m, 2) int array with ``i < j`` rows in lexicographic
    order; self-loops are never stored.
    """

    n: int
    edges: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    train_mask: np.ndarray | None = None
    test_mask: np.ndarray | None = None
    _index: np.ndarray | None = field(default=None, repr=False, compare=False)
    _mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size:
            if e.min() < 0 or e.max() >= self.n:
                raise ValueError(f"edge endpoint outside [0, {self.n})")
            if np.any(e[:, 0] == e[:, 1]):
                raise ValueError("self-loops are not stored")
            e = np.sort(e, axis=1)
            e = np.unique(e, axis=0)
        self.edges = e
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != self.n:
                raise ShapeError(f"features {self.features.shape} do not match n={self.n}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise ShapeError(f"labels {self.labels.shape} do not match n={self.n}")
        for name in ("train_mask", "test_mask"):
            m = getattr(self, name)
            if m is not None:
                m = np.asarray(m, dtype=bool)
                if m.shape != (self.n,):
                    raise ShapeError(f"{name} {m.shape} does not match n={self.n}")
                setattr(self, name, m)
        if self.train_mask is not None and self.test_mask is not None:
            if np.any(self.train_mask & self.test_mask):
                raise ValueError("train and test masks overlap")

    @property
    def m(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    def isolated(self) -> int:
        return int((self.degrees() == 0).sum())

    def density(self) -> float:
        pairs = self.n * (self.n - 1) / 2
        return self.m / pairs if pairs else 0.0

    def adjacency(self) -> np.ndarray:
        return self.adjacency_mask().astype(np.int8)

    def adjacency_mask(self) -> np.ndarray:
        """Boolean adjacency, cached; treat as read-only."""
        if self._mask is None:
            a = np.zeros((self.n, self.n), dtype=bool)
            a[self.edges[:, 0], self.edges[:, 1]] = True
            a[self.edges[:, 1], self.edges[:, 0]] = True
            self._mask = a
        return self._mask

    def neighbor_index(self) -> np.ndarray:
        """(n, max_degree) neighbour table in ascending id order, ``-1`` padded."""
        if self._index is None:
            self._index = order_neighbors(self, np.arange(self.n))
        return self._index

    def neighbors(self, v: int) -> list[int]:
        row = self.neighbor_index()[v]
        return [int(u) for u in row if u >= 0]

    def with_features(self, features) -> "InstanceGraph":
        return replace(self, features=np.array(features, dtype=np.float64), )


def threshold_graph(s, alpha: float) -> InstanceGraph:
    """Connect ``i != j`` iff ``s[i, j] > alpha`` (ties are non-edges)."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {s.shape}")
    if not -1.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [-1, 1], got {alpha}")
    i, j = np.nonzero(np.triu(s > alpha, k=1))
    return InstanceGraph(s.shape[0], np.stack([i, j], axis=1))


def order_neighbors(graph: InstanceGraph, order) -> np.ndarray:
    """Neighbour table listing each node's neighbours in the sequence ``order``.

    ``order`` is a permutation of node ids; rows are ``-1`` padded.
    """
    order = np.asarray(order, dtype=np.int64)
    adj = graph.adjacency_mask()[:, order]
    rows, cols = np.nonzero(adj)
    deg = np.bincount(rows, minlength=graph.n)
    width = int(deg.max()) if graph.n else 0
    index = np.full((graph.n, width), -1, dtype=np.int64)
    start = np.cumsum(deg) - deg
    index[rows, np.arange(rows.size) - start[rows]] = order[cols]
    return index


# -- metadata -> node features -------------------------------------------------


def fit_scaling(table: MetadataTable, rows=None) -> dict[str, tuple[float, float]]:
    """Min/max per numeric field over ``rows`` (all rows when None)."""
    rows = range(table.n) if rows is None else list(rows)
    scaling = {}
    for name in table.fields:
        if name not in NUMERIC_FIELDS:
            continue
        vals = [table.columns[name][i] for i in rows]
        if any(v is None for v in vals):
            raise ValueError(f"field {name!r} still has missing values; impute first")
        if not vals:
            raise ValueError("cannot fit scaling on zero rows")
        scaling[name] = (float(min(vals)), float(max(vals)))
    return scaling


def encode_metadata(table: MetadataTable, scaling: dict) -> np.ndarray:
    """Numeric fields min-max scaled (constant column -> 0), binaries -> {0, 1}."""
    cols = []
    for name in table.fields:
        values = table.columns[name]
        if any(v is None for v in values):
            raise ValueError(f"field {name!r} still has missing values; impute first")
        if name in NUMERIC_FIELDS:
            lo, hi = scaling[name]
            x = np.asarray(values, dtype=np.float64)
            cols.append((x - lo) / (hi - lo) if hi > lo else np.zeros_like(x))
        else:
            vocab = CATEGORICAL_FIELDS[name]
            cols.append(np.array([float(vocab.index(v)) for v in values]))
    return np.stack(cols, axis=1) if cols else np.zeros((table.n, 0))


def assemble_graph(
    edges: InstanceGraph,
    table: MetadataTable,
    labels=None,
    train_mask=None,
    test_mask=None,
    scaling: dict | None = None,
) -> InstanceGraph:
    """Attach encoded metadata, labels and masks to an edge-only graph.

    Scaling is fit on ``train_mask`` rows unless ``scaling`` is given, so
    test rows never influence it.
    """
    n = edges.n
    sizes = {"graph": n, "metadata": table.n}
    for name, arr in (("labels", labels), ("train_mask", train_mask), ("test_mask", test_mask)):
        if arr is not None:
            sizes[name] = len(arr)
    if len(set(sizes.values())) != 1:
        raise ShapeError(f"inconsistent instance counts: {sizes}")
    if scaling is None:
        rows = None if train_mask is None else np.flatnonzero(train_mask)
        scaling = fit_scaling(table, rows)
    x = encode_metadata(table, scaling)
    return InstanceGraph(n, edges.edges, x, labels, train_mask, test_mask)


# -- file formats ----------------------------------------------------------------


def save_graph(graph: InstanceGraph, directory) -> Path:
    """Write ``edges.txt``, ``features.csv`` and ``labels.csv`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "edges.txt", "w") as fh:
        fh.write(f"# nodes {graph.n}\n")
        for i, j in graph.edges.tolist():
            fh.write(f"{i} {j}\n")
    if graph.features is not None:
        with open(d / "features.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id"] + [f"x{k}" for k in range(graph.features.shape[1])])
            for i, row in enumerate(graph.features.tolist()):
                w.writerow([i] + [repr(v) for v in row])
    with open(d / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "train", "test"])
        for i in range(graph.n):
            w.writerow([
                i,
                "" if graph.labels is None else int(graph.labels[i]),
                "" if graph.train_mask is None else int(graph.train_mask[i]),
                "" if graph.test_mask is None else int(graph.test_mask[i]),
            ])
    return d


def load_graph(directory) -> InstanceGraph:
    d = Path(directory)
    if not (d / "edges.txt").exists():
        raise FileNotFoundError(f"no edges.txt in {d}")
    n = None
    edges = []
    with open(d / "edges.txt") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# nodes"):
                n = int(line.split()[2])
            elif line and not line.startswith("#"):
                i, j = line.split()
                edges.append((int(i), int(j)))
    features = None
    if (d / "features.csv").exists():
        with open(d / "features.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        features = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), -1)
    labels = train = test = None
    if (d / "labels.csv").exists():
        with open(d / "labels.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and rows[0]["label"] != "":
            labels = np.array([int(r["label"]) for r in rows])
        if rows and rows[0]["train"] != "":
            train = np.array([r["train"] == "1" for r in rows])
        if rows and rows[0]["test"] != "":
            test = np.array([r["test"] == "1" for r in rows])
        n = len(rows) if n is None else n
    if n is None:
        raise ValueError(f"cannot determine node count for graph in {d}")
    return InstanceGraph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), features, labels, train, test)
