"""Clustered datasets and the long-format CSV interchange."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence, TextIO

import numpy as np

from splinegee.errors import SchemaError

INTERCEPT = "(Intercept)"


@dataclass(frozen=True, eq=False)
class ClusterData:
    """One cluster: responses ``y`` (m,), covariates ``X`` (m, K) with a
    leading column of ones, nonparametric covariates ``T`` (m, D), and the
    within-cluster observation index used for AR-1 lags."""

    cluster_id: Hashable
    y: np.ndarray
    X: np.ndarray
    T: np.ndarray
    obs_index: np.ndarray = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        m = y.size
        X = np.asarray(self.X, dtype=float).reshape(m, -1)
        T = np.asarray(self.T, dtype=float).reshape(m, -1) if np.size(self.T) else np.zeros((m, 0))
        idx = np.arange(m) if self.obs_index is None else np.asarray(self.obs_index, dtype=int).reshape(-1)
        if m < 1:
            raise ValueError(f"cluster {self.cluster_id!r} is empty")
        if idx.size != m:
            raise ValueError(f"cluster {self.cluster_id!r}: obs_index has {idx.size} entries for {m} rows")
        for name, arr in (("y", y), ("X", X), ("T", T), ("obs_index", idx)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def m(self) -> int:
        return self.y.size


@dataclass(frozen=True, eq=False)
class Dataset:
    clusters: tuple[ClusterData, ...]
    x_names: tuple[str, ...] = ()
    t_names: tuple[str, ...] = ()

    def __post_init__(self):
        clusters = tuple(self.clusters)
        object.__setattr__(self, "clusters", clusters)
        if clusters:
            K, D = clusters[0].X.shape[1], clusters[0].T.shape[1]
            for c in clusters:
                if c.X.shape[1] != K or c.T.shape[1] != D:
                    raise ValueError(f"cluster {c.cluster_id!r} disagrees on K or D")
        else:
            K = len(self.x_names)
            D = len(self.t_names)
        if not self.x_names:
            object.__setattr__(self, "x_names", (INTERCEPT,) + tuple(f"x{k}" for k in range(1, K)))
        if not self.t_names:
            object.__setattr__(self, "t_names", tuple(f"t{d + 1}" for d in range(D)))
        object.__setattr__(self, "x_names", tuple(self.x_names))
        object.__setattr__(self, "t_names", tuple(self.t_names))

    @property
    def n(self) -> int:
        return len(self.clusters)

    @property
    def K(self) -> int:
        return len(self.x_names)

    @property
    def D(self) -> int:
        return len(self.t_names)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([c.m for c in self.clusters], dtype=int)

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    def stacked(self, attr: str) -> np.ndarray:
        return np.concatenate([getattr(c, attr) for c in self.clusters], axis=0)

    def pooled_T(self) -> np.ndarray:
        if not self.clusters:
            return np.zeros((0, self.D))
        return self.stacked("T")

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.clusters[i] for i in indices), self.x_names, self.t_names)

    @classmethod
    def from_arrays(cls, cluster, y, X, T, obs_index=None, x_names=(), t_names=()) -> "Dataset":
        """Group stacked per-observation arrays into clusters (first-seen order)."""
        cluster = np.asarray(cluster)
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float).reshape(y.size, -1)
        T = np.asarray(T, dtype=float).reshape(y.size, -1)
        _, first, inverse = np.unique(cluster, return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        clusters = []
        for g in order:
            rows = np.flatnonzero(inverse == g)
            idx = None if obs_index is None else np.asarray(obs_index)[rows]
            cid = cluster[rows[0]]
            cid = cid.item() if isinstance(cid, np.generic) else cid
            clusters.append(ClusterData(cid, y[rows], X[rows], T[rows], idx))
        return cls(tuple(clusters), tuple(x_names), tuple(t_names))


@dataclass(frozen=True)
class CsvSchema:
    cluster: str = "cluster"
    response: str = "y"
    x: Sequence[str] = ()
    t: Sequence[str] = ()
    order: str | None = None
    intercept: str | None = None
    """Name of a declared all-ones column among ``x``; injected when absent."""


@dataclass(frozen=True)
class Finding:
    kind: str
    message: str
    cluster: Hashable = None
    row: int | None = None


def _open(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, newline="", encoding="utf-8")
    return source


def read_csv(source: str | os.PathLike | TextIO, schema: CsvSchema | None = None, **kwargs) -> Dataset:
    """Read a long-format CSV (one row per observation) into a Dataset.

    Rows are grouped by cluster id in order of first appearance; order within
    a cluster follows the file unless ``schema.order`` names an index column.
    """
    schema = schema or CsvSchema(**kwargs)
    fh = _open(source)
    try:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty file: no header row") from None
        pos = {name: i for i, name in enumerate(header)}
        wanted = [schema.cluster, schema.response, *schema.x, *schema.t]
        if schema.order:
            wanted.append(schema.order)
        for name in wanted:
            if name not in pos:
                raise SchemaError(f"missing column {name!r} (header has {', '.join(header)})")

        ids, ys, xs, ts, orders = [], [], [], [], []
        numeric = [schema.response, *schema.x, *schema.t] + ([schema.order] if schema.order else [])
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise SchemaError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
            vals = {}
            for name in numeric:
                cell = row[pos[name]].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise SchemaError(f"row {lineno}: column {name!r} value {cell!r} is not numeric") from None
                if not math.isfinite(v):
                    raise SchemaError(f"row {lineno}: column {name!r} is missing or non-finite")
                vals[name] = v
            ids.append(row[pos[schema.cluster]].strip())
            ys.append(vals[schema.response])
            xs.append([vals[c] for c in schema.x])
            ts.append([vals[c] for c in schema.t])
            if schema.order:
                orders.append(vals[schema.order])
    finally:
        if fh is not source:
            fh.close()

    if not ys:
        raise SchemaError("empty dataset: header only")
    X = np.array(xs, dtype=float).reshape(len(ys), len(schema.x))
    x_names = list(schema.x)
    if schema.intercept:
        if schema.intercept not in x_names:
            raise SchemaError(f"intercept column {schema.intercept!r} is not among the x columns")
        k = x_names.index(schema.intercept)
        if not np.all(X[:, k] == 1.0):
            raise SchemaError(f"declared intercept column {schema.intercept!r} is not identically 1")
        X = np.column_stack([X[:, k], np.delete(X, k, axis=1)])
        x_names = [x_names[k]] + x_names[:k] + x_names[k + 1 :]
    else:
        X = np.column_stack([np.ones(len(ys)), X])
        x_names = [INTERCEPT] + x_names
    order = None
    if schema.order:
        order = np.array(orders)
        if np.any(order != np.round(order)):
            raise SchemaError(f"order column {schema.order!r} must hold integers")
        order = order.astype(int)
    ds = Dataset.from_arrays(np.array(ids, dtype=object), ys, X, np.array(ts).reshape(len(ys), len(schema.t)),
                             order, x_names, tuple(schema.t))
    if order is not None:
        # sort each cluster by its order column
        clusters = []
        for c in ds.clusters:
            s = np.argsort(c.obs_index, kind="stable")
            clusters.append(ClusterData(c.cluster_id, c.y[s], c.X[s], c.T[s], c.obs_index[s]))
        ds = Dataset(tuple(clusters), ds.x_names, ds.t_names)
    return ds


def write_csv(dataset: Dataset, target: str | os.PathLike | TextIO, schema: CsvSchema | None = None) -> None:
    """Write ``dataset`` in the long format read by :func:`read_csv`.

    The intercept column is dropped; values are written with 17 significant
    digits so that a read/write round trip is exact.
    """
    x_cols = list(dataset.x_names[1:])
    t_cols = list(dataset.t_names)
    if schema is None:
        schema = CsvSchema(x=x_cols, t=t_cols, order="order")
    buf = target if not isinstance(target, (str, os.PathLike)) else None
    fh = buf or open(target, "w", newline="", encoding="utf-8")
    try:
        w = csv.writer(fh, lineterminator="\n")
        header = [schema.cluster, schema.response, *schema.x, *schema.t] + ([schema.order] if schema.order else [])
        w.writerow(header)
        for c in dataset.clusters:
            for j in range(c.m):
                row = [str(c.cluster_id), f"{c.y[j]:.17g}"]
                row += [f"{v:.17g}" for v in c.X[j, 1:]]
                row += [f"{v:.17g}" for v in c.T[j]]
                if schema.order:
                    row.append(str(int(c.obs_index[j])))
                w.writerow(row)
    finally:
        if buf is None:
            fh.close()


def validate(dataset: Dataset) -> list[Finding]:
    """Return problems found in ``dataset``; an empty list means well formed."""
    findings: list[Finding] = []
    if dataset.n == 0:
        return [Finding("empty", "dataset has no clusters")]
    for c in dataset.clusters:
        for name, arr in (("y", c.y), ("X", c.X), ("T", c.T)):
            bad = ~np.isfinite(arr.reshape(c.m, -1)).all(axis=1)
            for j in np.flatnonzero(bad):
                findings.append(Finding("non_finite", f"cluster {c.cluster_id!r} row {j}: non-finite {name}",
                                        c.cluster_id, int(j)))
        if c.X.shape[1] and not np.all(c.X[:, 0] == 1.0):
            findings.append(Finding("intercept", f"cluster {c.cluster_id!r}: first X column is not identically 1",
                                    c.cluster_id))
        if np.unique(c.obs_index).size != c.m:
            findings.append(Finding("obs_index", f"cluster {c.cluster_id!r}: repeated observation index",
                                    c.cluster_id))
    T = dataset.pooled_T()
    for d, name in enumerate(dataset.t_names):
        col = T[:, d][np.isfinite(T[:, d])]
        if np.unique(col).size < 2:
            value = col[0] if col.size else float("nan")
            findings.append(Finding("degenerate_support",
                                    f"nonparametric covariate {name!r} takes a single value {value:g} "
                                    f"(range [{col.min() if col.size else np.nan:g}, "
                                    f"{col.max() if col.size else np.nan:g}])"))
    if dataset.sizes.max() < 2:
        findings.append(Finding("cluster_sizes", "all clusters have a single observation; "
                                                 "within-cluster correlation cannot be estimated"))
    return findings


def dataset_summary(dataset: Dataset) -> dict:
    """Cluster-size and covariate-range summary for reports."""
    T = dataset.pooled_T()
    sizes = dataset.sizes
    return {
        "n_clusters": dataset.n,
        "n_obs": dataset.N,
        "cluster_size_min": int(sizes.min()),
        "cluster_size_max": int(sizes.max()),
        "t_range": {name: [float(T[:, d].min()), float(T[:, d].max())] for d, name in enumerate(dataset.t_names)},
    }


def to_csv_string(dataset: Dataset) -> str:
    buf = io.StringIO()
    write_csv(dataset, buf)
    return buf.getvalue()
