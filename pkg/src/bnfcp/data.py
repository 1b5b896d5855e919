"""Datasets, synthetic generators, multi-source partitioning and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import yaml

ROLES = ("feature", "label", "source", "ignore")


class SchemaError(ValueError):
    """CSV header or schema file does not declare the required columns."""


class CsvParseError(ValueError):
    """A cell could not be parsed as a real number."""

    def __init__(self, message, row):
        super().__init__(message)
        self.row = row


class NonFiniteValueError(ValueError):
    """A cell parsed to NaN or an infinity."""

    def __init__(self, message, row):
        super().__init__(message)
        self.row = row


class InsufficientDataError(ValueError):
    """Requested sample sizes exceed the available rows."""


@dataclass
class DataSet:
    """Feature matrix ``(n, d)``, labels ``(n,)`` and optional per-row metadata.

    ``source_ids`` tags the generating source; ``indices`` records row
    positions in a parent dataset so that splits can be audited.
    """

    features: np.ndarray
    labels: np.ndarray
    source_ids: np.ndarray | None = None
    indices: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        self.features = x
        self.labels = np.asarray(self.labels, dtype=np.float64).ravel()
        if x.ndim != 2 or x.shape[0] != self.labels.size:
            raise ValueError(f"features {x.shape} and labels {self.labels.shape} disagree")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(self.labels))):
            raise ValueError("dataset contains non-finite values")
        for name in ("source_ids", "indices"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.int64).ravel()
                if v.size != self.labels.size:
                    raise ValueError(f"{name} has {v.size} entries for {self.labels.size} rows")
                setattr(self, name, v)

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "DataSet":
        idx = np.asarray(idx, dtype=np.int64)
        return DataSet(
            self.features[idx], self.labels[idx],
            None if self.source_ids is None else self.source_ids[idx],
            None if self.indices is None else self.indices[idx],
        )

    def joint(self) -> np.ndarray:
        """Rows ``(x, y)`` as one ``(n, d + 1)`` matrix."""
        return np.column_stack([self.features, self.labels])

    def with_labels(self, labels) -> "DataSet":
        return DataSet(self.features.copy(), labels, self.source_ids, self.indices)

    @staticmethod
    def concat(parts) -> "DataSet":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")

        def cat(name):
            vals = [getattr(p, name) for p in parts]
            return None if any(v is None for v in vals) else np.concatenate(vals)

        return DataSet(np.vstack([p.features for p in parts]),
                       np.concatenate([p.labels for p in parts]),
                       cat("source_ids"), cat("indices"))


@dataclass
class StandardizationStats:
    """Per-column location and scale; constant columns keep scale 1 and are flagged."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    x_constant: np.ndarray = field(default=None)
    y_constant: bool = False

    def __post_init__(self):
        self.x_mean = np.asarray(self.x_mean, dtype=np.float64)
        self.x_std = np.asarray(self.x_std, dtype=np.float64)
        if self.x_constant is None:
            self.x_constant = np.zeros(self.x_mean.size, dtype=bool)
        self.x_constant = np.asarray(self.x_constant, dtype=bool)
        if np.any(self.x_std <= 0) or self.y_std <= 0:
            raise ValueError("standard deviations must be positive")

    @classmethod
    def fit(cls, data: DataSet) -> "StandardizationStats":
        x_mean = data.features.mean(axis=0)
        x_std = data.features.std(axis=0)
        x_const = x_std <= 1e-12
        y_mean = float(data.labels.mean())
        y_std = float(data.labels.std())
        y_const = y_std <= 1e-12
        # constant columns pass through untouched
        x_mean = np.where(x_const, 0.0, x_mean)
        x_std = np.where(x_const, 1.0, x_std)
        if y_const:
            y_mean, y_std = 0.0, 1.0
        return cls(x_mean, x_std, y_mean, y_std, x_const, bool(y_const))

    @classmethod
    def identity(cls, d: int) -> "StandardizationStats":
        return cls(np.zeros(d), np.ones(d), 0.0, 1.0)

    def apply_x(self, x):
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std

    def apply_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def invert_x(self, x):
        return np.asarray(x, dtype=np.float64) * self.x_std + self.x_mean

    def invert_y(self, y):
        return np.asarray(y, dtype=np.float64) * self.y_std + self.y_mean

    def apply(self, data: DataSet) -> DataSet:
        return DataSet(self.apply_x(data.features), self.apply_y(data.labels),
                       data.source_ids, data.indices)

    def invert(self, data: DataSet) -> DataSet:
        return DataSet(self.invert_x(data.features), self.invert_y(data.labels),
                       data.source_ids, data.indices)

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std,
                "x_constant": self.x_constant.tolist(), "y_constant": self.y_constant}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls(np.array(d["x_mean"]), np.array(d["x_std"]), float(d["y_mean"]),
                   float(d["y_std"]), np.array(d["x_constant"], dtype=bool), bool(d["y_constant"]))


def standardize(data: DataSet, stats: StandardizationStats | None = None):
    """Zero-mean, unit-variance columns. Returns ``(standardized, stats)``.

    Pass ``stats`` to reuse statistics fitted elsewhere (e.g. on pooled sources).
    """
    stats = StandardizationStats.fit(data) if stats is None else stats
    return stats.apply(data), stats


# ---------------------------------------------------------------------------
# synthetic generators


def toy_p_conditional(x):
    """Mean and variance of ``Y | X = x`` under the calibration law P."""
    x = np.asarray(x, dtype=np.float64)
    return -0.5 * x, -0.3 * x**2 + 0.3 * x


def toy_q_conditional(x):
    """Mean and variance of ``Y | X = x`` under the shifted law Q."""
    x = np.asarray(x, dtype=np.float64)
    return 0.25 * x, -0.24 * x**2 + 0.24 * x


def sample_toy_p(n: int, rng: np.random.Generator) -> DataSet:
    x = rng.uniform(0.0, 1.0, n)
    mean, var = toy_p_conditional(x)
    y = mean + np.sqrt(np.maximum(var, 0.0)) * rng.standard_normal(n)
    return DataSet(x[:, None], y)


def sample_toy_q(n: int, rng: np.random.Generator) -> DataSet:
    x = rng.uniform(0.0, 0.8, n)
    mean, var = toy_q_conditional(x)
    y = mean + np.sqrt(np.maximum(var, 0.0)) * rng.standard_normal(n)
    return DataSet(x[:, None], y)


def gen_toy_shift(n: int, seed: int = 0):
    """Samples ``(P, Q)`` of the one-dimensional shift example.

    The second Gaussian parameter of each conditional is a variance.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    p = sample_toy_p(n, rng)
    q = sample_toy_q(n, rng)
    return p, q


def gen_heteroscedastic(n: int, noise_scale: float = 1.0, seed: int = 0) -> DataSet:
    """``y = sin(2x) + noise_scale * |x| * eps`` with ``x ~ U(-1, 1)``, ``eps ~ N(0, 1)``."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, n)
    y = np.sin(2.0 * x) + noise_scale * np.abs(x) * rng.standard_normal(n)
    return DataSet(x[:, None], y)


# per-source parameters of the synthetic multi-source generator
MSDG_CENTERS = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def gen_msdg_synthetic(n_per_source: int, n_sources: int = 3, seed: int = 0) -> DataSet:
    """Synthetic multi-source regression data with source ids.

    Features are 2-D Gaussians around per-source centres (overlapping);
    labels share a smooth trend but each source has its own offset, slope on
    the second feature and heteroscedastic noise level, so both ``X`` and
    ``Y | X`` vary across sources.
    """
    if n_sources < 1:
        raise ValueError("need at least one source")
    rng = np.random.default_rng(seed)
    xs, ys, ids = [], [], []
    for k in range(n_sources):
        angle = 2.0 * np.pi * k / n_sources
        center = MSDG_CENTERS[k] if k < len(MSDG_CENTERS) else np.array([np.cos(angle), np.sin(angle)])
        x = center + 0.7 * rng.standard_normal((n_per_source, 2))
        offset = 0.8 * (k - (n_sources - 1) / 2.0)
        noise = (0.2 + 0.3 * k / max(n_sources - 1, 1)) * (0.5 + np.abs(x[:, 0]))
        y = np.sin(1.5 * x[:, 0]) + (0.5 + 0.5 * k) * x[:, 1] + offset + noise * rng.standard_normal(n_per_source)
        xs.append(x)
        ys.append(y)
        ids.append(np.full(n_per_source, k))
    return DataSet(np.vstack(xs), np.concatenate(ys), np.concatenate(ids),
                   np.arange(n_per_source * n_sources))


# ---------------------------------------------------------------------------
# multi-source partitioning


@dataclass
class SourceCollection:
    """Disjoint source sets, a calibration set and per-source test pools.

    ``regression`` optionally holds a separate training set for the
    conformal regressors; when absent the pooled sources are used.
    """

    sources: list
    calibration: DataSet
    pools: list
    regression: DataSet | None = None

    def __post_init__(self):
        if not self.sources:
            raise ValueError("need at least one source")
        sizes = {s.n for s in self.sources}
        if len(sizes) != 1:
            raise ValueError(f"sources must have equal sizes, got {sorted(sizes)}")

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    def pooled_sources(self) -> DataSet:
        return DataSet.concat(self.sources)

    def regression_set(self) -> DataSet:
        return self.pooled_sources() if self.regression is None else self.regression


def _split_subsets(raw: DataSet, K: int, rule: str):
    if rule == "source_ids":
        if raw.source_ids is None:
            raise ValueError("rule 'source_ids' needs a dataset with source ids")
        labels = np.unique(raw.source_ids)
        if labels.size != K:
            raise ValueError(f"dataset has {labels.size} sources, expected {K}")
        return [np.flatnonzero(raw.source_ids == s) for s in labels]
    if rule == "feature_quantile":
        edges = np.quantile(raw.features[:, 0], np.linspace(0, 1, K + 1))
        bins = np.clip(np.searchsorted(edges, raw.features[:, 0], side="right") - 1, 0, K - 1)
        return [np.flatnonzero(bins == k) for k in range(K)]
    raise ValueError(f"unknown partition rule {rule!r}")


def partition_msdg(raw: DataSet, K: int, rule: str = "source_ids", source_size: int = 500,
                   seed: int = 0) -> SourceCollection:
    """Split ``raw`` into K disjoint source sets, a calibration set and test pools.

    Each source set draws ``source_size`` rows without replacement from its
    subset; the calibration set (same size) is then drawn from the union of
    the remaining rows; what is left of each subset becomes its test pool.
    Row positions in ``raw`` are kept in ``indices``.
    """
    if source_size < 1:
        raise ValueError("source_size must be positive")
    rng = np.random.default_rng(seed)
    base = DataSet(raw.features, raw.labels,
                   raw.source_ids if raw.source_ids is not None else None,
                   np.arange(raw.n))
    subsets = _split_subsets(base, K, rule)
    need = (K + 1) * source_size
    if need > raw.n:
        raise InsufficientDataError(f"requested {need} rows for sources and calibration, have {raw.n}")
    src_idx, rest = [], []
    for k, members in enumerate(subsets):
        if members.size < source_size:
            raise InsufficientDataError(f"subset {k} has {members.size} rows, need {source_size}")
        perm = rng.permutation(members)
        src_idx.append(np.sort(perm[:source_size]))
        rest.append(perm[source_size:])
    union = np.concatenate(rest)
    if union.size < source_size:
        raise InsufficientDataError("not enough rows left for the calibration set")
    cal_idx = np.sort(rng.choice(union, source_size, replace=False))
    taken = np.zeros(raw.n, dtype=bool)
    taken[cal_idx] = True
    pools = [np.sort(r[~taken[r]]) for r in rest]

    def tag(idx, k):
        ds = base.subset(idx)
        if ds.source_ids is None:
            ds.source_ids = np.full(ds.n, k, dtype=np.int64)
        return ds

    sources = [tag(idx, k) for k, idx in enumerate(src_idx)]
    cal = base.subset(cal_idx)
    if cal.source_ids is None:
        # recover subset membership for audit purposes
        owner = np.empty(raw.n, dtype=np.int64)
        for k, members in enumerate(subsets):
            owner[members] = k
        cal.source_ids = owner[cal_idx]
    return SourceCollection(sources, cal, [tag(idx, k) for k, idx in enumerate(pools)])


def sample_mixture(pools, lam, n: int, seed: int = 0) -> DataSet:
    """Draw ``n`` rows: source ``k`` with probability ``lam[k]``, rows without replacement.

    ``pools`` is a :class:`SourceCollection` or a list of per-source datasets.
    """
    pools = pools.pools if isinstance(pools, SourceCollection) else list(pools)
    lam = np.asarray(lam, dtype=np.float64)
    if lam.size != len(pools) or np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-9:
        raise ValueError("lam must lie on the simplex with one entry per source")
    rng = np.random.default_rng(seed)
    if n == 0:
        d = pools[0].d
        return DataSet(np.zeros((0, d)), np.zeros(0), np.zeros(0, dtype=np.int64),
                       np.zeros(0, dtype=np.int64))
    counts = rng.multinomial(n, lam / lam.sum())
    parts = []
    for k, (c, pool) in enumerate(zip(counts, pools)):
        if c > pool.n:
            raise InsufficientDataError(f"pool {k} has {pool.n} rows, mixture needs {c}")
        if c:
            part = pool.subset(rng.choice(pool.n, c, replace=False))
            if part.source_ids is None:
                part.source_ids = np.full(c, k, dtype=np.int64)
            parts.append(part)
    return DataSet.concat(parts)


def perturb_labels(data: DataSet, lo_factor: float = 1.0, hi_factor: float = 1.5,
                   seed: int = 0) -> DataSet:
    """Multiply each label by an independent ``U(lo_factor, hi_factor)`` factor."""
    if hi_factor < lo_factor:
        raise ValueError("hi_factor must be >= lo_factor")
    if lo_factor == hi_factor:
        delta = np.full(data.n, float(lo_factor))
    else:
        delta = np.random.default_rng(seed).uniform(lo_factor, hi_factor, data.n)
    return DataSet(data.features.copy(), data.labels * delta, data.source_ids, data.indices)


def delta_grid(lo: float = 1.0, hi: float = 1.5, step: float = 0.05) -> np.ndarray:
    """Evenly spaced perturbation factors including both endpoints."""
    n = int(round((hi - lo) / step)) + 1
    return np.round(lo + step * np.arange(n), 10)


# ---------------------------------------------------------------------------
# CSV ingestion


def load_schema(path) -> dict:
    """Read a YAML mapping ``column name -> role``."""
    with open(path, encoding="utf-8") as fh:
        schema = yaml.safe_load(fh)
    if isinstance(schema, dict) and "columns" in schema:
        schema = schema["columns"]
    if not isinstance(schema, dict):
        raise SchemaError("schema must map column names to roles")
    return schema


def _check_schema(schema: dict) -> None:
    for col, role in schema.items():
        if role not in ROLES:
            raise SchemaError(f"column {col!r}: unknown role {role!r} (expected one of {ROLES})")
    roles = list(schema.values())
    if roles.count("label") != 1:
        raise SchemaError("schema must declare exactly one label column")
    if "feature" not in roles:
        raise SchemaError("schema must declare at least one feature column")
    if roles.count("source") > 1:
        raise SchemaError("schema may declare at most one source column")


def load_csv(path, schema) -> DataSet:
    """Load a headered CSV into a :class:`DataSet` according to column roles.

    ``schema`` is a dict or a path to a YAML schema file. Row numbers in
    error messages count the header as row 1.
    """
    if not isinstance(schema, dict):
        schema = load_schema(schema)
    _check_schema(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [c for c in schema if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        pos = {c: header.index(c) for c in schema}
        feat_cols = [c for c, r in schema.items() if r == "feature"]
        label_col = next(c for c, r in schema.items() if r == "label")
        src_col = next((c for c, r in schema.items() if r == "source"), None)
        rows_x, rows_y, rows_s = [], [], []
        for rownum, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise CsvParseError(f"{path}: row {rownum} has {len(record)} fields, "
                                    f"expected {len(header)}", rownum)
            vals = {}
            for c in feat_cols + [label_col] + ([src_col] if src_col else []):
                cell = record[pos[c]].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise CsvParseError(f"{path}: row {rownum}, column {c!r}: "
                                        f"cannot parse {cell!r}", rownum) from None
                if not np.isfinite(v):
                    raise NonFiniteValueError(f"{path}: row {rownum}, column {c!r}: "
                                              f"non-finite value {cell!r}", rownum)
                vals[c] = v
            rows_x.append([vals[c] for c in feat_cols])
            rows_y.append(vals[label_col])
            if src_col:
                if vals[src_col] != int(vals[src_col]):
                    raise CsvParseError(f"{path}: row {rownum}: source id must be an integer",
                                        rownum)
                rows_s.append(int(vals[src_col]))
    x = np.array(rows_x, dtype=np.float64).reshape(len(rows_x), len(feat_cols))
    return DataSet(x, np.array(rows_y), np.array(rows_s) if src_col else None)


def write_csv(path, data: DataSet, feature_names=None) -> None:
    """Write a dataset with columns ``x0..x{d-1}, y[, source]`` (``repr`` floats)."""
    names = feature_names or [f"x{j}" for j in range(data.d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(names) + ["y"] + (["source"] if data.source_ids is not None else []))
        for i in range(data.n):
            row = [repr(float(v)) for v in data.features[i]] + [repr(float(data.labels[i]))]
            if data.source_ids is not None:
                row.append(str(int(data.source_ids[i])))
            w.writerow(row)


def default_schema(d: int, with_source: bool) -> dict:
    schema = {f"x{j}": "feature" for j in range(d)}
    schema["y"] = "label"
    if with_source:
        schema["source"] = "source"
    return schema
