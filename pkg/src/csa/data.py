"""Dataset handling: CSV ingestion, imputation, standardization, stratified
splitting, and nearest-neighbour proxy counterfactuals.

A dataset is loaded raw (missing cells flagged), split into train/valid/test
stratified on the (event x treatment) cells, imputed and standardized with
statistics computed on the training split only, and finally exposes an
encoded feature matrix (continuous columns z-scored, categoricals one-hot).
"""

from __future__ import annotations

import csv
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

SPLITS = ("train", "valid", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
SCALER_SCHEMA_VERSION = 1


class DataError(ValueError):
    """Malformed input data or an operation out of order."""


class StratificationError(DataError):
    """Raised when a split satisfying the stratification bounds is impossible."""


@dataclass(frozen=True)
class Column:
    name: str
    kind: str  # "continuous" | "categorical"


@dataclass(frozen=True)
class CovariateSchema:
    columns: tuple[Column, ...]

    def __post_init__(self):
        if not self.columns:
            raise DataError("schema needs at least one covariate column")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError("covariate column names must be unique")
        for c in self.columns:
            if c.kind not in ("continuous", "categorical"):
                raise DataError(f"unknown column kind {c.kind!r} for {c.name!r}")

    @property
    def names(self):
        return [c.name for c in self.columns]

    @staticmethod
    def of(*cols) -> "CovariateSchema":
        return CovariateSchema(tuple(Column(n, k) for n, k in cols))


@dataclass(frozen=True)
class ColumnMap:
    """Names of the observed-time / event / treatment columns in a CSV."""

    y: str = "y"
    delta: str = "delta"
    a: str = "a"


@dataclass
class SubjectRecord:
    x: np.ndarray
    a: int
    y: float
    delta: int


@dataclass
class ProxyCounterfactual:
    subject_index: int
    y_cf: float
    delta_cf: int
    neighbor_index: int
    distance: float


@dataclass
class Scaler:
    """Per-column transform parameters, estimated on the training split."""

    entries: list[dict]

    def to_json(self) -> str:
        return json.dumps({"schema_version": SCALER_SCHEMA_VERSION,
                           "columns": self.entries}, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Scaler":
        payload = json.loads(text)
        if payload.get("schema_version") != SCALER_SCHEMA_VERSION:
            raise DataError("unsupported scaler schema version")
        return Scaler(payload["columns"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @staticmethod
    def load(path) -> "Scaler":
        with open(path) as fh:
            return Scaler.from_json(fh.read())


@dataclass
class SurvivalDataset:
    schema: CovariateSchema
    raw_columns: list[np.ndarray]  # float arrays (NaN missing) / object arrays (None missing)
    y: np.ndarray
    delta: np.ndarray
    a: np.ndarray
    split: np.ndarray | None = None
    features: np.ndarray | None = None
    feature_names: list[str] | None = None
    scaler: Scaler | None = None

    def __post_init__(self):
        n = self.y.size
        if np.any(self.y <= 0):
            raise DataError("observed times must be strictly positive")
        if not set(np.unique(self.delta)).issubset({0, 1}):
            raise DataError("event indicator must be 0/1")
        if not set(np.unique(self.a)).issubset({0, 1}):
            raise DataError("treatment indicator must be 0/1")
        for col, values in zip(self.schema.columns, self.raw_columns):
            if len(values) != n:
                raise DataError(f"column {col.name!r} has wrong length")

    def __len__(self) -> int:
        return int(self.y.size)

    def missing_mask(self) -> np.ndarray:
        n = len(self)
        mask = np.zeros((n, len(self.schema.columns)), dtype=bool)
        for j, (col, values) in enumerate(zip(self.schema.columns, self.raw_columns)):
            if col.kind == "continuous":
                mask[:, j] = np.isnan(values)
            else:
                mask[:, j] = np.array([v is None for v in values])
        return mask

    def split_indices(self, name: str) -> np.ndarray:
        if self.split is None:
            raise DataError("dataset has no split labels yet")
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return np.flatnonzero(self.split == name)

    def record(self, i: int) -> SubjectRecord:
        if self.features is None:
            raise DataError("dataset is not standardized yet")
        return SubjectRecord(x=self.features[i].copy(), a=int(self.a[i]),
                             y=float(self.y[i]), delta=int(self.delta[i]))

    @property
    def records(self) -> list[SubjectRecord]:
        return [self.record(i) for i in range(len(self))]

    def copy(self) -> "SurvivalDataset":
        return SurvivalDataset(
            schema=self.schema,
            raw_columns=[c.copy() for c in self.raw_columns],
            y=self.y.copy(), delta=self.delta.copy(), a=self.a.copy(),
            split=None if self.split is None else self.split.copy(),
            features=None if self.features is None else self.features.copy(),
            feature_names=None if self.feature_names is None else list(self.feature_names),
            scaler=self.scaler,
        )


def from_arrays(schema: CovariateSchema, X: np.ndarray, y, delta, a) -> SurvivalDataset:
    """Build a dataset from a complete covariate matrix (no missing cells)."""
    X = np.asarray(X)
    if X.shape[1] != len(schema.columns):
        raise DataError("covariate matrix does not match the schema")
    columns = []
    for j, col in enumerate(schema.columns):
        if col.kind == "continuous":
            columns.append(X[:, j].astype(np.float64))
        else:
            columns.append(np.array([str(v) for v in X[:, j]], dtype=object))
    return SurvivalDataset(schema=schema, raw_columns=columns,
                           y=np.asarray(y, dtype=np.float64),
                           delta=np.asarray(delta, dtype=np.int64),
                           a=np.asarray(a, dtype=np.int64))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def load_csv(path, schema: CovariateSchema, column_map: ColumnMap = ColumnMap()) -> SurvivalDataset:
    """Read a comma-separated file with a header row; empty cells are missing.

    The y/delta/a columns must be complete; covariate gaps are flagged for
    imputation. Malformed rows raise with the (1-based) data row index.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        required = [column_map.y, column_map.delta, column_map.a] + schema.names
        for name in required:
            if name not in header:
                raise DataError(f"{path}: missing column {name!r}")
        pos = {name: header.index(name) for name in required}
        y_list, d_list, a_list = [], [], []
        cov_lists: list[list] = [[] for _ in schema.columns]
        for i, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataError(f"{path}: row {i}: expected {len(header)} cells, "
                                f"got {len(row)}")
            y_list.append(_parse_float(row[pos[column_map.y]], path, i, column_map.y))
            d_list.append(_parse_indicator(row[pos[column_map.delta]], path, i,
                                           column_map.delta))
            a_list.append(_parse_indicator(row[pos[column_map.a]], path, i,
                                           column_map.a))
            for j, col in enumerate(schema.columns):
                cell = row[pos[col.name]].strip()
                if col.kind == "continuous":
                    if cell == "":
                        cov_lists[j].append(np.nan)
                    else:
                        cov_lists[j].append(_parse_float(cell, path, i, col.name,
                                                         positive=False))
                else:
                    cov_lists[j].append(cell if cell != "" else None)
    y = np.array(y_list, dtype=np.float64)
    if np.any(y <= 0):
        bad = int(np.flatnonzero(y <= 0)[0]) + 1
        raise DataError(f"{path}: row {bad}: observed time must be positive")
    raw_columns = []
    for col, values in zip(schema.columns, cov_lists):
        if col.kind == "continuous":
            raw_columns.append(np.array(values, dtype=np.float64))
        else:
            raw_columns.append(np.array(values, dtype=object))
    return SurvivalDataset(schema=schema, raw_columns=raw_columns, y=y,
                           delta=np.array(d_list, dtype=np.int64),
                           a=np.array(a_list, dtype=np.int64))


def _parse_float(cell, path, row, name, positive=False):
    cell = cell.strip()
    if cell == "":
        raise DataError(f"{path}: row {row}: column {name!r} is empty")
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"{path}: row {row}: column {name!r} is not a number: "
                        f"{cell!r}") from None
    if not np.isfinite(value):
        raise DataError(f"{path}: row {row}: column {name!r} is not finite")
    return value


def _parse_indicator(cell, path, row, name):
    value = _parse_float(cell, path, row, name)
    if value not in (0.0, 1.0):
        raise DataError(f"{path}: row {row}: column {name!r} must be 0 or 1")
    return int(value)


# ---------------------------------------------------------------------------
# imputation / standardization
# ---------------------------------------------------------------------------


def impute_missing(dataset: SurvivalDataset) -> SurvivalDataset:
    """Fill covariate gaps with the training-split median (continuous) or
    mode (categorical). Statistics never look outside the training split."""
    if dataset.split is None:
        raise DataError("split the dataset before imputing (training statistics)")
    out = dataset.copy()
    train = out.split_indices("train")
    for j, col in enumerate(out.schema.columns):
        values = out.raw_columns[j]
        if col.kind == "continuous":
            gaps = np.isnan(values)
            if not gaps.any():
                continue
            train_vals = values[train]
            train_vals = train_vals[~np.isnan(train_vals)]
            if train_vals.size == 0:
                raise DataError(f"column {col.name!r} has no observed training values")
            values[gaps] = float(np.median(train_vals))
        else:
            gaps = np.array([v is None for v in values])
            if not gaps.any():
                continue
            train_vals = [values[i] for i in train if values[i] is not None]
            if not train_vals:
                raise DataError(f"column {col.name!r} has no observed training values")
            counts = Counter(train_vals)
            top = max(counts.values())
            mode = min(v for v, c in counts.items() if c == top)
            for i in np.flatnonzero(gaps):
                values[i] = mode
    return out


def standardize(dataset: SurvivalDataset) -> tuple[SurvivalDataset, Scaler]:
    """Z-score continuous columns and one-hot categoricals.

    Means, scales and category lists come from the training split only and
    are applied to every split. A zero-variance column keeps scale 1 and
    emits a warning. Categories unseen in training encode as all zeros.
    """
    if dataset.split is None:
        raise DataError("split the dataset before standardizing")
    if dataset.missing_mask().any():
        raise DataError("impute missing values before standardizing")
    out = dataset.copy()
    train = out.split_indices("train")
    blocks = []
    names = []
    entries = []
    for col, values in zip(out.schema.columns, out.raw_columns):
        if col.kind == "continuous":
            mean = float(np.mean(values[train]))
            scale = float(np.std(values[train]))  # population (ddof=0)
            if scale == 0.0:
                warnings.warn(f"column {col.name!r} has zero variance on the "
                              f"training split; scale set to 1", stacklevel=2)
                scale = 1.0
            blocks.append(((values - mean) / scale)[:, None])
            names.append(col.name)
            entries.append({"column": col.name, "kind": "continuous",
                            "mean": mean, "scale": scale})
        else:
            categories = sorted({values[i] for i in train})
            block = np.zeros((len(out), len(categories)))
            index = {c: k for k, c in enumerate(categories)}
            for i, v in enumerate(values):
                k = index.get(v)
                if k is not None:
                    block[i, k] = 1.0
            blocks.append(block)
            names.extend(f"{col.name}={c}" for c in categories)
            entries.append({"column": col.name, "kind": "categorical",
                            "categories": categories})
    out.features = np.hstack(blocks)
    out.feature_names = names
    out.scaler = Scaler(entries)
    return out, out.scaler


# ---------------------------------------------------------------------------
# stratified splitting
# ---------------------------------------------------------------------------


def stratified_split(dataset: SurvivalDataset, seed: int,
                     fractions=SPLIT_FRACTIONS) -> SurvivalDataset:
    """Assign train/valid/test labels stratified on (event x treatment) cells.

    Deterministic given the seed. Raises StratificationError when the
    resulting partition cannot satisfy the size and proportion bounds
    (split sizes within 2pp of the target fractions; per-split event and
    treatment rates within 3pp of the global rates).
    """
    n = len(dataset)
    if n < 20:
        raise StratificationError(f"need at least 20 records to split, got {n}")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must be three numbers summing to 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    labels = np.empty(n, dtype=object)
    cells = []
    kinds = []
    for d_val in (0, 1):
        for a_val in (0, 1):
            idx = np.flatnonzero((dataset.delta == d_val) & (dataset.a == a_val))
            if idx.size:
                cells.append(idx)
                kinds.append((d_val, a_val))
    counts = _best_cell_allocation(np.array([c.size for c in cells]), kinds,
                                   fractions, n)
    for idx, row in zip(cells, counts):
        shuffled = rng.permutation(idx)
        bounds = np.cumsum(row)
        labels[shuffled[:bounds[0]]] = "train"
        labels[shuffled[bounds[0]:bounds[1]]] = "valid"
        labels[shuffled[bounds[1]:bounds[2]]] = "test"
    out = dataset.copy()
    out.split = labels.astype(object)
    _verify_split(out, fractions)
    return out


def _best_cell_allocation(row_sums, kinds, fractions, n):
    """Pick, among all floor/ceil roundings of the proportional (cell x split)
    matrix, the one whose split sizes and per-split event/treatment rates
    deviate least from their targets. Small exhaustive search: each of the
    at most four cells admits at most three candidate rows."""
    import itertools as _it

    exact = row_sums[:, None] * np.asarray(fractions)[None, :]
    per_row_options = []
    for c in range(len(row_sums)):
        base = np.floor(exact[c]).astype(int)
        leftover = int(row_sums[c] - base.sum())
        options = []
        for extra in _it.combinations(range(3), leftover):
            row = base.copy()
            row[list(extra)] += 1
            options.append(row)
        per_row_options.append(options)
    global_event = sum(rs for rs, (d, _) in zip(row_sums, kinds) if d == 1) / n
    global_treat = sum(rs for rs, (_, a) in zip(row_sums, kinds) if a == 1) / n
    best_score, best = None, None
    for combo in _it.product(*per_row_options):
        k = np.vstack(combo)
        sizes = k.sum(axis=0)
        if (sizes == 0).any():
            continue
        score = np.max(np.abs(sizes / n - np.asarray(fractions))) / 0.02
        ev = sum(k[c] for c, (d, _) in enumerate(kinds) if d == 1)
        tr = sum(k[c] for c, (_, a) in enumerate(kinds) if a == 1)
        score = max(score,
                    np.max(np.abs(ev / sizes - global_event)) / 0.03,
                    np.max(np.abs(tr / sizes - global_treat)) / 0.03)
        if best_score is None or score < best_score - 1e-12:
            best_score, best = score, k
    if best is None:
        raise StratificationError("a stratification cell is too small to split")
    return best


def _verify_split(dataset: SurvivalDataset, fractions) -> None:
    n = len(dataset)
    global_event = dataset.delta.mean()
    global_treat = dataset.a.mean()
    for name, frac in zip(SPLITS, fractions):
        idx = dataset.split_indices(name)
        if idx.size == 0:
            raise StratificationError(f"{name} split is empty")
        if abs(idx.size / n - frac) > 0.02 + 1e-12:
            raise StratificationError(
                f"{name} split fraction {idx.size / n:.3f} deviates more than "
                f"2pp from {frac:.2f}")
        for what, values, target in (("event", dataset.delta, global_event),
                                     ("treatment", dataset.a, global_treat)):
            rate = values[idx].mean()
            if abs(rate - target) > 0.03 + 1e-12:
                raise StratificationError(
                    f"{name} split {what} rate {rate:.3f} deviates more than "
                    f"3pp from the global {target:.3f}; too few records in a "
                    f"stratification cell")


# ---------------------------------------------------------------------------
# nearest-neighbour proxy counterfactuals
# ---------------------------------------------------------------------------


def nn_proxy_counterfactuals(dataset: SurvivalDataset,
                             split: str = "valid") -> list[ProxyCounterfactual]:
    """Assign each subject of ``split`` the outcome of its nearest
    opposite-arm training subject (Euclidean distance on standardized
    covariates; ties broken by the lowest training index)."""
    if dataset.features is None:
        raise DataError("standardize the dataset before the neighbour search")
    train = dataset.split_indices("train")
    targets = dataset.split_indices(split)
    pools = {}
    for arm in (0, 1):
        pool = train[dataset.a[train] == arm]
        pools[arm] = pool
    proxies = []
    X = dataset.features
    for i in targets:
        arm = int(dataset.a[i])
        pool = pools[1 - arm]
        if pool.size == 0:
            raise DataError(f"training split has no subjects with arm {1 - arm}")
        diffs = X[pool] - X[i]
        dists = np.einsum("ij,ij->i", diffs, diffs)
        j = int(pool[np.argmin(dists)])  # pool is index-sorted: first win = lowest
        proxies.append(ProxyCounterfactual(
            subject_index=int(i), y_cf=float(dataset.y[j]),
            delta_cf=int(dataset.delta[j]), neighbor_index=j,
            distance=float(np.sqrt(dists.min()))))
    return proxies
