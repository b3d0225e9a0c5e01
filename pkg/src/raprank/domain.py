"""Schemas, rows and multiset datasets over a discrete categorical domain.

A :class:`Domain` is an ordered list of categorical attributes.  Rows are
vectors of category indices; a :class:`Dataset` is a multiset of rows stored
as an ``(n, d)`` integer array in ingestion order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class SchemaError(ValueError):
    """Raised for malformed schemas, configs or input files."""


@dataclass(frozen=True)
class Attribute:
    name: str
    labels: tuple[str, ...]
    bins: int | None = None

    @property
    def cardinality(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise SchemaError(f"unknown label {label!r} for attribute {self.name!r}") from None


@dataclass(frozen=True)
class Domain:
    attributes: tuple[Attribute, ...]
    hierarchy: tuple[str, ...] = ()

    def __post_init__(self):
        seen = set()
        for attr in self.attributes:
            if attr.name in seen:
                raise SchemaError(f"duplicate attribute {attr.name!r}")
            seen.add(attr.name)
            if attr.cardinality < 1:
                raise SchemaError(f"attribute {attr.name!r} has no categories")
            if len(set(attr.labels)) != attr.cardinality:
                raise SchemaError(f"attribute {attr.name!r} has repeated labels")
        for col in self.hierarchy:
            if col not in seen:
                raise SchemaError(f"hierarchy column {col!r} is not an attribute")

    @classmethod
    def from_cardinalities(cls, dims: Sequence[int], names: Sequence[str] | None = None) -> "Domain":
        names = names or [f"a{i}" for i in range(len(dims))]
        return cls(tuple(Attribute(n, tuple(str(v) for v in range(c))) for n, c in zip(names, dims)))

    @property
    def d(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(a.cardinality for a in self.attributes)

    @property
    def onehot_width(self) -> int:
        return int(sum(self.dims))

    @property
    def offsets(self) -> np.ndarray:
        """Start column of each attribute's one-hot block."""
        return np.concatenate([[0], np.cumsum(self.dims)[:-1]]).astype(np.intp)

    @property
    def size(self) -> int:
        """Number of points in the row space."""
        return int(np.prod(self.dims, dtype=np.int64))

    def attr_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown attribute {name!r}") from None

    def validate_rows(self, rows: np.ndarray) -> None:
        if rows.ndim != 2 or rows.shape[1] != self.d:
            raise SchemaError(f"rows must have shape (n, {self.d}), got {rows.shape}")
        bad = (rows < 0) | (rows >= np.asarray(self.dims))
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise SchemaError(f"row {i}: value {rows[i, j]} out of range for {self.names[j]!r}")

    def drop(self, name: str) -> "Domain":
        j = self.attr_index(name)
        attrs = self.attributes[:j] + self.attributes[j + 1:]
        return Domain(attrs, tuple(h for h in self.hierarchy if h != name))

    def labels_of(self, row: Sequence[int]) -> list[str]:
        return [a.labels[v] for a, v in zip(self.attributes, row)]

    def all_rows(self) -> np.ndarray:
        """Every point of the row space in lexicographic order."""
        grids = np.indices(self.dims).reshape(self.d, -1).T
        return grids.astype(np.int64)


def build_domain(config: Mapping | str | Path) -> Domain:
    """Build a Domain from a schema config (mapping, JSON text or path).

    Each attribute entry needs ``name`` and one of ``labels``, ``cardinality``
    or ``bins``.  Binned attributes get labels ``bin0 .. bin{n-1}``.
    """
    if isinstance(config, Path) or (isinstance(config, str) and not config.lstrip().startswith("{")):
        config = json.loads(Path(config).read_text())
    elif isinstance(config, str):
        config = json.loads(config)
    if "attributes" not in config or not isinstance(config["attributes"], list):
        raise SchemaError("schema needs an 'attributes' list")

    attrs = []
    seen = set()
    for i, entry in enumerate(config["attributes"]):
        name = entry.get("name")
        if not name:
            raise SchemaError(f"attribute #{i} has no name")
        if name in seen:
            raise SchemaError(f"duplicate attribute {name!r}")
        seen.add(name)
        bins = entry.get("bins")
        if "labels" in entry:
            labels = tuple(str(x) for x in entry["labels"])
        elif bins is not None:
            if int(bins) < 1:
                raise SchemaError(f"attribute {name!r}: bins must be >= 1")
            labels = tuple(f"bin{b}" for b in range(int(bins)))
        elif "cardinality" in entry:
            card = int(entry["cardinality"])
            if card < 1:
                raise SchemaError(f"attribute {name!r}: cardinality must be >= 1")
            labels = tuple(str(v) for v in range(card))
        else:
            raise SchemaError(f"attribute {name!r} needs labels, cardinality or bins")
        if not labels:
            raise SchemaError(f"attribute {name!r} has an empty category list")
        if len(set(labels)) != len(labels):
            raise SchemaError(f"attribute {name!r} has repeated labels")
        attrs.append(Attribute(name, labels, int(bins) if bins is not None else None))
    return Domain(tuple(attrs), tuple(config.get("hierarchy", ())))


@dataclass
class Dataset:
    """A multiset of rows; ``rows[i]`` is the i-th row instance."""

    domain: Domain
    rows: np.ndarray
    bin_edges: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64).reshape(-1, self.domain.d)
        self.domain.validate_rows(self.rows)

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    def unique(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct rows in lexicographic order and their multiplicities."""
        if self.n == 0:
            return np.empty((0, self.domain.d), np.int64), np.empty(0, np.int64)
        return np.unique(self.rows, axis=0, return_counts=True)

    @property
    def u_unique(self) -> int:
        return len(self.unique()[0])

    def counts(self) -> dict[tuple[int, ...], int]:
        rows, counts = self.unique()
        return {tuple(int(v) for v in r): int(c) for r, c in zip(rows, counts)}

    def row_set(self) -> set[tuple[int, ...]]:
        return set(self.counts())

    def __contains__(self, row) -> bool:
        return bool(np.any(np.all(self.rows == np.asarray(row), axis=1)))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.domain.names)
            for r in self.rows:
                w.writerow(self.domain.labels_of(r))


def _bin_edges(values: np.ndarray, n_bins: int) -> np.ndarray:
    # equal-frequency cut points: the value at sorted position floor(k n / n_bins)
    s = np.sort(values, kind="stable")
    n = len(s)
    pos = (np.arange(1, n_bins) * n) // n_bins
    return s[pos]


def _assign_bins(values: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    return np.searchsorted(np.asarray(edges, dtype=float), values, side="right")


def ingest_csv(path: str | Path, domain: Domain, binning: Mapping[str, int] | None = None,
               bin_edges: Mapping[str, Sequence[float]] | None = None) -> Dataset:
    """Read a headed CSV into a Dataset.

    Columns listed in ``binning`` (or attributes declared with ``bins`` in the
    schema) are parsed as numbers and cut into equal-frequency bins.  Passing
    ``bin_edges`` reuses a previously computed discretization instead, so
    target and baseline files share bins.  Row order is preserved.
    """
    binning = dict(binning or {})
    for a in domain.attributes:
        if a.bins is not None:
            binning.setdefault(a.name, a.bins)
    bin_edges = {k: list(v) for k, v in (bin_edges or {}).items()}

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        records = [rec for rec in reader if rec]

    header = [h.strip() for h in header]
    cols = {}
    for name in domain.names:
        if name not in header:
            raise SchemaError(f"{path}: column {name!r} missing")
        cols[name] = header.index(name)

    out = np.empty((len(records), domain.d), dtype=np.int64)
    edges_used: dict[str, list[float]] = {}
    for j, attr in enumerate(domain.attributes):
        c = cols[attr.name]
        raw = [rec[c].strip() if c < len(rec) else "" for rec in records]
        if attr.name in binning or attr.name in bin_edges:
            vals = np.empty(len(raw))
            for i, v in enumerate(raw):
                try:
                    vals[i] = float(v)
                except ValueError:
                    raise SchemaError(f"{path}: row {i + 1}, column {attr.name!r}: "
                                      f"non-numeric value {v!r}") from None
            n_bins = binning.get(attr.name, attr.cardinality)
            if n_bins != attr.cardinality:
                raise SchemaError(f"column {attr.name!r}: {n_bins} bins but {attr.cardinality} labels")
            edges = bin_edges.get(attr.name)
            if edges is None:
                edges = _bin_edges(vals, n_bins).tolist() if len(vals) else []
            edges_used[attr.name] = [float(e) for e in edges]
            out[:, j] = _assign_bins(vals, edges)
        else:
            lookup = {lab: k for k, lab in enumerate(attr.labels)}
            for i, v in enumerate(raw):
                k = lookup.get(v)
                if k is None:
                    raise SchemaError(f"{path}: row {i + 1}, column {attr.name!r}: unknown label {v!r}")
                out[i, j] = k
    return Dataset(domain, out, edges_used)


def save_bin_edges(edges: Mapping[str, Sequence[float]], path: str | Path) -> None:
    Path(path).write_text(json.dumps({k: list(v) for k, v in edges.items()}, indent=2, sort_keys=True))


def load_bin_edges(path: str | Path) -> dict[str, list[float]]:
    return json.loads(Path(path).read_text())


def encode_onehot(row: Sequence[int] | np.ndarray, domain: Domain) -> np.ndarray:
    """One-hot encode one row (1-D input) or many rows (2-D input)."""
    rows = np.asarray(row, dtype=np.int64)
    single = rows.ndim == 1
    rows = rows.reshape(-1, domain.d)
    domain.validate_rows(rows)
    out = np.zeros((rows.shape[0], domain.onehot_width))
    out[np.arange(rows.shape[0])[:, None], rows + domain.offsets] = 1.0
    return out[0] if single else out


def decode_onehot(vector: np.ndarray, domain: Domain) -> tuple[int, ...]:
    vector = np.asarray(vector)
    if vector.shape != (domain.onehot_width,):
        raise SchemaError(f"expected vector of length {domain.onehot_width}, got {vector.shape}")
    row = []
    for attr, off in zip(domain.attributes, domain.offsets):
        block = vector[off:off + attr.cardinality]
        hot = np.flatnonzero(block == 1)
        if len(hot) != 1 or np.count_nonzero(block) != 1:
            raise SchemaError(f"block {attr.name!r} must have exactly one hot bit, got {block.tolist()}")
        row.append(int(hot[0]))
    return tuple(row)


def split_holdout(data: Dataset, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Random half split: target gets ceil(n/2) row instances, holdout floor(n/2)."""
    if data.n < 2:
        raise SchemaError(f"need at least 2 rows to split, got {data.n}")
    perm = rng.permutation(data.n)
    cut = (data.n + 1) // 2
    a, b = np.sort(perm[:cut]), np.sort(perm[cut:])
    return Dataset(data.domain, data.rows[a], data.bin_edges), Dataset(data.domain, data.rows[b], data.bin_edges)


def concat(datasets: Iterable[Dataset]) -> Dataset:
    """Multiset union."""
    datasets = list(datasets)
    return Dataset(datasets[0].domain, np.concatenate([d.rows for d in datasets]))
