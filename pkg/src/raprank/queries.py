"""CNF statistical queries: exact evaluation on datasets, multilinear relaxation
on per-attribute probability rows, and analytic gradients of the relaxation.

A query is a conjunction of clauses ``row[col] in S``.  On a relaxed row whose
attribute blocks are probability vectors, a clause scores ``sum(p[col][S])``
and a query scores the product of its clause scores; the answer is the mean
score over rows.  On one-hot rows this is exactly the counting query.

Internally every distinct clause becomes one column of a ``(width, n_clauses)``
indicator matrix ``M`` so that clause scores for all rows are ``P @ M``.
Queries are grouped by number of clauses; 1- and 2-clause groups use closed
forms (column means and a Gram matrix).  Longer queries share one product
column per distinct prefix of their first k-1 clauses, multiplied against the
last clause with a single matmul.
All reductions run row-major in a fixed order, so results are reproducible.
"""

from __future__ import annotations

import csv
import itertools
import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from raprank.domain import Dataset, Domain, SchemaError

NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class CnfQuery:
    """Conjunction of ``(attribute index, allowed category indices)`` clauses."""

    clauses: tuple[tuple[int, tuple[int, ...]], ...] = ()
    name: str = ""

    def __post_init__(self):
        cols = [c for c, _ in self.clauses]
        if len(set(cols)) != len(cols):
            raise SchemaError(f"query {self.name!r}: attribute used in more than one clause")
        for c, s in self.clauses:
            if len(s) == 0:
                raise SchemaError(f"query {self.name!r}: empty allowed set for attribute {c}")

    @property
    def k(self) -> int:
        return len(self.clauses)

    def validate(self, domain: Domain) -> None:
        for c, s in self.clauses:
            if not 0 <= c < domain.d:
                raise SchemaError(f"query {self.name!r}: attribute index {c} out of range")
            if min(s) < 0 or max(s) >= domain.dims[c]:
                raise SchemaError(f"query {self.name!r}: value out of range for {domain.names[c]!r}")

    def matches(self, row: Sequence[int]) -> bool:
        return all(row[c] in s for c, s in self.clauses)


def marginal(attrs: Sequence[int], values: Sequence[int]) -> CnfQuery:
    return CnfQuery(tuple((int(a), (int(v),)) for a, v in zip(attrs, values)))


@dataclass
class AnswerVector:
    values: np.ndarray
    provenance: str = "exact"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def __len__(self) -> int:
        return len(self.values)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query_id", "value"])
            for j, v in enumerate(self.values):
                w.writerow([j, format(float(v), ".17g")])

    @classmethod
    def from_csv(cls, path: str | Path, provenance: str = "external") -> "AnswerVector":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or "value" not in rows[0]:
            raise SchemaError(f"{path}: expected columns query_id,value")
        ids = [int(r["query_id"]) for r in rows]
        if ids != list(range(len(ids))):
            raise SchemaError(f"{path}: query_id must run 0..m-1 in order")
        return cls(np.array([float(r["value"]) for r in rows]), provenance)


class _Compiled:
    """Matrix form of a workload used by the relaxed evaluation and gradient.

    Clause scores are handled as ``(K, N, n_clauses)`` stacks so that K
    independent relaxed datasets are evaluated in one pass; each slice is
    reduced on its own, so a run's numbers do not depend on its neighbours.
    """

    def __init__(self, domain: Domain, queries: Sequence[CnfQuery]):
        offsets = domain.offsets
        clause_ids: dict[tuple[int, tuple[int, ...]], int] = {}
        for q in queries:
            for clause in q.clauses:
                clause_ids.setdefault((clause[0], tuple(sorted(clause[1]))), len(clause_ids))
        nc = self.n_clauses = len(clause_ids)
        self.M = np.zeros((domain.onehot_width, nc))
        self.clause_cols = np.zeros(nc, dtype=np.intp)
        self.clause_lookup = np.zeros((nc, max(domain.dims)), dtype=bool)
        for (col, s), j in clause_ids.items():
            self.M[offsets[col] + np.asarray(s), j] = 1.0
            self.clause_cols[j] = col
            self.clause_lookup[j, list(s)] = True
        self.m = len(queries)

        by_k: dict[int, list[int]] = {}
        for i, q in enumerate(queries):
            by_k.setdefault(q.k, []).append(i)
        self.groups = []
        for k in sorted(by_k):
            qidx = np.asarray(by_k[k], dtype=np.intp)
            C = np.array([sorted(clause_ids[(c, tuple(sorted(s)))] for c, s in queries[i].clauses)
                          for i in by_k[k]], dtype=np.intp).reshape(len(qidx), k)
            extra = None
            if k >= 3:
                # queries sharing their first k-1 clauses share one product column
                prefixes, pref_id = np.unique(C[:, :-1], axis=0, return_inverse=True)
                pref_id = pref_id.reshape(-1).astype(np.intp)
                # 0/1 matrices: c @ gather[i] picks clause prefixes[:, i]; scatter[i] is its transpose
                scatter = [np.eye(nc)[prefixes[:, i]] for i in range(k - 1)]
                gather = [np.ascontiguousarray(m.T) for m in scatter]
                extra = (prefixes, pref_id, (gather, scatter),
                         _indicator(pref_id * nc + C[:, -1], len(prefixes) * nc))
            elif k == 2:
                extra = _indicator(C[:, 0] * nc + C[:, 1], nc * nc)
            elif k == 1:
                extra = _indicator(C[:, 0], nc)
            self.groups.append((k, qidx, C, extra))

    def clause_scores(self, P: np.ndarray) -> np.ndarray:
        return P @ self.M

    def answers(self, c: np.ndarray, idx: np.ndarray | None = None, cache: dict | None = None) -> np.ndarray:
        """Relaxed answers ``(K, m)`` from clause scores ``c`` of shape (K, N, n_clauses).

        ``cache`` keeps prefix products for a following ``clause_gradient``
        call on the same ``c``.  Queries outside ``idx`` are left at zero.
        """
        K, N, _ = c.shape
        out = np.zeros((K, self.m))
        gram = None
        for g, (k, qidx, C, extra) in self._select(idx):
            if k == 0:
                out[:, qidx] = 1.0
            elif k == 1:
                out[:, qidx] = c.sum(axis=1)[:, C[:, 0]] / N
            elif k == 2:
                if gram is None:
                    gram = c.transpose(0, 2, 1) @ c
                out[:, qidx] = gram[:, C[:, 0], C[:, 1]] / N
            else:
                X = _product_columns(c, extra[2][0])
                if cache is not None:
                    cache[g] = X
                out[:, qidx] = (X.transpose(0, 2, 1) @ c)[:, extra[1], C[:, -1]] / N
        return out

    def clause_gradient(self, c: np.ndarray, r: np.ndarray, idx: np.ndarray | None = None,
                        cache: dict | None = None) -> np.ndarray:
        """Gradient of ``sum_j r[:, j] * answer[:, j]`` w.r.t. clause scores, per run."""
        K, N, nc = c.shape
        G = np.zeros_like(c)
        R2 = np.zeros((K, nc * nc))
        for g, (k, qidx, C, extra) in self._select(idx):
            rk = r[:, qidx]
            if k == 0:
                continue
            if k == 1:
                G += (rk @ extra)[:, None, :] / N
            elif k == 2:
                R2 += rk @ extra
            else:
                prefixes, _, (gather, scatter), pair = extra
                R = (rk @ pair).reshape(K, len(prefixes), nc)
                X = cache[g] if cache is not None and g in cache else _product_columns(c, gather)
                G += X @ R / N
                # weight of each prefix product per row, then product rule over the prefix
                H = c @ np.ascontiguousarray(R.transpose(0, 2, 1)) / N
                G += _product_gradient(c, gather, scatter, H)
        if R2.any():
            R2 = R2.reshape(K, nc, nc)
            G += c @ (R2 + R2.transpose(0, 2, 1)) / N
        return G

    def _select(self, idx):
        if idx is None:
            yield from enumerate(self.groups)
            return
        keep = np.zeros(self.m, dtype=bool)
        keep[idx] = True
        for g, (k, qidx, C, extra) in enumerate(self.groups):
            sel = keep[qidx]
            if not sel.any():
                continue
            if k >= 3:
                extra = (extra[0], extra[1][sel], extra[2], extra[3][sel])
            elif k in (1, 2):
                extra = extra[sel]
            yield g, (k, qidx[sel], C[sel], extra)


def _indicator(cols: np.ndarray, width: int) -> sp.csr_matrix:
    """Sparse 0/1 matrix with a single 1 per row at ``cols``; ``r @ it`` scatter-adds."""
    n = len(cols)
    return sp.csr_matrix((np.ones(n), (np.arange(n), cols)), shape=(n, width))


def _product_columns(c: np.ndarray, gather: Sequence[np.ndarray]) -> np.ndarray:
    X = c @ gather[0]
    for g in gather[1:]:
        X *= c @ g
    return X


def _product_gradient(c: np.ndarray, gather: Sequence[np.ndarray], scatter: Sequence[np.ndarray],
                      H: np.ndarray) -> np.ndarray:
    """d/dc of sum_{n,p} H[..., n, p] * prod_i (c @ gather[i])[..., n, p]."""
    width = len(gather)
    cols = [c @ g for g in gather]
    prefix = [None]
    for i in range(1, width):
        prefix.append(cols[0] if i == 1 else prefix[-1] * cols[i - 1])
    G = np.zeros_like(c)
    suffix = H
    for i in range(width - 1, -1, -1):
        G += (suffix if i == 0 else prefix[i] * suffix) @ scatter[i]
        if i:
            suffix = suffix * cols[i]
    return G


@dataclass
class QueryWorkload:
    """Ordered list of CNF queries over one domain; order fixes answer indexing."""

    domain: Domain
    queries: list[CnfQuery] = field(default_factory=list)

    def __post_init__(self):
        for q in self.queries:
            q.validate(self.domain)

    @property
    def m(self) -> int:
        return len(self.queries)

    def __len__(self) -> int:
        return self.m

    @cached_property
    def compiled(self) -> _Compiled:
        return _Compiled(self.domain, self.queries)

    def subset(self, idx: Sequence[int]) -> "QueryWorkload":
        return QueryWorkload(self.domain, [self.queries[i] for i in idx])


def eval_query(q: CnfQuery, data: Dataset) -> float:
    """Fraction of row instances that satisfy every clause of ``q``."""
    hit = np.ones(data.n, dtype=bool)
    for col, s in q.clauses:
        hit &= np.isin(data.rows[:, col], s)
    return float(hit.sum()) / data.n


def eval_workload(W: QueryWorkload, data: Dataset) -> AnswerVector:
    """Exact answers for every query in a single pass over boolean clause hits."""
    if data.n == 0:
        raise SchemaError("cannot evaluate queries on an empty dataset")
    comp = W.compiled
    hits = comp.clause_lookup[np.arange(comp.n_clauses), data.rows[:, comp.clause_cols]] \
        if comp.n_clauses else np.zeros((data.n, 0), dtype=bool)
    out = np.zeros(W.m)
    for k, qidx, C, _ in comp.groups:
        if k == 0:
            out[qidx] = 1.0
            continue
        sat = hits[:, C[:, 0]].copy()
        for i in range(1, k):
            sat &= hits[:, C[:, i]]
        out[qidx] = sat.sum(axis=0) / data.n
    return AnswerVector(out, "exact")


def check_blocks(P: np.ndarray, domain: Domain, tol: float = NORMALIZATION_TOL) -> None:
    if P.ndim != 2 or P.shape[1] != domain.onehot_width:
        raise SchemaError(f"relaxed rows must have shape (N, {domain.onehot_width}), got {P.shape}")
    if (P < -tol).any():
        raise SchemaError("relaxed rows contain negative probabilities")
    sums = np.add.reduceat(P, domain.offsets, axis=1)
    if np.abs(sums - 1.0).max(initial=0.0) > tol:
        raise SchemaError("relaxed row blocks are not normalized")


def _probs(relaxed) -> np.ndarray:
    return relaxed.probs() if hasattr(relaxed, "probs") else np.asarray(relaxed, dtype=float)


def relaxed_eval(W: QueryWorkload, relaxed) -> AnswerVector:
    """Multilinear relaxation of ``W`` on an N x width block-probability matrix
    (or anything with a ``probs()`` method, such as a RelaxedDataset)."""
    P = _probs(relaxed)
    check_blocks(P, W.domain)
    comp = W.compiled
    return AnswerVector(comp.answers(comp.clause_scores(P)[None])[0], "relaxed")


def relaxed_gradient(W: QueryWorkload, relaxed, r: np.ndarray) -> np.ndarray:
    """``sum_j r_j * d answer_j / d P`` as an array shaped like ``P``."""
    P = _probs(relaxed)
    check_blocks(P, W.domain)
    r = np.asarray(r, dtype=float)
    if r.shape != (W.m,):
        raise SchemaError(f"residual weights must have length {W.m}, got {r.shape}")
    comp = W.compiled
    c = comp.clause_scores(P)[None]
    return (comp.clause_gradient(c, r[None]) @ comp.M.T)[0]


def all_k_way_marginals(domain: Domain, k: int, attributes: Sequence[int] | None = None) -> QueryWorkload:
    """Every k-way marginal: subsets in lexicographic order, values in odometer order."""
    attrs = list(range(domain.d)) if attributes is None else list(attributes)
    if not 1 <= k <= len(attrs):
        raise SchemaError(f"k must be in [1, {len(attrs)}], got {k}")
    queries = []
    for subset in itertools.combinations(attrs, k):
        for values in itertools.product(*(range(domain.dims[a]) for a in subset)):
            queries.append(marginal(subset, values))
    return QueryWorkload(domain, queries)


def count_k_way_marginals(dims: Sequence[int], k: int) -> int:
    return int(sum(np.prod(s) for s in itertools.combinations(dims, k)))


_RANGE = re.compile(r"^\s*(.+?)\s*(?:\.\.|-)\s*(.+?)\s*$")


def _expand(attr, items, where: str) -> tuple[int, ...]:
    out: set[int] = set()
    for item in items:
        if isinstance(item, Mapping):
            lo, hi = str(item["from"]), str(item["to"])
        else:
            item = str(item)
            if item in attr.labels:
                out.add(attr.labels.index(item))
                continue
            m = _RANGE.match(item)
            if not m:
                raise SchemaError(f"{where}: unknown label {item!r} for column {attr.name!r}")
            lo, hi = m.group(1), m.group(2)
        for end in (lo, hi):
            if end not in attr.labels:
                raise SchemaError(f"{where}: unknown label {end!r} for column {attr.name!r}")
        a, b = attr.labels.index(lo), attr.labels.index(hi)
        out.update(range(a, b + 1))
    if not out:
        raise SchemaError(f"{where}: empty allowed set for column {attr.name!r}")
    return tuple(sorted(out))


def load_cnf_workload(config: Mapping | str | Path, domain: Domain) -> QueryWorkload:
    """Build a workload from a JSON config.

    ``{"marginals": {"k": 2}}`` expands to all k-way marginals; ``"cells"`` lists
    table cells, each either a list of clauses or ``{"name", "clauses", "count"}``
    where a clause is ``{"col": name, "in": [labels or "lo-hi" ranges]}``.
    Marginals come first, then cells in listed order.
    """
    if isinstance(config, (str, Path)):
        config = json.loads(Path(config).read_text())
    queries: list[CnfQuery] = []
    if "marginals" in config:
        block = config["marginals"]
        attrs = [domain.attr_index(a) for a in block["attributes"]] if "attributes" in block else None
        for k in np.atleast_1d(block["k"]):
            queries.extend(all_k_way_marginals(domain, int(k), attrs).queries)
    for i, cell in enumerate(config.get("cells", [])):
        name = cell.get("name", f"cell{i}") if isinstance(cell, Mapping) else f"cell{i}"
        clauses_cfg = cell.get("clauses", []) if isinstance(cell, Mapping) else cell
        where = f"cell {name!r}"
        clauses = []
        for cl in clauses_cfg:
            if cl.get("col") not in domain.names:
                raise SchemaError(f"{where}: unknown column {cl.get('col')!r}")
            j = domain.attr_index(cl["col"])
            clauses.append((j, _expand(domain.attributes[j], cl.get("in", []), where)))
        queries.append(CnfQuery(tuple(clauses), name))
    if "marginals" not in config and "cells" not in config:
        raise SchemaError("workload config needs 'marginals' or 'cells'")
    return QueryWorkload(domain, queries)


def published_answers(config: Mapping | str | Path, W: QueryWorkload, total: float | None = None) -> AnswerVector:
    """Convert published cell counts in a workload config into fractions.

    The divisor is the count of a constant-true cell when one is present,
    otherwise ``total`` (the population size, supplied out of band).
    Only configs without a ``marginals`` block carry counts.
    """
    if isinstance(config, (str, Path)):
        config = json.loads(Path(config).read_text())
    cells = config.get("cells", [])
    if "marginals" in config or len(cells) != W.m:
        raise SchemaError("published counts need a cells-only workload config")
    counts = []
    for i, cell in enumerate(cells):
        if not isinstance(cell, Mapping) or "count" not in cell:
            raise SchemaError(f"cell #{i} has no published count")
        counts.append(float(cell["count"]))
    for q, cnt in zip(W.queries, counts):
        if q.k == 0:
            total = cnt
            break
    if not total:
        raise SchemaError("no total-population cell; pass the population size")
    return AnswerVector(np.asarray(counts) / total, "external")
