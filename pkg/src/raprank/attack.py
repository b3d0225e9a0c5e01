"""Repeated randomized relaxed projection with frequency-based confidence ranking.

Each of K runs starts from a fresh initialization (uniform scores, or a seed
dataset plus fresh noise), fits the released answers, and randomly rounds the
relaxed rows back to discrete rows.  The rounded rows of all runs are pooled
with multiplicity and ranked by how often they occur.
"""

from __future__ import annotations

import csv
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from raprank.domain import Dataset, Domain, SchemaError
from raprank.optimizer import (OptimizerAbort, OptimizerConfig, RelaxedDataset, init_from_dataset,
                               init_uniform, project_many)
from raprank.queries import AnswerVector, QueryWorkload

log = logging.getLogger(__name__)

DEFAULT_ROWS = 1000
# rough cap on elements per stacked (runs x rows x columns) intermediate
CHUNK_ELEMENTS = 400_000


def stage_rng(master_seed: int, run: int, stage: str) -> np.random.Generator:
    """Independent stream per (master seed, run index, stage)."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, run, zlib.crc32(stage.encode())]))


@dataclass
class ConfidenceRanking:
    """Unique rows in rank order (rank 1 first) with their pooled frequencies."""

    domain: Domain
    rows: np.ndarray
    frequencies: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64).reshape(-1, self.domain.d)
        self.frequencies = np.asarray(self.frequencies)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def ranks(self) -> np.ndarray:
        return np.arange(1, len(self) + 1)

    def entries(self) -> list[tuple[tuple[int, ...], float, int]]:
        return [(tuple(int(v) for v in r), f.item(), i + 1)
                for i, (r, f) in enumerate(zip(self.rows, self.frequencies))]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "frequency", *self.domain.names])
            for i, (r, f) in enumerate(zip(self.rows, self.frequencies)):
                freq = str(int(f)) if float(f).is_integer() else format(float(f), ".10g")
                w.writerow([i + 1, freq, *self.domain.labels_of(r)])

    @classmethod
    def from_csv(cls, path: str | Path, domain: Domain) -> "ConfidenceRanking":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            records = list(reader)
        if header[:2] != ["rank", "frequency"] or header[2:] != domain.names:
            raise SchemaError(f"{path}: ranking columns {header[2:]} do not match schema {domain.names}")
        rows = np.empty((len(records), domain.d), dtype=np.int64)
        freqs = np.empty(len(records))
        for i, rec in enumerate(records):
            if int(rec[0]) != i + 1:
                raise SchemaError(f"{path}: ranks must run 1..n in order")
            freqs[i] = float(rec[1])
            rows[i] = [a.index(lab) for a, lab in zip(domain.attributes, rec[2:])]
        if np.all(freqs == np.round(freqs)):
            freqs = freqs.astype(np.int64)
        return cls(domain, rows, freqs)


@dataclass
class AttackConfig:
    runs: int = 100
    draws: int = 1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    init: str = "uniform"  # "uniform" or "dataset"
    n_rows: int | None = None  # N'; default 1000 for uniform, seed size for dataset
    gap: float = 3.0
    noise_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError(f"runs must be >= 1, got {self.runs}")
        if self.draws < 1:
            raise ValueError(f"draws must be >= 1, got {self.draws}")
        if self.init not in ("uniform", "dataset"):
            raise ValueError(f"init must be 'uniform' or 'dataset', got {self.init!r}")


def randomized_round(relaxed: RelaxedDataset, rng: np.random.Generator, draws: int = 1) -> list[Dataset]:
    """Sample one category per attribute of every relaxed row, ``draws`` times."""
    domain = relaxed.domain
    P = relaxed.probs()
    N = P.shape[0]
    u = rng.random((draws, N, domain.d))
    out = np.empty((draws, N, domain.d), dtype=np.int64)
    for j, (off, card) in enumerate(zip(domain.offsets, domain.dims)):
        cum = np.cumsum(P[:, off:off + card], axis=1)
        # inverse CDF; "<=" keeps zero-mass categories unreachable
        idx = (cum[None, :, :] <= u[:, :, j, None]).sum(axis=2)
        out[:, :, j] = np.minimum(idx, card - 1)
    return [Dataset(domain, out[t]) for t in range(draws)]


def rank_by_frequency(pooled: Dataset) -> ConfidenceRanking:
    """Unique rows by descending multiplicity; ties in lexicographic row order."""
    if pooled.n == 0:
        raise SchemaError("cannot rank an empty dataset")
    rows, counts = pooled.unique()
    order = np.argsort(-counts, kind="stable")
    return ConfidenceRanking(pooled.domain, rows[order], counts[order])


def _make_init(W: QueryWorkload, cfg: AttackConfig, seed_data: Dataset | None, run: int) -> RelaxedDataset:
    rng = stage_rng(cfg.seed, run, "init")
    if cfg.init == "dataset":
        return init_from_dataset(seed_data, cfg.n_rows, cfg.gap, cfg.noise_scale, rng)
    return init_uniform(W.domain, cfg.n_rows or DEFAULT_ROWS, rng)


def _run_chunk(W: QueryWorkload, target: np.ndarray, cfg: AttackConfig,
               seed_data: Dataset | None, runs: list[int]) -> list[tuple[np.ndarray | None, dict]]:
    inits = [_make_init(W, cfg, seed_data, k) for k in runs]
    rngs = [stage_rng(cfg.seed, k, "sgd") for k in runs]
    try:
        results = project_many(W, target, inits, cfg.optimizer, rngs)
    except OptimizerAbort:
        if len(runs) == 1:
            raise
        # isolate the failing run(s)
        out = []
        for k in runs:
            try:
                out.extend(_run_chunk(W, target, cfg, seed_data, [k]))
            except OptimizerAbort as exc:
                log.warning("run %d aborted: %s", k, exc)
                out.append((None, {"run": k, "error": str(exc), "epoch": exc.epoch}))
        return out
    out = []
    for k, res in zip(runs, results):
        rounded = randomized_round(res.relaxed, stage_rng(cfg.seed, k, "round"), cfg.draws)
        meta = {"run": k, "initial_loss": res.initial_loss, "final_loss": res.final_loss,
                "epochs": res.epochs, "descent_violation": res.descent_violation,
                "wall_time": round(res.wall_time, 3)}
        out.append((np.concatenate([d.rows for d in rounded]), meta))
    return out


def _chunks(W: QueryWorkload, n_rows: int, runs: int) -> list[list[int]]:
    comp = W.compiled
    widest = max([W.domain.onehot_width, comp.n_clauses] +
                 [len(extra[0]) for k, _, _, extra in comp.groups if k >= 3])
    size = max(1, int(CHUNK_ELEMENTS // (n_rows * widest)))
    return [list(range(s, min(s + size, runs))) for s in range(0, runs, size)]


def rap_rank(W: QueryWorkload, target: AnswerVector | np.ndarray, cfg: AttackConfig | None = None,
             seed_data: Dataset | None = None, jobs: int = 1) -> ConfidenceRanking:
    """Run the K projections, pool the rounded rows and rank them by frequency.

    Runs are stacked into chunks and optimized together; each run still owns
    its random streams, so results do not depend on chunking or ``jobs``
    beyond floating-point reduction order.  Aborted runs are left out of the
    pool; the ranking's provenance records ``runs_effective`` and per-run losses.
    """
    cfg = cfg or AttackConfig()
    target = np.asarray(getattr(target, "values", target), dtype=float)
    if target.shape != (W.m,):
        raise SchemaError(f"answer vector has length {target.shape[0]}, workload has {W.m} queries")
    if cfg.init == "dataset":
        if seed_data is None or seed_data.n == 0:
            raise SchemaError("dataset initialization needs a non-empty seed dataset")
        if seed_data.domain != W.domain:
            raise SchemaError("seed dataset and workload use different domains")
        n_rows = cfg.n_rows or seed_data.n
    else:
        n_rows = cfg.n_rows or DEFAULT_ROWS

    chunks = _chunks(W, n_rows, cfg.runs)
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_chunk, *zip(*[(W, target, cfg, seed_data, c) for c in chunks])))
    else:
        parts = [_run_chunk(W, target, cfg, seed_data, c) for c in chunks]
    results = [r for part in parts for r in part]

    pooled = [rows for rows, _ in results if rows is not None]
    runs_meta = [meta for _, meta in results]
    if not pooled:
        raise OptimizerAbort(runs_meta[-1]["epoch"], float("nan"))
    ranking = rank_by_frequency(Dataset(W.domain, np.concatenate(pooled)))
    ranking.provenance = {
        "seed": cfg.seed,
        "runs": cfg.runs,
        "runs_effective": len(pooled),
        "draws": cfg.draws,
        "n_rows": n_rows,
        "config": asdict(cfg),
        "run_metadata": runs_meta,
    }
    return ranking


def default_jobs() -> int:
    return int(os.environ.get("RECON_JOBS", "1"))
