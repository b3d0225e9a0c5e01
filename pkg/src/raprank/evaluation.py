"""Top-k match-rate curves, k/u normalization, averaging and report files."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from raprank.attack import ConfidenceRanking
from raprank.domain import Dataset, SchemaError


def fmt(x: float) -> str:
    return format(float(x), ".10g")


@dataclass
class MatchRateCurve:
    """Match rate of the top-k ranked rows for k = 1..min(|R|, u)."""

    k: np.ndarray
    match_rate: np.ndarray
    u: int
    method: str = ""
    dataset_id: str = ""

    @property
    def k_over_u(self) -> np.ndarray:
        return self.k / self.u

    def __len__(self) -> int:
        return len(self.k)

    def value_at(self, fraction: float) -> float:
        """Step-interpolated match rate at k/u = fraction."""
        return float(_step(self, np.array([fraction]))[0])

    def rows(self):
        for k, x, y in zip(self.k, self.k_over_u, self.match_rate):
            yield int(k), x, y


@dataclass
class AveragedCurve:
    """Pointwise mean of several curves on a common k/u grid."""

    grid: np.ndarray
    match_rate: np.ndarray
    n_curves: int
    method: str = ""
    dataset_id: str = "average"
    members: list[str] = field(default_factory=list)

    @property
    def k_over_u(self) -> np.ndarray:
        return self.grid

    def value_at(self, fraction: float) -> float:
        i = int(np.argmin(np.abs(self.grid - fraction)))
        return float(self.match_rate[i])

    def rows(self):
        # k is the 1-based grid position; averaged curves have no single u
        for i, (x, y) in enumerate(zip(self.grid, self.match_rate)):
            yield i + 1, x, y


def effective_u(target: Dataset, holdout: Dataset | None = None) -> int:
    """Unique rows of the target, or of the holdout when that is smaller."""
    u = target.u_unique
    if holdout is not None:
        u = min(u, holdout.u_unique)
    return u


def match_rate_curve(ranking: ConfidenceRanking, target: Dataset, u_override: int | None = None,
                     method: str = "", dataset_id: str = "") -> MatchRateCurve:
    """Fraction of the k top-ranked rows present in ``target``, for each k up to u.

    Membership ignores multiplicity.  ``u`` is the number of unique target
    rows unless ``u_override`` is given.
    """
    if ranking.domain != target.domain:
        raise SchemaError("ranking and target dataset use different domains")
    u = int(u_override) if u_override is not None else target.u_unique
    if u < 1:
        raise SchemaError("u must be positive")
    kmax = min(len(ranking), u)
    present = target.row_set()
    hits = np.fromiter((tuple(int(v) for v in r) in present for r in ranking.rows[:kmax]),
                       dtype=float, count=kmax)
    k = np.arange(1, kmax + 1)
    return MatchRateCurve(k, np.cumsum(hits) / k, u, method, dataset_id)


def default_grid(points: int = 100) -> np.ndarray:
    return np.arange(1, points + 1) / points


def _step(curve: MatchRateCurve, grid: np.ndarray) -> np.ndarray:
    if len(curve) == 0:
        raise SchemaError(f"curve {curve.method!r} is empty")
    # small slack so that e.g. 0.3 * 10 maps to k = 3, not 4
    k = np.ceil(grid * curve.u - 1e-9).astype(int)
    k = np.clip(k, 1, int(curve.k[-1]))
    return curve.match_rate[k - 1]


def average_curves(curves: Sequence[MatchRateCurve], grid: Sequence[float] | None = None,
                   method: str | None = None) -> AveragedCurve:
    """Step-interpolate each curve onto the k/u grid and take the pointwise mean."""
    if not curves:
        raise SchemaError("no curves to average")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    if np.any(grid <= 0) or np.any(grid > 1):
        raise SchemaError("grid points must lie in (0, 1]")
    values = np.mean([_step(c, grid) for c in curves], axis=0)
    return AveragedCurve(grid, values, len(curves), method if method is not None else curves[0].method,
                         members=[c.dataset_id for c in curves])


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text).strip("_") or "curve"


def write_curve_csv(curve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "k_over_u", "match_rate"])
        for k, x, y in curve.rows():
            w.writerow([k, fmt(x), fmt(y)])


def emit_report(curves: Sequence, out_dir: str | Path, title: str | None = None) -> list[Path]:
    """Write one CSV per curve, a combined CSV keyed by method, and an SVG chart."""
    if not curves:
        raise SchemaError("no curves to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    from raprank.plotting import plot_match_rates

    written = []
    names = []
    for c in curves:
        name = _slug("_".join(p for p in (c.method, c.dataset_id) if p))
        base, i = name, 2
        while name in names:
            name, i = f"{base}_{i}", i + 1
        names.append(name)
        path = out / f"curve_{name}.csv"
        write_curve_csv(c, path)
        written.append(path)

    combined = out / "curves.csv"
    with open(combined, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "dataset", "k", "k_over_u", "match_rate"])
        for c in curves:
            for k, x, y in c.rows():
                w.writerow([c.method, c.dataset_id, k, fmt(x), fmt(y)])
    written.append(combined)

    svg = out / "match_rate.svg"
    plot_match_rates(curves, svg, title=title)
    written.append(svg)
    return written


def mean_rate(curve: MatchRateCurve, upto: float = 1.0) -> float:
    """Mean of the curve's match rates over points with k/u <= ``upto``."""
    sel = curve.k_over_u <= upto + 1e-12
    if not sel.any():
        sel = np.zeros(len(curve), dtype=bool)
        sel[0] = True
    return float(np.mean(curve.match_rate[sel]))


def curve_summary(curve) -> dict:
    return {"method": curve.method, "dataset": curve.dataset_id,
            "points": int(len(curve.match_rate)),
            "at_half": curve.value_at(0.5),
            "at_one": float(curve.match_rate[-1]) if len(curve.match_rate) else math.nan}
