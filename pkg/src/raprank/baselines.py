"""Distributional baselines: rankings built from auxiliary data only.

A baseline ranks the unique rows of an auxiliary dataset by their empirical
frequency, using the same tie rule as the attack.  Auxiliary datasets come
from a holdout half of the target unit or from enclosing geographic units.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from raprank.attack import ConfidenceRanking, rank_by_frequency
from raprank.domain import Dataset, SchemaError, split_holdout

NATIONAL = "national"


def baseline_ranking(aux: Dataset) -> ConfidenceRanking:
    if aux.n == 0:
        raise SchemaError("auxiliary dataset is empty")
    ranking = rank_by_frequency(aux)
    ranking.provenance = {"baseline": True, "aux_rows": aux.n}
    return ranking


def select_unit(data: Dataset, column: str, label: str) -> Dataset:
    j = data.domain.attr_index(column)
    v = data.domain.attributes[j].index(label)
    return Dataset(data.domain, data.rows[data.rows[:, j] == v], data.bin_edges)


def hierarchy_baselines(full: Dataset, hierarchy: Sequence[str], target: Mapping[str, str],
                        rng: np.random.Generator) -> tuple[dict[str, Dataset], Dataset]:
    """Auxiliary datasets for each level of a geographic hierarchy.

    ``hierarchy`` lists columns coarse to fine; ``target`` maps one of them
    to the label of the unit under attack.  Levels coarser than the target
    keep every row of the enclosing unit (including the target's own rows).
    The target level itself is represented by the holdout half of the unit.

    Returns ``({"national": ..., col: ..., ..., target_col: holdout}, target_half)``.
    """
    if len(target) != 1:
        raise SchemaError("target selector must name exactly one column")
    (tcol, tlabel), = target.items()
    hierarchy = list(hierarchy)
    if tcol not in hierarchy:
        raise SchemaError(f"target column {tcol!r} is not in the hierarchy {hierarchy}")
    for col in hierarchy:
        full.domain.attr_index(col)

    unit = select_unit(full, tcol, tlabel)
    if unit.n == 0:
        raise SchemaError(f"level {tcol!r}: no rows with {tcol}={tlabel!r}")
    levels = {NATIONAL: full}
    for col in hierarchy[:hierarchy.index(tcol)]:
        j = full.domain.attr_index(col)
        values = np.unique(unit.rows[:, j])
        if len(values) != 1:
            raise SchemaError(f"level {col!r}: target unit spans {len(values)} values; hierarchy not nested")
        # every coarser column above must match too, so levels nest
        mask = np.ones(full.n, dtype=bool)
        for upper in hierarchy[:hierarchy.index(col) + 1]:
            ju = full.domain.attr_index(upper)
            mask &= full.rows[:, ju] == unit.rows[0, ju]
        if not mask.any():
            raise SchemaError(f"level {col!r}: selection is empty")
        levels[col] = Dataset(full.domain, full.rows[mask], full.bin_edges)
    target_half, holdout = split_holdout(unit, rng)
    levels[tcol] = holdout
    return levels, target_half


def augment_attribute(aux: Dataset, target: Dataset, attr: str, rng: np.random.Generator) -> Dataset:
    """Copy of ``aux`` whose ``attr`` column is redrawn i.i.d. from its distribution in ``target``."""
    if target.n == 0:
        raise SchemaError("target dataset is empty")
    if aux.domain != target.domain:
        raise SchemaError("auxiliary and target datasets use different domains")
    j = aux.domain.attr_index(attr)
    rows = aux.rows.copy()
    rows[:, j] = target.rows[rng.integers(0, target.n, size=aux.n), j]
    return Dataset(aux.domain, rows, aux.bin_edges)


def drop_attribute(data: Dataset, attr: str) -> Dataset:
    if data.domain.d < 2:
        raise SchemaError("cannot drop the only attribute")
    j = data.domain.attr_index(attr)
    return Dataset(data.domain.drop(attr), np.delete(data.rows, j, axis=1), data.bin_edges)
