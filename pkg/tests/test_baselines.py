import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raprank.baselines import (NATIONAL, augment_attribute, baseline_ranking, drop_attribute,
                               hierarchy_baselines, select_unit)
from raprank.domain import Dataset, Domain, SchemaError, build_domain


@pytest.fixture
def geo():
    domain = build_domain({"attributes": [
        {"name": "state", "labels": ["S1", "S2"]},
        {"name": "county", "labels": ["C1", "C2", "C3"]},
        {"name": "tract", "labels": ["T1", "T2", "T3", "T4"]},
        {"name": "sex", "labels": ["M", "F"]},
    ], "hierarchy": ["state", "county", "tract"]})
    # tract -> county -> state: T1,T2 in C1 (S1); T3 in C2 (S1); T4 in C3 (S2)
    parent = {0: (0, 0), 1: (0, 0), 2: (1, 0), 3: (2, 1)}
    rng = np.random.default_rng(0)
    rows = []
    for _ in range(200):
        t = int(rng.integers(4))
        c, s = parent[t]
        rows.append([s, c, t, int(rng.integers(2))])
    return Dataset(domain, rows)


def as_counts(data):
    return data.counts()


def is_submultiset(a, b):
    return all(b.get(k, 0) >= v for k, v in a.items())


class TestBaselineRanking:
    def test_frequency_order(self):
        d = Domain.from_cardinalities([3])
        r = baseline_ranking(Dataset(d, [[1], [1], [1], [0]]))
        assert r.rows[:, 0].tolist() == [1, 0]

    def test_distinct_rows_lexicographic(self):
        d = Domain.from_cardinalities([2, 2])
        r = baseline_ranking(Dataset(d, [[1, 1], [0, 1], [1, 0]]))
        assert r.rows.tolist() == [[0, 1], [1, 0], [1, 1]]

    def test_empty_rejected(self):
        with pytest.raises(SchemaError):
            baseline_ranking(Dataset(Domain.from_cardinalities([2]), np.empty((0, 1))))


class TestHierarchy:
    def test_levels_and_nesting(self, geo):
        levels, target = hierarchy_baselines(geo, ["state", "county", "tract"], {"tract": "T2"},
                                             np.random.default_rng(1))
        assert list(levels) == [NATIONAL, "state", "county", "tract"]
        assert levels[NATIONAL].n == geo.n
        assert np.all(levels["state"].rows[:, 0] == 0)
        assert np.all(levels["county"].rows[:, 1] == 0)
        chain = [levels[k] for k in levels]
        for coarse, fine in zip(chain, chain[1:]):
            assert is_submultiset(as_counts(fine), as_counts(coarse))
        unit = select_unit(geo, "tract", "T2")
        assert target.n + levels["tract"].n == unit.n

    def test_county_level_is_definitional_filter(self, geo):
        levels, _ = hierarchy_baselines(geo, ["state", "county", "tract"], {"tract": "T3"},
                                        np.random.default_rng(0))
        want = geo.rows[geo.rows[:, 1] == 1]
        np.testing.assert_array_equal(levels["county"].rows, want)

    def test_empty_selection_names_level(self, geo):
        sub = Dataset(geo.domain, geo.rows[geo.rows[:, 2] != 1])
        with pytest.raises(SchemaError, match="tract"):
            hierarchy_baselines(sub, ["state", "county", "tract"], {"tract": "T2"}, np.random.default_rng(0))

    def test_unknown_column(self, geo):
        with pytest.raises(SchemaError):
            hierarchy_baselines(geo, ["state", "block"], {"block": "B1"}, np.random.default_rng(0))


class TestAugment:
    def test_point_mass(self):
        d = Domain.from_cardinalities([3, 4])
        aux = Dataset(d, np.random.default_rng(0).integers(0, 3, size=(30, 2)))
        target = Dataset(d, [[0, 2], [1, 2]])
        out = augment_attribute(aux, target, "a1", np.random.default_rng(0))
        assert np.all(out.rows[:, 1] == 2)
        np.testing.assert_array_equal(out.rows[:, 0], aux.rows[:, 0])

    def test_concentration(self):
        d = Domain.from_cardinalities([2, 2])
        aux = Dataset(d, np.zeros((10000, 2), dtype=int))
        target = Dataset(d, [[0, 0]] * 7 + [[0, 1]] * 3)
        out = augment_attribute(aux, target, "a1", np.random.default_rng(5))
        freq = np.bincount(out.rows[:, 1], minlength=2) / out.n
        assert np.all(np.abs(freq - [0.7, 0.3]) <= 0.02)

    @settings(max_examples=30)
    @given(st.integers(1, 50), st.integers(0, 2**32 - 1))
    def test_preserves_size_and_other_columns(self, n, seed):
        rng = np.random.default_rng(seed)
        d = Domain.from_cardinalities([3, 3, 3])
        aux = Dataset(d, rng.integers(0, 3, size=(n, 3)))
        target = Dataset(d, rng.integers(0, 3, size=(7, 3)))
        out = augment_attribute(aux, target, "a2", np.random.default_rng(seed))
        assert out.n == aux.n
        np.testing.assert_array_equal(out.rows[:, :2], aux.rows[:, :2])
        assert set(out.rows[:, 2]) <= set(target.rows[:, 2])

    def test_seeded(self):
        d = Domain.from_cardinalities([3, 3])
        aux = Dataset(d, np.zeros((20, 2), dtype=int))
        target = Dataset(d, [[0, 0], [0, 1], [0, 2]])
        a = augment_attribute(aux, target, "a1", np.random.default_rng(3)).rows
        b = augment_attribute(aux, target, "a1", np.random.default_rng(3)).rows
        np.testing.assert_array_equal(a, b)


class TestDrop:
    def test_constant_attribute_keeps_unique_count(self):
        d = Domain.from_cardinalities([3, 2])
        data = Dataset(d, [[0, 1], [2, 1], [1, 1]])
        assert drop_attribute(data, "a1").u_unique == data.u_unique

    def test_multiplicities_merge(self):
        out = drop_attribute(Dataset(Domain.from_cardinalities([2, 2]), [[0, 0], [0, 1]]), "a1")
        assert out.n == 2 and out.u_unique == 1 and out.domain.names == ["a0"]

    def test_single_attribute_rejected(self):
        with pytest.raises(SchemaError):
            drop_attribute(Dataset(Domain.from_cardinalities([2]), [[0]]), "a0")
