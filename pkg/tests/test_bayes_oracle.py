import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_consistent, naive_answer
from raprank.bayes_oracle import (EnumerationGuard, DatasetPrior, contains_row, enumerate_multisets,
                                  exact_posterior, posterior_membership_ranking, verify_identity)
from raprank.domain import Domain, SchemaError
from raprank.queries import CnfQuery, QueryWorkload, all_k_way_marginals, eval_workload, marginal


def random_instance(rng):
    """Random tiny (prior, workload, chi) within the enumeration guard."""
    dims = [int(c) for c in rng.integers(1, 4, size=rng.integers(1, 3))]
    domain = Domain.from_cardinalities(dims)
    n = int(rng.integers(1, 4))
    support = enumerate_multisets(domain, n)
    w = rng.dirichlet(np.ones(len(support)))
    w[rng.random(len(support)) < 0.3] = 0.0
    if w.sum() == 0:
        w[0] = 1.0
    prior = DatasetPrior.from_weights(domain, n, w)
    queries = []
    for _ in range(rng.integers(0, 4)):
        cols = rng.permutation(domain.d)[:rng.integers(1, domain.d + 1)]
        clauses = tuple((int(c), tuple(sorted(set(rng.integers(0, dims[c], size=2).tolist())))) for c in sorted(cols))
        queries.append(CnfQuery(clauses))
    W = QueryWorkload(domain, queries)
    if rng.random() < 0.5:
        row = [int(rng.integers(0, c)) for c in dims]
        chi = contains_row(row)
    else:
        table = {}

        def chi(a, b, table=table, rng=rng):
            key = (a.rows.tobytes(), b.rows.tobytes())
            if key not in table:
                table[key] = float(rng.normal())
            return table[key]
    return prior, W, chi


class TestPrior:
    def test_uniform_weights_are_multinomial(self):
        prior = DatasetPrior.uniform(Domain.from_cardinalities([2]), 2)
        assert prior.support == [(0, 0), (0, 1), (1, 1)]
        np.testing.assert_allclose(prior.probs, [0.25, 0.5, 0.25])

    def test_guard(self):
        with pytest.raises(EnumerationGuard):
            DatasetPrior.uniform(Domain.from_cardinalities([4, 4]), 5)
        # exactly at the limit is allowed
        assert len(enumerate_multisets(Domain.from_cardinalities([10]), 6)) > 0

    def test_probabilities_validated(self):
        with pytest.raises(SchemaError):
            DatasetPrior(Domain.from_cardinalities([2]), 1, [(0,), (1,)], [0.5, 0.6])


class TestPosterior:
    def test_single_clause_example(self):
        d = Domain.from_cardinalities([2])
        prior = DatasetPrior.uniform(d, 2)
        W = QueryWorkload(d, [marginal([0], [1])])
        post = exact_posterior(prior, W, np.array([0.5]))
        np.testing.assert_allclose(post, [0.0, 1.0, 0.0])

    def test_empty_workload_keeps_prior(self):
        prior = DatasetPrior.uniform(Domain.from_cardinalities([2, 2]), 2)
        post = exact_posterior(prior, QueryWorkload(prior.domain, []), np.zeros(0))
        np.testing.assert_allclose(post, prior.probs, atol=1e-15)

    def test_identifying_workload_gives_point_mass(self):
        d = Domain.from_cardinalities([2, 2])
        prior = DatasetPrior.uniform(d, 2)
        W = all_k_way_marginals(d, 2)
        i = 3
        post = exact_posterior(prior, W, eval_workload(W, prior.dataset(i)))
        assert post[i] == 1.0 and post.sum() == 1.0

    def test_impossible_answers(self):
        d = Domain.from_cardinalities([2])
        with pytest.raises(SchemaError, match="reproduces"):
            exact_posterior(DatasetPrior.uniform(d, 2), QueryWorkload(d, [marginal([0], [1])]), np.array([0.3]))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_support_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        prior, W, _ = random_instance(rng)
        i = int(rng.choice(len(prior.support), p=prior.probs))
        observed = eval_workload(W, prior.dataset(i)).values if W.m else np.zeros(0)
        post = exact_posterior(prior, W, observed)
        assert abs(post.sum() - 1.0) <= 1e-12

        def answers(rows):
            return np.array([naive_answer(q, rows) for q in W.queries])
        consistent = set(brute_force_consistent(prior.domain, prior.n, answers, observed))
        support = {s for s, p in zip(prior.support, prior.probs) if p > 0}
        assert {s for s, p in zip(prior.support, post) if p > 0} == consistent & support


class TestIdentity:
    def test_constant_chi(self):
        prior = DatasetPrior.uniform(Domain.from_cardinalities([2, 2]), 2)
        lhs, rhs, gap = verify_identity(prior, all_k_way_marginals(prior.domain, 1), lambda a, b: 1.0)
        assert lhs == pytest.approx(1.0, abs=1e-12) and rhs == pytest.approx(1.0, abs=1e-12)

    def test_one_way_example(self):
        d = Domain.from_cardinalities([2])
        lhs, rhs, gap = verify_identity(DatasetPrior.uniform(d, 2), all_k_way_marginals(d, 1), contains_row([1]))
        # 1-way answers identify every dataset here, so both sides equal Pr[1 in D] = 3/4
        assert lhs == pytest.approx(0.75, abs=1e-12) and gap < 1e-12

    def test_identifying_workload_exact(self):
        d = Domain.from_cardinalities([2, 2])
        lhs, rhs, gap = verify_identity(DatasetPrior.uniform(d, 2), all_k_way_marginals(d, 2), contains_row([0, 1]))
        assert lhs == rhs

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_random_instances(self, seed):
        prior, W, chi = random_instance(np.random.default_rng(seed))
        _, _, gap = verify_identity(prior, W, chi)
        assert gap < 1e-12


class TestMembershipRanking:
    def test_point_mass(self):
        d = Domain.from_cardinalities([2, 2])
        prior = DatasetPrior.uniform(d, 3)
        W = all_k_way_marginals(d, 2)
        truth = prior.dataset(5)
        r = posterior_membership_ranking(prior, W, eval_workload(W, truth))
        assert {tuple(x) for x in r.rows.tolist()} == truth.row_set()
        assert np.all(r.frequencies == 1.0)

    def test_shared_row_first(self):
        d = Domain.from_cardinalities([3])
        support = enumerate_multisets(d, 2)
        w = np.zeros(len(support))
        w[support.index((0, 1))] = w[support.index((0, 2))] = 1
        prior = DatasetPrior.from_weights(d, 2, w)
        r = posterior_membership_ranking(prior, QueryWorkload(d, []), np.zeros(0))
        assert r.rows[:, 0].tolist() == [0, 1, 2]
        np.testing.assert_allclose(r.frequencies, [1.0, 0.5, 0.5])

    def test_exchangeable_prior_ties_lexicographic(self):
        d = Domain.from_cardinalities([2, 2])
        r = posterior_membership_ranking(DatasetPrior.uniform(d, 2), QueryWorkload(d, []), np.zeros(0))
        assert r.rows.tolist() == d.all_rows().tolist()
        assert np.allclose(r.frequencies, r.frequencies[0])
