"""Exhaustive posterior computations over all size-n datasets of a tiny domain.

Datasets are multisets, enumerated as sorted tuples of row ids.  A prior is a
probability for each of them; conditioning on released answers restricts the
prior to the datasets that reproduce those answers.  Used to check that
pairing a fresh posterior draw with another posterior draw gives the same
expectation as pairing the true dataset with a posterior draw, and to build
the exact ranking of rows by posterior probability of membership.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from raprank.attack import ConfidenceRanking
from raprank.domain import Dataset, Domain, SchemaError
from raprank.queries import AnswerVector, QueryWorkload, eval_workload

ENUMERATION_LIMIT = 10**6
MATCH_TOL = 1e-12


class EnumerationGuard(SchemaError):
    """The dataset space is too large to enumerate."""


@dataclass
class DatasetPrior:
    """Probabilities over every size-n multiset of rows of ``domain``.

    ``support[i]`` is a sorted tuple of row ids (indices into
    ``domain.all_rows()``) with probability ``probs[i]``.
    """

    domain: Domain
    n: int
    support: list[tuple[int, ...]]
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if len(self.support) != len(self.probs):
            raise SchemaError("support and probabilities differ in length")
        if (self.probs < 0).any() or abs(self.probs.sum() - 1.0) > 1e-12:
            raise SchemaError("prior probabilities must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, domain: Domain, n: int) -> "DatasetPrior":
        """Uniform over ordered size-n tuples, collapsed to multisets (multinomial weights)."""
        support = enumerate_multisets(domain, n)
        size = domain.size
        weights = np.array([_arrangements(s) for s in support], dtype=float) / float(size) ** n
        return cls(domain, n, support, weights / weights.sum())

    @classmethod
    def from_weights(cls, domain: Domain, n: int, weights: Sequence[float]) -> "DatasetPrior":
        support = enumerate_multisets(domain, n)
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(support),):
            raise SchemaError(f"need {len(support)} weights, got {w.shape}")
        return cls(domain, n, support, w / w.sum())

    def dataset(self, i: int) -> Dataset:
        return Dataset(self.domain, self.domain.all_rows()[list(self.support[i])])


def _arrangements(multiset: tuple[int, ...]) -> int:
    out = math.factorial(len(multiset))
    for _, grp in itertools.groupby(multiset):
        out //= math.factorial(len(list(grp)))
    return out


def enumerate_multisets(domain: Domain, n: int) -> list[tuple[int, ...]]:
    if n < 1:
        raise SchemaError("dataset size must be >= 1")
    if float(domain.size) ** n > ENUMERATION_LIMIT:
        raise EnumerationGuard(f"|X|^n = {domain.size}^{n} exceeds the enumeration limit {ENUMERATION_LIMIT}")
    return list(itertools.combinations_with_replacement(range(domain.size), n))


def answer_matrix(prior: DatasetPrior, W: QueryWorkload) -> np.ndarray:
    """Exact workload answers for every dataset in the prior's support."""
    if W.m == 0:
        return np.zeros((len(prior.support), 0))
    return np.stack([eval_workload(W, prior.dataset(i)).values for i in range(len(prior.support))])


def exact_posterior(prior: DatasetPrior, W: QueryWorkload, observed: AnswerVector | np.ndarray,
                    answers: np.ndarray | None = None) -> np.ndarray:
    """Posterior probabilities over ``prior.support`` given observed answers."""
    observed = np.asarray(getattr(observed, "values", observed), dtype=float)
    A = answer_matrix(prior, W) if answers is None else answers
    consistent = np.all(np.abs(A - observed) <= MATCH_TOL, axis=1)
    mass = prior.probs[consistent].sum()
    if mass <= 0:
        raise SchemaError("no dataset in the prior's support reproduces the observed answers")
    post = np.where(consistent, prior.probs, 0.0)
    return post / mass


Chi = Callable[[Dataset, Dataset], float]


def contains_row(row: Sequence[int]) -> Chi:
    """Canonical predicate: 1 when both datasets contain ``row``."""
    row = tuple(int(v) for v in row)

    def chi(a: Dataset, b: Dataset) -> float:
        return float(row in a.row_set() and row in b.row_set())

    return chi


def verify_identity(prior: DatasetPrior, W: QueryWorkload, chi: Chi) -> tuple[float, float, float]:
    """Compare E[chi(D, D')] with E[chi(D~, D')] by exhaustive summation.

    ``lhs``: D from the prior, D' from the posterior given Q(D).
    ``rhs``: D from the prior, then D~ and D' drawn independently from the
    posterior given Q(D).  Returns ``(lhs, rhs, |lhs - rhs|)``.
    """
    S = len(prior.support)
    A = answer_matrix(prior, W)
    data = [prior.dataset(i) for i in range(S)]
    chi_cache: dict[tuple[int, int], float] = {}

    def chi_at(i: int, j: int) -> float:
        if (i, j) not in chi_cache:
            chi_cache[(i, j)] = float(chi(data[i], data[j]))
        return chi_cache[(i, j)]

    lhs = 0.0
    rhs = 0.0
    for i in np.flatnonzero(prior.probs > 0):
        post = exact_posterior(prior, W, A[i], A)
        idx = np.flatnonzero(post > 0)
        lhs += prior.probs[i] * sum(post[j] * chi_at(i, j) for j in idx)
        inner = 0.0
        for t in idx:
            inner += post[t] * sum(post[j] * chi_at(t, j) for j in idx)
        rhs += prior.probs[i] * inner
    return lhs, rhs, abs(lhs - rhs)


def posterior_membership(prior: DatasetPrior, W: QueryWorkload, observed) -> np.ndarray:
    """Pr[row in D] under the posterior, for every row of the domain (lexicographic order)."""
    post = exact_posterior(prior, W, observed)
    member = np.zeros(prior.domain.size)
    for p, s in zip(post, prior.support):
        if p > 0:
            member[list(set(s))] += p
    return member


def posterior_membership_ranking(prior: DatasetPrior, W: QueryWorkload, observed) -> ConfidenceRanking:
    """Rows with positive posterior membership probability, most likely first.

    Ties keep lexicographic row order; the ranking's ``frequencies`` hold
    the membership probabilities.
    """
    member = posterior_membership(prior, W, observed)
    # round away float noise so that exact ties stay ties
    key = np.round(member, 12)
    order = np.argsort(-key, kind="stable")
    order = order[key[order] > 0]
    return ConfidenceRanking(prior.domain, prior.domain.all_rows()[order], member[order],
                             {"source": "exact posterior"})
