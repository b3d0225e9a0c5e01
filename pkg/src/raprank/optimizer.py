"""Relaxed projection: fit a continuous relaxed dataset to released answers.

Each relaxed row holds free scores ``theta``; its per-attribute probability
blocks are the softmax of the block's scores, so iterates stay feasible
without an explicit projection step.  The loss is the squared L2 distance
between relaxed workload answers and the target answers, minimized with Adam.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from raprank.domain import Dataset, Domain, SchemaError, encode_onehot
from raprank.queries import AnswerVector, QueryWorkload

log = logging.getLogger(__name__)

FULL_BATCH_MAX_QUERIES = 20000
DEFAULT_BATCH = 4096


class OptimizerAbort(RuntimeError):
    """The loss became non-finite; carries the epoch at which it happened."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


def block_softmax(theta: np.ndarray, domain: Domain) -> np.ndarray:
    """Softmax within each attribute block along the last axis."""
    offs, dims = domain.offsets, domain.dims
    top = np.maximum.reduceat(theta, offs, axis=-1)
    e = np.exp(theta - np.repeat(top, dims, axis=-1))
    return e / np.repeat(np.add.reduceat(e, offs, axis=-1), dims, axis=-1)


def block_softmax_backward(P: np.ndarray, grad_P: np.ndarray, domain: Domain) -> np.ndarray:
    """Chain a gradient w.r.t. probabilities back through the per-block softmax."""
    inner = np.add.reduceat(P * grad_P, domain.offsets, axis=-1)
    return P * (grad_P - np.repeat(inner, domain.dims, axis=-1))


@dataclass
class RelaxedDataset:
    domain: Domain
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim != 2 or self.theta.shape[1] != self.domain.onehot_width or len(self.theta) < 1:
            raise SchemaError(f"theta must have shape (N >= 1, {self.domain.onehot_width}), "
                              f"got {self.theta.shape}")

    @property
    def n_rows(self) -> int:
        return self.theta.shape[0]

    def probs(self) -> np.ndarray:
        return block_softmax(self.theta, self.domain)

    def copy(self) -> "RelaxedDataset":
        return RelaxedDataset(self.domain, self.theta.copy())


@dataclass
class OptimizerConfig:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 1000
    batch_size: int | None = None  # None: full batch up to 20000 queries, else 4096; 0: full batch
    stop_tol: float = 1e-8
    check_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")

    def effective_batch(self, m: int) -> int:
        if self.batch_size is None:
            return 0 if m <= FULL_BATCH_MAX_QUERIES else DEFAULT_BATCH
        return self.batch_size


class Adam:
    def __init__(self, shape, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        """In-place update of ``param``."""
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grad * grad)
        step = self.lr / (1.0 - self.beta1 ** self.t)
        denom = np.sqrt(self.v / (1.0 - self.beta2 ** self.t)) + self.eps
        param -= step * self.m / denom


def init_uniform(domain: Domain, n_rows: int, rng: np.random.Generator) -> RelaxedDataset:
    """Standard-normal scores: every block is near uniform in expectation."""
    if n_rows < 1:
        raise ValueError(f"n_rows must be >= 1, got {n_rows}")
    return RelaxedDataset(domain, rng.standard_normal((n_rows, domain.onehot_width)))


def init_from_dataset(seed_data: Dataset, n_rows: int | None = None, gap: float = 3.0,
                      noise_scale: float = 0.1, rng: np.random.Generator | None = None) -> RelaxedDataset:
    """Scores of ``gap`` at each seed row's observed categories, plus tie-breaking noise.

    With ``n_rows`` equal to the seed size every seed row is used once;
    otherwise rows are drawn with replacement.
    """
    if seed_data.n == 0:
        raise SchemaError("seed dataset is empty")
    rng = rng if rng is not None else np.random.default_rng()
    if n_rows is None or n_rows == seed_data.n:
        rows = seed_data.rows
    else:
        rows = seed_data.rows[rng.integers(0, seed_data.n, size=n_rows)]
    theta = gap * encode_onehot(rows, seed_data.domain)
    if noise_scale > 0:
        theta += noise_scale * rng.standard_normal(theta.shape)
    return RelaxedDataset(seed_data.domain, theta)


@dataclass
class ProjectionResult:
    relaxed: RelaxedDataset
    initial_loss: float
    final_loss: float
    epochs: int
    wall_time: float
    descent_violation: bool = False
    checkpoints: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def metadata(self) -> dict:
        return {
            "config": self.config,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "epochs": self.epochs,
            "wall_time": self.wall_time,
            "descent_violation": self.descent_violation,
            "checkpoints": self.checkpoints,
        }


def loss_and_grad(W: QueryWorkload, theta: np.ndarray, target: np.ndarray,
                  idx: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-run squared-L2 loss over queries ``idx`` (all if None) and its gradient.

    ``theta`` is a ``(K, N, width)`` stack of independent runs; returns losses
    of shape ``(K,)`` and gradients shaped like ``theta``.
    """
    comp = W.compiled
    P = block_softmax(theta, W.domain)
    c = comp.clause_scores(P)
    cache: dict = {}
    resid = comp.answers(c, idx, cache) - target
    if idx is not None:
        mask = np.zeros(W.m, dtype=bool)
        mask[idx] = True
        resid[:, ~mask] = 0.0
    loss = np.einsum("km,km->k", resid, resid)
    grad_P = comp.clause_gradient(c, 2.0 * resid, idx, cache) @ comp.M.T
    return loss, block_softmax_backward(P, grad_P, W.domain)


def full_loss(W: QueryWorkload, theta: np.ndarray, target: np.ndarray) -> np.ndarray:
    comp = W.compiled
    resid = comp.answers(comp.clause_scores(block_softmax(theta, W.domain))) - target
    return np.einsum("km,km->k", resid, resid)


def project(W: QueryWorkload, target: AnswerVector | np.ndarray, init: RelaxedDataset,
            cfg: OptimizerConfig | None = None, rng: np.random.Generator | None = None) -> ProjectionResult:
    """Minimize ``sum_j (relaxed_answer_j - target_j)^2`` over the scores with Adam.

    The full-batch loss is checked every ``cfg.check_every`` epochs; the run
    stops once it improves by less than ``cfg.stop_tol`` between checks.  The
    lowest-loss checkpoint is returned, so the final loss never exceeds the
    initial one.
    """
    cfg = cfg or OptimizerConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return project_many(W, target, [init], cfg, [rng])[0]


def project_many(W: QueryWorkload, target: AnswerVector | np.ndarray, inits: Sequence[RelaxedDataset],
                 cfg: OptimizerConfig, rngs: Sequence[np.random.Generator]) -> list[ProjectionResult]:
    """Run independent projections as one stacked computation.

    Every run keeps its own Adam state, stopping rule and best checkpoint;
    a stopped run is frozen while the others continue.  Mini-batch mode
    shuffles queries per run, so it is run one projection at a time.
    """
    target = np.asarray(getattr(target, "values", target), dtype=float)
    if target.shape != (W.m,):
        raise SchemaError(f"target has length {target.shape[0]}, workload has {W.m} queries")
    for init in inits:
        if init.domain != W.domain:
            raise SchemaError("relaxed dataset and workload use different domains")
    if len({init.n_rows for init in inits}) > 1:
        raise SchemaError("stacked runs need the same number of relaxed rows")
    batch = cfg.effective_batch(W.m)
    if batch and batch < W.m and len(inits) > 1:
        return [project_many(W, target, [i], cfg, [r])[0] for i, r in zip(inits, rngs)]

    start = time.perf_counter()
    K = len(inits)
    theta = np.stack([init.theta for init in inits])
    loss0 = full_loss(W, theta, target)
    if not np.all(np.isfinite(loss0)):
        raise OptimizerAbort(0, float(loss0[~np.isfinite(loss0)][0]))
    best_loss, best_theta = loss0.copy(), theta.copy()
    last_check = loss0.copy()
    checks = [[float(v)] for v in loss0]
    epochs = np.zeros(K, dtype=int)
    violation = np.zeros(K, dtype=bool)
    active = loss0 > 0.0
    opt = Adam(theta.shape, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    for epoch in range(1, cfg.max_epochs + 1):
        if not active.any():
            break
        if batch == 0 or batch >= W.m:
            steps = [None]
        else:
            perm = rngs[0].permutation(W.m)
            steps = [np.sort(perm[s:s + batch]) for s in range(0, W.m, batch)]
        for idx in steps:
            loss, g = loss_and_grad(W, theta, target, idx)
            if not np.all(np.isfinite(loss[active])):
                raise OptimizerAbort(epoch, float(loss[active][~np.isfinite(loss[active])][0]))
            g[~active] = 0.0
            before = theta[~active].copy()
            opt.step(theta, g)
            theta[~active] = before
        epochs[active] = epoch
        if epoch % cfg.check_every == 0 or epoch == cfg.max_epochs:
            loss = full_loss(W, theta, target)
            if not np.all(np.isfinite(loss[active])):
                raise OptimizerAbort(epoch, float("nan"))
            for k in np.flatnonzero(active):
                checks[k].append(float(loss[k]))
                if loss[k] > last_check[k] + 1e-9:
                    violation[k] = True
                    log.debug("run %d: loss rose from %g to %g at epoch %d", k, last_check[k], loss[k], epoch)
                if loss[k] <= best_loss[k]:
                    best_loss[k], best_theta[k] = loss[k], theta[k]
                if last_check[k] - loss[k] < cfg.stop_tol:
                    active[k] = False
                last_check[k] = loss[k]

    wall = time.perf_counter() - start
    meta = {**asdict(cfg), "effective_batch": batch}
    return [ProjectionResult(
        relaxed=RelaxedDataset(W.domain, best_theta[k]),
        initial_loss=float(loss0[k]),
        final_loss=float(best_loss[k]),
        epochs=int(epochs[k]),
        wall_time=wall / K,
        descent_violation=bool(violation[k]),
        checkpoints=checks[k],
        config=meta,
    ) for k in range(K)]
