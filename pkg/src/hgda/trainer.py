"""Hardness-weighted bilevel meta-training.

One outer iteration samples ``m`` tasks, adapts a clone of the model on each
support set with plain SGD, measures losses and first-order meta-gradients on
the query set, turns the query losses into per-task hardness weights (each
task's share of the batch total, separately for the joint, labelling and
domain losses), and applies the weighted gradients with clipped SGD +
momentum + weight decay under a linear learning-rate decay.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from hgda.errors import NegativeLoss, NonFiniteGradient, NonFiniteLoss
from hgda.model import ModelParams, Network, global_norm, weighted_sum
from hgda.rng import DEV, DROPOUT, SAMPLE, RngKey
from hgda.sampler import SamplerConfig, Task, TaskPool, sample_batch

log = logging.getLogger(__name__)

WEIGHTINGS = ("hardness", "uniform")


def scaled_lr(base_lr: float, K: int, base_batch: int = 32) -> float:
    """Learning rate rescaled from a reference batch size: ``base_lr * sqrt(K / base_batch)``."""
    if K < 1 or base_batch < 1:
        raise ValueError("K and base_batch must be >= 1")
    return base_lr * np.sqrt(K / base_batch)


@dataclass(frozen=True)
class TrainConfig:
    K: int = 5
    m: int = 4
    lam: float = 1.0
    adaptation_steps: int = 2
    base_lr: float = 1e-2
    base_batch: int = 32
    alpha: float | None = None  # outer rate; defaults to scaled_lr(base_lr, K, base_batch)
    beta: float | None = None  # inner rate; same default
    momentum: float = 0.9
    weight_decay: float = 1e-6
    grad_clip: float = 5.0
    dropout: float = 0.2
    max_outer_iters: int = 300
    patience: int = 20
    eval_every: int = 5
    dev_episodes: int = 16
    weighting: str = "hardness"
    mode: str = "uniform"
    workers: int = 1

    def __post_init__(self):
        if self.outer_lr <= 0 or self.inner_lr < 0:
            raise ValueError("alpha must be > 0 and beta >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.adaptation_steps < 0:
            raise ValueError("adaptation_steps must be >= 0")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.m < 1 or self.K < 1:
            raise ValueError("m and K must be >= 1")

    @property
    def outer_lr(self) -> float:
        return self.alpha if self.alpha is not None else scaled_lr(self.base_lr, self.K, self.base_batch)

    @property
    def inner_lr(self) -> float:
        return self.beta if self.beta is not None else scaled_lr(self.base_lr, self.K, self.base_batch)

    def sampler(self, seed: int = 0) -> SamplerConfig:
        return SamplerConfig(K=self.K, mode=self.mode, seed=seed)

    def to_json(self) -> dict:
        return asdict(self)


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) if hasattr(c, "__dataclass_fields__") else c for c in configs],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class TaskLosses:
    lab: float
    cls: float
    total: float
    meta_grads: ModelParams | None
    task_entry: dict = field(default_factory=dict)


@dataclass
class HardnessScores:
    gamma_theta: np.ndarray
    gamma_phi: np.ndarray
    gamma_omega: np.ndarray

    def by_group(self) -> dict:
        return {"theta": self.gamma_theta, "phi": self.gamma_phi, "omega": self.gamma_omega}


def _sgd_inplace(params: ModelParams, grads: ModelParams, lr: float):
    for g, grp in grads.groups().items():
        target = getattr(params, g)
        for k, v in grp.items():
            target[k] = target[k] - lr * v


def inner_adapt(params: ModelParams, net: Network, task: Task, cfg: TrainConfig, key: RngKey,
                dropout: float | None = None, grads: bool = True) -> TaskLosses:
    """Adapt a clone on the support set, then score it on the query set.

    Each support step moves theta along ∇(lab + λ·cls), phi along ∇lab and
    omega along ∇cls at rate beta. The returned meta-gradients are the query
    gradients at the adapted clone (first-order). ``params`` is not modified.
    """
    p = params.copy()
    dropout = cfg.dropout if dropout is None else dropout
    domain = net.domain_class(task.domain_id) if p.omega is not None else None
    beta = cfg.inner_lr
    try:
        for step in range(cfg.adaptation_steps):
            _, _, g = net.objective(p, task.support, domain, cfg.lam, dropout, key.child(0, step).generator())
            _sgd_inplace(p, g, beta)
        lab, cls, g = net.objective(p, task.query, domain, cfg.lam, dropout, key.child(1).generator(),
                                    grads=grads)
    except NonFiniteLoss as e:
        raise NonFiniteLoss(f"{e} in task {task.manifest_entry()}", task.manifest_entry()) from None
    cls_term = 0.0 if np.isnan(cls) else cls
    return TaskLosses(lab, cls, lab + cfg.lam * cls_term, g, task.manifest_entry())


def _ratios(v: np.ndarray) -> np.ndarray:
    s = v.sum()
    if s == 0:
        return np.full(len(v), 1.0 / len(v))
    return v / s


def hardness(batch: Sequence[TaskLosses]) -> HardnessScores:
    """Each task's share of the batch's joint, labelling and domain losses.

    A vector whose total is zero falls back to uniform weights.
    """
    if len(batch) < 1:
        raise ValueError("empty task batch")

    def vec(name):
        v = np.array([getattr(t, name) for t in batch], dtype=np.float64)
        v = np.where(np.isnan(v), 0.0, v)
        if np.any(v < -1e-9):
            raise NegativeLoss(f"negative {name} loss in batch: {v}")
        return np.maximum(v, 0.0)

    return HardnessScores(_ratios(vec("total")), _ratios(vec("lab")), _ratios(vec("cls")))


def uniform_scores(m: int) -> HardnessScores:
    u = np.full(m, 1.0 / m)
    return HardnessScores(u, u.copy(), u.copy())


class SGD:
    """SGD with momentum and decoupled-from-clip weight decay (PyTorch semantics)."""

    def __init__(self, momentum=0.9, weight_decay=1e-6):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
        out = params.copy()
        for g, grp in grads.groups().items():
            target = getattr(out, g)
            for k, grad in grp.items():
                name = f"{g}/{k}"
                d = grad + self.weight_decay * target[k] if self.weight_decay else grad
                buf = self.buffers.get(name)
                buf = d.copy() if buf is None else self.momentum * buf + d
                self.buffers[name] = buf
                target[k] = target[k] - lr * buf
        return out

    def state(self) -> dict[str, np.ndarray]:
        return dict(self.buffers)

    def load_state(self, buffers: dict[str, np.ndarray]):
        self.buffers = {k: np.array(v) for k, v in buffers.items()}


def clip_global(grads: ModelParams, max_norm: float):
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise NonFiniteGradient(f"aggregated meta-gradient norm is {norm}")
    if norm <= max_norm:
        return norm, norm
    scale = max_norm / norm
    for _, v in grads.items():
        v *= scale
    return norm, global_norm(grads)


def linear_lr(alpha: float, iteration: int, total: int) -> float:
    if total <= 0:
        return alpha
    return alpha * max(0.0, 1.0 - iteration / total)


def outer_step(params: ModelParams, batch: Sequence[TaskLosses], scores: HardnessScores, cfg: TrainConfig,
               optimizer: SGD, lr: float | None = None):
    """Apply hardness-weighted meta-gradients. Returns ``(new_params, info)``."""
    if len(batch) != len(scores.gamma_theta):
        raise ValueError("scores and batch lengths differ")
    agg = weighted_sum([t.meta_grads for t in batch], scores.by_group())
    pre, post = clip_global(agg, cfg.grad_clip)
    lr = cfg.outer_lr if lr is None else lr
    new = optimizer.step(params, agg, lr)
    return new, {"grad_norm": pre, "clipped_norm": post, "lr": lr}


# ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    best_iter: int
    iterations: int
    optimizer: SGD
    final_params: ModelParams
    stopped_early: bool = False
    best_loss: float = float("inf")


def dev_loss(params: ModelParams, net: Network, tasks: Sequence[Task], cfg: TrainConfig) -> float:
    """Mean query labelling loss after support adaptation, without dropout."""
    vals = [inner_adapt(params, net, t, cfg, RngKey(0), dropout=0.0, grads=False).lab for t in tasks]
    return float(np.mean(vals))


def _round_floats(xs):
    return [float(x) for x in xs]


def train(pool, net: Network, params: ModelParams, cfg: TrainConfig, seed: int, dev_pool=None,
          on_record: Callable[[dict], None] | None = None, optimizer: SGD | None = None,
          start_iter: int = 0, early_stop_state: dict | None = None,
          stop_after: int | None = None) -> TrainResult:
    """Run the outer loop until ``max_outer_iters`` or early stopping.

    Early stopping tracks the mean query labelling loss on ``dev_episodes``
    fixed tasks drawn from ``dev_pool`` (the training pool when absent),
    evaluated every ``eval_every`` iterations; the best-scoring parameters
    are returned in ``params`` and the last ones in ``final_params``.
    ``stop_after`` halts the loop at that iteration without changing the
    learning-rate schedule, so a later resume reproduces an uninterrupted run.
    """
    pool = TaskPool.wrap(pool)
    if len(pool.domains) < 2:
        raise ValueError(f"meta-training needs >= 2 source domains, got {len(pool.domains)}")
    dev_pool = TaskPool.wrap(dev_pool) if dev_pool is not None else pool
    scfg = cfg.sampler(seed)
    dev_tasks = sample_batch(dev_pool, scfg, cfg.dev_episodes, RngKey(seed, (DEV,))) if cfg.dev_episodes else []
    optimizer = optimizer or SGD(cfg.momentum, cfg.weight_decay)
    records: list[dict] = []

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    es = dict(early_stop_state or {})
    best_params = params.copy() if "best_params" not in es else es["best_params"]
    best_loss = es.get("best_loss", np.inf)
    best_iter = es.get("best_iter", start_iter)

    def maybe_eval(it, current):
        nonlocal best_params, best_loss, best_iter
        if not dev_tasks:
            best_params, best_iter = current, it
            return None
        loss = dev_loss(current, net, dev_tasks, cfg)
        if loss < best_loss:
            best_loss, best_params, best_iter = loss, current.copy(), it
        return loss

    if start_iter == 0 and cfg.max_outer_iters > 0:
        emit({"iter": 0, "dev_lab": maybe_eval(0, params), "event": "init"})
    elif cfg.max_outer_iters == 0:
        return TrainResult(params.copy(), records, 0, 0, optimizer, params.copy())

    executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    it = start_iter
    stopped = False
    try:
        end = cfg.max_outer_iters if stop_after is None else min(stop_after, cfg.max_outer_iters)
        while it < end:
            lr = linear_lr(cfg.outer_lr, it, cfg.max_outer_iters)
            tasks = sample_batch(pool, scfg, cfg.m, RngKey(seed, (SAMPLE, it)))
            keys = [RngKey(seed, (DROPOUT, it, i)) for i in range(cfg.m)]
            jobs = lambda i: inner_adapt(params, net, tasks[i], cfg, keys[i])  # noqa: E731
            batch = list(executor.map(jobs, range(cfg.m))) if executor else [jobs(i) for i in range(cfg.m)]
            scores = hardness(batch) if cfg.weighting == "hardness" else uniform_scores(cfg.m)
            params, info = outer_step(params, batch, scores, cfg, optimizer, lr)
            it += 1
            rec = {
                "iter": it,
                "lr": lr,
                "domains": [t.domain_id for t in tasks],
                "lab": _round_floats(b.lab for b in batch),
                "cls": _round_floats(b.cls for b in batch),
                "gamma_theta": _round_floats(scores.gamma_theta),
                "gamma_phi": _round_floats(scores.gamma_phi),
                "gamma_omega": _round_floats(scores.gamma_omega),
                "grad_norm": info["grad_norm"],
                "clipped_norm": info["clipped_norm"],
            }
            if it % cfg.eval_every == 0 or it == cfg.max_outer_iters:
                rec["dev_lab"] = maybe_eval(it, params)
            emit(rec)
            if dev_tasks and it - best_iter >= cfg.patience:
                stopped = True
                log.info("early stop at iteration %d (best %d, dev %.4f)", it, best_iter, best_loss)
                break
    finally:
        if executor:
            executor.shutdown()
    return TrainResult(best_params, records, best_iter, it, optimizer, params, stopped, best_loss)
