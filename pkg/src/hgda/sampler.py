"""Episodic task generation over multi-domain sentence pools.

A task draws 2K distinct sentences from one source domain and splits them
into a support and a query half. In ``ne_constrained`` mode the support half
only contains sentences with at least one entity; the query half is drawn
unconstrained from the remaining sentences.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from hgda.corpus import Corpus, Sentence
from hgda.errors import InsufficientSentences, InvalidBatchSize, NoEntitySentences
from hgda.rng import EPISODE, RngKey, as_generator

MODES = ("uniform", "ne_constrained")
TARGET_SIZES = (5, 10, 20, 50)


@dataclass(frozen=True)
class SamplerConfig:
    K: int = 5
    mode: str = "uniform"
    domain_weights: Mapping[int, float] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.domain_weights is not None:
            w = np.array(list(self.domain_weights.values()), dtype=float)
            if np.any(w < 0) or not w.sum() > 0:
                raise ValueError("domain weights must be nonnegative with a positive sum")


@dataclass(frozen=True)
class Task:
    domain_id: int
    support: tuple[Sentence, ...]
    query: tuple[Sentence, ...]
    mode: str = "uniform"
    support_idx: tuple[int, ...] = ()
    query_idx: tuple[int, ...] = ()

    def manifest_entry(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "mode": self.mode,
            "support_idx": list(self.support_idx),
            "query_idx": list(self.query_idx),
        }


class TaskPool:
    """Sentences grouped by domain id, with entity-bearing indices precomputed."""

    def __init__(self, by_domain: Mapping[int, Sequence[Sentence]]):
        self.by_domain = {d: list(by_domain[d]) for d in sorted(by_domain)}
        self.domains = list(self.by_domain)
        self.entity_idx = {
            d: np.array([i for i, s in enumerate(ss) if s.has_entity], dtype=np.intp)
            for d, ss in self.by_domain.items()
        }

    @classmethod
    def wrap(cls, pool) -> "TaskPool":
        return pool if isinstance(pool, TaskPool) else cls(pool)

    def weights(self, domain_weights) -> np.ndarray:
        if domain_weights is None:
            return np.full(len(self.domains), 1.0 / len(self.domains))
        w = np.array([float(domain_weights.get(d, 0.0)) for d in self.domains])
        return w / w.sum()


def sample_task(pool, cfg: SamplerConfig, rng) -> Task:
    pool = TaskPool.wrap(pool)
    rng = as_generator(rng)
    d = pool.domains[int(rng.choice(len(pool.domains), p=pool.weights(cfg.domain_weights)))]
    sents = pool.by_domain[d]
    n, K = len(sents), cfg.K
    if n < 2 * K:
        raise InsufficientSentences(f"domain {d} has {n} sentences, a task needs {2 * K}")
    if cfg.mode == "uniform":
        idx = rng.choice(n, size=2 * K, replace=False)
        sup, qry = idx[:K], idx[K:]
    else:
        ent = pool.entity_idx[d]
        if len(ent) < K:
            raise NoEntitySentences(f"domain {d} has {len(ent)} entity-bearing sentences, support needs {K}")
        sup = rng.choice(ent, size=K, replace=False)
        rest = np.setdiff1d(np.arange(n), sup, assume_unique=True)
        qry = rng.choice(rest, size=K, replace=False)
    return Task(
        domain_id=d,
        support=tuple(sents[i] for i in sup),
        query=tuple(sents[i] for i in qry),
        mode=cfg.mode,
        support_idx=tuple(int(i) for i in sup),
        query_idx=tuple(int(i) for i in qry),
    )


def sample_batch(pool, cfg: SamplerConfig, m: int, key: RngKey, workers: int = 1) -> list[Task]:
    """``m`` independent tasks; task ``i`` uses the stream ``key.child(i)``.

    Each task owns its stream, so any ``workers`` count yields the same list.
    """
    if m < 1:
        raise InvalidBatchSize(f"batch size must be >= 1, got {m}")
    pool = TaskPool.wrap(pool)
    keys = [key.child(i) for i in range(m)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(lambda k: sample_task(pool, cfg, k), keys))
    return [sample_task(pool, cfg, k) for k in keys]


# ----------------------------------------------------------------------------
# target-domain episodes


@dataclass
class Episode:
    size: int
    repeat_index: int
    indices: tuple[int, ...]
    sentences: list[Sentence]
    test: list[Sentence] = field(repr=False)

    def manifest_entry(self) -> dict:
        return {"size": self.size, "repeat": self.repeat_index, "indices": list(self.indices)}


def _as_sentences(c) -> list[Sentence]:
    return list(c.sentences) if isinstance(c, Corpus) else list(c)


def make_target_episode(train, size: int, repeat_index: int, seed: int, test=(), attempt: int = 0) -> Episode:
    """Draw ``size`` sentences without replacement from the target train split.

    The draw is keyed by ``(seed, size, repeat_index, attempt)``; the test
    split is passed through untouched so it is identical across repeats.
    """
    pool = _as_sentences(train)
    if size < 1:
        raise ValueError(f"episode size must be >= 1, got {size}")
    if len(pool) < size:
        raise InsufficientSentences(f"target train split has {len(pool)} sentences, episode needs {size}")
    rng = RngKey(seed, (EPISODE, size, repeat_index, attempt)).generator()
    idx = np.sort(rng.choice(len(pool), size=size, replace=False))
    return Episode(size, repeat_index, tuple(int(i) for i in idx), [pool[i] for i in idx], _as_sentences(test))


def make_target_episodes(train, size: int, repeats: int, seed: int, test=()) -> list[Episode]:
    """``repeats`` episodes with pairwise-distinct index sets whenever the pool allows it."""
    n = len(_as_sentences(train))
    distinct_possible = math.comb(n, size) >= repeats if n >= size else False
    seen = set()
    out = []
    for r in range(repeats):
        ep = make_target_episode(train, size, r, seed, test)
        attempt = 0
        while distinct_possible and ep.indices in seen and attempt < 1000:
            attempt += 1
            ep = make_target_episode(train, size, r, seed, test, attempt)
        seen.add(ep.indices)
        out.append(ep)
    return out
