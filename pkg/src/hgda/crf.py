"""Linear-chain CRF: partition function, negative log-likelihood, gradients, Viterbi.

Parameter dict ``phi``:

- ``proj``  (H, T)  token features -> per-tag emission scores
- ``trans`` (T, T)  score of moving from tag i to tag j
- ``start``, ``end`` (T,)

All routines work on one sentence at a time in log space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from hgda.encoder import Cache, uniform_init
from hgda.errors import NonFiniteScore, TagIndexOutOfRange


def logsumexp(a, axis=None):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else out.item()


@dataclass(frozen=True)
class TagVocab:
    tags: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(self.tags))
        if len(set(self.tags)) != len(self.tags):
            raise ValueError(f"duplicate tags in {self.tags}")
        if "O" not in self.tags:
            raise ValueError("tag vocabulary must contain 'O'")

    @classmethod
    def from_types(cls, entity_types: Iterable[str]) -> "TagVocab":
        tags = ["O"]
        for t in sorted(set(entity_types)):
            tags += [f"B-{t}", f"I-{t}"]
        return cls(tuple(tags))

    def __len__(self):
        return len(self.tags)

    def index(self, tag: str) -> int:
        try:
            return self._index[tag]
        except AttributeError:
            object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tags)})
            return self.index(tag)
        except KeyError:
            raise TagIndexOutOfRange(f"tag {tag!r} not in vocabulary {self.tags}") from None

    def encode(self, tags: Sequence[str]) -> np.ndarray:
        return np.array([self.index(t) for t in tags], dtype=np.intp)

    def decode(self, idx: Sequence[int]) -> list[str]:
        return [self.tags[i] for i in idx]

    def transition_mask(self):
        """Allowed (from, to) pairs and allowed first tags under IOB2."""
        T = len(self.tags)
        allowed = np.ones((T, T), dtype=bool)
        start = np.ones(T, dtype=bool)
        for j, tag in enumerate(self.tags):
            if tag.startswith("I-"):
                etype = tag[2:]
                start[j] = False
                for i, prev in enumerate(self.tags):
                    allowed[i, j] = prev in (f"B-{etype}", f"I-{etype}")
        return allowed, start


def init_crf(hidden_dim: int, n_tags: int, rng) -> dict:
    return {
        "proj": uniform_init(rng, (hidden_dim, n_tags), hidden_dim),
        "trans": np.zeros((n_tags, n_tags)),
        "start": np.zeros(n_tags),
        "end": np.zeros(n_tags),
    }


def _check(scores, phi):
    if not np.all(np.isfinite(scores)):
        raise NonFiniteScore("emission scores contain inf or nan")
    for k in ("trans", "start", "end"):
        if not np.all(np.isfinite(phi[k])):
            raise NonFiniteScore(f"CRF parameter {k} contains inf or nan")


def _forward(scores, phi):
    L, T = scores.shape
    alpha = np.empty((L, T))
    alpha[0] = phi["start"] + scores[0]
    trans = phi["trans"]
    for t in range(1, L):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + trans, axis=0) + scores[t]
    return alpha, logsumexp(alpha[-1] + phi["end"])


def _backward(scores, phi):
    L, T = scores.shape
    beta = np.empty((L, T))
    beta[-1] = phi["end"]
    trans = phi["trans"]
    for t in range(L - 2, -1, -1):
        beta[t] = logsumexp(trans + (scores[t + 1] + beta[t + 1])[None, :], axis=1)
    return beta


def log_partition(scores, phi) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ValueError(f"scores must be (L>=1, T), got {scores.shape}")
    _check(scores, phi)
    return _forward(scores, phi)[1]


def path_score(scores, tags, phi) -> float:
    tags = np.asarray(tags)
    s = phi["start"][tags[0]] + phi["end"][tags[-1]] + scores[np.arange(len(tags)), tags].sum()
    return float(s + phi["trans"][tags[:-1], tags[1:]].sum())


def nll(scores, gold, phi):
    """Negative log-likelihood of ``gold`` (tag indices). Returns ``(value, cache)``."""
    scores = np.asarray(scores, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.intp)
    L, T = scores.shape
    if gold.shape != (L,):
        raise ValueError(f"gold has length {len(gold)}, sentence has {L}")
    if gold.min() < 0 or gold.max() >= T:
        raise TagIndexOutOfRange(f"gold tag index outside [0, {T})")
    _check(scores, phi)
    alpha, logz = _forward(scores, phi)
    value = logz - path_score(scores, gold, phi)
    return value, Cache(scores=scores, gold=gold, phi=phi, alpha=alpha, logz=logz)


def marginals(scores, phi):
    """Unary (L, T) and pairwise (L-1, T, T) posterior marginals."""
    alpha, logz = _forward(scores, phi)
    beta = _backward(scores, phi)
    unary = np.exp(alpha + beta - logz)
    pair = np.exp(
        alpha[:-1, :, None] + phi["trans"][None] + (scores[1:] + beta[1:])[:, None, :] - logz
    )
    return unary, pair


def nll_backward(cache: Cache):
    """Returns ``(grads, dscores)``; grads covers trans/start/end (not proj)."""
    cache.consume()
    scores, gold, phi = cache.scores, cache.gold, cache.phi
    L, T = scores.shape
    beta = _backward(scores, phi)
    alpha, logz = cache.alpha, cache.logz
    unary = np.exp(alpha + beta - logz)
    dscores = unary.copy()
    dscores[np.arange(L), gold] -= 1.0
    dtrans = np.zeros((T, T))
    if L > 1:
        pair = np.exp(alpha[:-1, :, None] + phi["trans"][None] + (scores[1:] + beta[1:])[:, None, :] - logz)
        dtrans = pair.sum(axis=0)
        np.add.at(dtrans, (gold[:-1], gold[1:]), -1.0)
    dstart = unary[0].copy()
    dstart[gold[0]] -= 1.0
    dend = unary[-1].copy()
    dend[gold[-1]] -= 1.0
    return {"trans": dtrans, "start": dstart, "end": dend}, dscores


def viterbi(scores, phi, allowed=None, allowed_start=None) -> np.ndarray:
    """Highest-scoring tag path; ties resolve to the lowest tag index.

    ``allowed`` (T, T) and ``allowed_start`` (T,) optionally forbid
    transitions at decode time (e.g. from :meth:`TagVocab.transition_mask`).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ValueError(f"scores must be (L>=1, T), got {scores.shape}")
    _check(scores, phi)
    L, T = scores.shape
    trans = phi["trans"]
    start = phi["start"]
    if allowed is not None:
        trans = np.where(allowed, trans, -np.inf)
    if allowed_start is not None:
        start = np.where(allowed_start, start, -np.inf)
    delta = start + scores[0]
    back = np.zeros((L, T), dtype=np.intp)
    for t in range(1, L):
        cand = delta[:, None] + trans
        back[t] = cand.argmax(axis=0)
        delta = cand[back[t], np.arange(T)] + scores[t]
    path = np.empty(L, dtype=np.intp)
    path[-1] = int(np.argmax(delta + phi["end"]))
    for t in range(L - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path
