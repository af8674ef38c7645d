"""Domain classifier head: one fully connected layer with softmax cross-entropy.

``omega = {"W": (H, D), "b": (D,)}``. The loss for a task is the mean
cross-entropy over its sentences, each labelled with the task's domain.
"""

from __future__ import annotations

import numpy as np

from hgda.encoder import Cache, uniform_init
from hgda.errors import DomainIndexOutOfRange


def init_classifier(hidden_dim: int, n_domains: int, rng) -> dict:
    return {
        "W": uniform_init(rng, (hidden_dim, n_domains), hidden_dim),
        "b": np.zeros(n_domains),
    }


def cls_loss(omega, pooled, true_domain: int):
    """Returns ``(loss, cache)`` for pooled sentence vectors of shape (N, H)."""
    pooled = np.atleast_2d(np.asarray(pooled, dtype=np.float64))
    D = omega["b"].shape[0]
    if not 0 <= true_domain < D:
        raise DomainIndexOutOfRange(f"domain {true_domain} outside [0, {D})")
    logits = pooled @ omega["W"] + omega["b"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[:, true_domain].mean()
    return float(loss), Cache(pooled=pooled, probs=np.exp(logp), y=true_domain, omega=omega)


def cls_backward(cache: Cache):
    """Returns ``(grads, dpooled)``."""
    cache.consume()
    N = cache.pooled.shape[0]
    dlogits = cache.probs.copy()
    dlogits[:, cache.y] -= 1.0
    dlogits /= N
    grads = {"W": cache.pooled.T @ dlogits, "b": dlogits.sum(axis=0)}
    return grads, dlogits @ cache.omega["W"].T
