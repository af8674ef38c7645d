"""The linear-chain CRF on its own: partition function, marginals, Viterbi.

The log partition function is checked against explicit enumeration of every
tag path, which is feasible for a four-token sentence.

Run: python demos/02_crf_decoding.py
"""

import itertools

import numpy as np

from hgda.crf import TagVocab, log_partition, marginals, viterbi

vocab = TagVocab.from_types(["Disease"])
print("tags:", vocab.tags)

rng = np.random.default_rng(0)
L, T = 4, len(vocab)
scores = rng.normal(size=(L, T))
phi = {"trans": rng.normal(size=(T, T)), "start": rng.normal(size=T), "end": rng.normal(size=T)}


def path_score(path):
    s = phi["start"][path[0]] + phi["end"][path[-1]] + sum(scores[i, y] for i, y in enumerate(path))
    return s + sum(phi["trans"][a, b] for a, b in zip(path, path[1:]))


brute = np.logaddexp.reduce([path_score(p) for p in itertools.product(range(T), repeat=L)])
print(f"log Z forward algorithm {log_partition(scores, phi):.12f}")
print(f"log Z enumeration       {brute:.12f}")

unary, _ = marginals(scores, phi)
print("per-position tag marginals (rows sum to one):")
print(np.round(unary, 3))

# Unconstrained decoding can emit I-Disease right after O; the IOB2 mask cannot.
phi["trans"][vocab.index("O"), vocab.index("I-Disease")] += 5.0
free = vocab.decode(viterbi(scores, phi))
allowed, start = vocab.transition_mask()
masked = vocab.decode(viterbi(scores, phi, allowed, start))
print("unconstrained:", free)
print("IOB2-masked:  ", masked)
