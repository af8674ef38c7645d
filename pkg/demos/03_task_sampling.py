"""Episodic tasks: K support + K query sentences from one source domain.

Run: python demos/03_task_sampling.py
"""

from collections import Counter

from hgda.experiment import prepare
from hgda.model import ModelConfig
from hgda.rng import RngKey
from hgda.sampler import SamplerConfig, sample_batch
from hgda.synth import SynthConfig, make_synthetic

registry, corpora = make_synthetic(SynthConfig(), seed=0)
setup = prepare(registry, corpora, ModelConfig())
pool = setup.train_pool
print("source domains:", [registry.domains[d] for d in pool.domains])

key = RngKey(seed=42, path=(2, 0))  # one stream per (purpose, iteration)
for mode in ("uniform", "ne_constrained"):
    tasks = sample_batch(pool, SamplerConfig(K=5, mode=mode), 200, key)
    share = sum(s.has_entity for t in tasks for s in t.support) / (5 * len(tasks))
    per_domain = Counter(registry.domains[t.domain_id] for t in tasks)
    print(f"{mode:15s} support sentences with an entity: {100 * share:5.1f}%   tasks per domain: {dict(per_domain)}")

# The same key always yields the same tasks, however many threads draw them.
a = sample_batch(pool, SamplerConfig(K=5), 8, key)
b = sample_batch(pool, SamplerConfig(K=5), 8, key, workers=4)
print("identical under 4 workers:", a == b)

t = a[0]
print(f"\nfirst task, domain {registry.domains[t.domain_id]}:")
for tag, part in (("S", t.support), ("Q", t.query)):
    for s in part:
        print(f"  {tag} " + " ".join(f"{w}/{y}" if y != "O" else w for w, y in zip(s.tokens, s.tags)))
