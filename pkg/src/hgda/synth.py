"""Synthetic multi-domain BIO corpora with controllable difficulty.

Every domain has its own entity vocabulary and a few private context words;
all domains share a pool of common context words and a set of trigger words
that usually precede an entity. Entity words never occur outside entities,
so a tagger can separate the data perfectly, while the shared triggers give
an encoder something to transfer to an unseen domain.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from hgda.corpus import Corpus, DomainRegistry, Sentence, serialize_conll
from hgda.rng import SYNTH, RngKey


@dataclass(frozen=True)
class SynthConfig:
    domains: tuple[str, ...] = ("Drug", "Gene", "Species", "Disease")
    target: str | None = "Disease"
    entity_density: tuple[float, ...] = (0.8, 0.5, 0.13, 0.55)
    n_train: int = 200
    n_dev: int = 50
    n_test: int = 100
    n_shared: int = 60
    n_private: int = 15
    n_entity_words: int = 30
    n_triggers: int = 8
    overlap: float = 0.8  # probability a context word comes from the shared pool
    trigger_prob: float = 0.9
    spurious_trigger_prob: float = 0.15
    min_len: int = 6
    max_len: int = 14
    max_entity_len: int = 3

    def __post_init__(self):
        if len(self.entity_density) != len(self.domains):
            raise ValueError("entity_density needs one value per domain")
        if self.target is not None and self.target not in self.domains:
            raise ValueError(f"target {self.target!r} is not a domain")


def _sentence(rng, cfg: SynthConfig, d: int, name: str, density: float) -> Sentence:
    L = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    words = []
    for _ in range(L):
        if rng.random() < cfg.overlap:
            words.append(f"w{rng.integers(cfg.n_shared)}")
        else:
            words.append(f"{name.lower()}_c{rng.integers(cfg.n_private)}")
    tags = ["O"] * L
    if rng.random() < cfg.spurious_trigger_prob:
        words[int(rng.integers(L))] = f"t{rng.integers(cfg.n_triggers)}"
    if rng.random() < density:
        n_ent = 1 + int(rng.random() < 0.3)
        for _ in range(n_ent):
            k = int(rng.integers(1, cfg.max_entity_len + 1))
            ent = [f"{name}_e{rng.integers(cfg.n_entity_words)}" for _ in range(k)]
            ent_tags = [f"B-{name}"] + [f"I-{name}"] * (k - 1)
            if rng.random() < cfg.trigger_prob:
                ent = [f"t{rng.integers(cfg.n_triggers)}"] + ent
                ent_tags = ["O"] + ent_tags
            pos = int(rng.integers(len(words) + 1))
            # never split an existing entity
            while pos < len(tags) and tags[pos].startswith("I-"):
                pos += 1
            words[pos:pos] = ent
            tags[pos:pos] = ent_tags
    return Sentence(tuple(words), tuple(tags), d)


def make_synthetic(cfg: SynthConfig = SynthConfig(), seed: int = 0):
    """Returns ``(registry, corpora)`` with a train/dev/test corpus per domain."""
    registry = DomainRegistry(cfg.domains, cfg.target)
    corpora = []
    for d, name in enumerate(cfg.domains):
        for s_i, (split, n) in enumerate((("train", cfg.n_train), ("dev", cfg.n_dev), ("test", cfg.n_test))):
            rng = RngKey(seed, (SYNTH, d, s_i)).generator()
            sents = [_sentence(rng, cfg, d, name, cfg.entity_density[d]) for _ in range(n)]
            if sents:
                corpora.append(Corpus(name=f"{name}-{split}", domain_id=d, sentences=tuple(sents), split=split))
    return registry, corpora


def write_synthetic(out_dir: str | Path, cfg: SynthConfig = SynthConfig(), seed: int = 0) -> Path:
    """Write one CoNLL file per (domain, split) plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    registry, corpora = make_synthetic(cfg, seed)
    entries = []
    for c in corpora:
        dom = registry.domains[c.domain_id]
        rel = f"{dom.lower()}_{c.split}.conll"
        (out / rel).write_text(serialize_conll(c), encoding="utf-8")
        entries.append({"path": rel, "name": dom, "domain": dom, "split": c.split, "entity_type": dom})
    manifest = {
        "target_domain": registry.target_domain,
        "corpora": entries,
        "synth": {"seed": seed, **asdict(cfg)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path
