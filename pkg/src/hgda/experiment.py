"""Wiring between loaded corpora and the trainer / adaptation harness."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from hgda.corpus import Corpus, DomainRegistry, EmbeddingTable, Sentence, merge_by_domain
from hgda.crf import TagVocab
from hgda.model import ModelConfig, ModelParams, Network
from hgda.rng import INIT, RngKey
from hgda.sampler import TaskPool


@dataclass
class Setup:
    registry: DomainRegistry
    net: Network
    train_pool: TaskPool
    dev_pool: TaskPool | None
    target_train: list[Sentence]
    target_test: list[Sentence]
    target_tags: TagVocab | None

    def init_params(self, seed: int, embeddings: EmbeddingTable | None = None) -> ModelParams:
        return self.net.init_params(RngKey(seed, (INIT,)).generator(), embeddings)


def prepare(registry: DomainRegistry, corpora: Sequence[Corpus], model_cfg: ModelConfig) -> Setup:
    """Source pools exclude the target domain; the token vocabulary spans every corpus.

    Including target-domain tokens in the vocabulary only reserves embedding
    rows (as a pretrained table would); no target labels are seen in training.
    """
    source = set(registry.source_ids)
    src = [c for c in corpora if c.domain_id in source]
    train_pool = {d: s for d, s in merge_by_domain(src, "train").items()}
    dev = merge_by_domain(src, "dev")
    types = sorted({t for c in src for t in c.entity_types})
    domain_ids = sorted(train_pool)
    net = Network.from_sentences(model_cfg, (s for c in corpora for s in c.sentences),
                                 TagVocab.from_types(types), domain_ids)
    tid = registry.target_id
    t_train = merge_by_domain(corpora, "train").get(tid, []) if tid is not None else []
    t_test = merge_by_domain(corpora, "test").get(tid, []) if tid is not None else []
    t_types = {t[2:] for s in t_train + t_test for t in s.tags if t != "O"}
    return Setup(
        registry=registry,
        net=net,
        train_pool=TaskPool(train_pool),
        dev_pool=TaskPool(dev) if len(dev) == len(train_pool) else None,
        target_train=t_train,
        target_test=t_test,
        target_tags=TagVocab.from_types(t_types) if tid is not None else None,
    )
