"""Hardness-guided domain adaptation for few-shot sequence labeling.

A numpy implementation of episodic meta-training for BiLSTM-CRF taggers in
which each task's meta-gradient is weighted by its share of the batch loss.
"""

__version__ = "0.1.0"

from hgda.corpus import (
    Corpus,
    DomainRegistry,
    EmbeddingTable,
    Sentence,
    corpus_stats,
    extract_entities,
    load_embeddings,
    parse_conll,
    spans_to_tags,
)
from hgda.crf import TagVocab
from hgda.model import ModelConfig, ModelParams, Network
from hgda.sampler import SamplerConfig, Task, make_target_episode, sample_batch, sample_task
from hgda.trainer import TrainConfig, hardness, inner_adapt, outer_step, scaled_lr, train
from hgda.adapt import AdaptationConfig, EvalReport, adapt, evaluate, run_protocol

__all__ = [
    "AdaptationConfig",
    "Corpus",
    "DomainRegistry",
    "EmbeddingTable",
    "EvalReport",
    "ModelConfig",
    "ModelParams",
    "Network",
    "SamplerConfig",
    "Sentence",
    "TagVocab",
    "Task",
    "TrainConfig",
    "adapt",
    "corpus_stats",
    "evaluate",
    "extract_entities",
    "hardness",
    "inner_adapt",
    "load_embeddings",
    "make_target_episode",
    "outer_step",
    "parse_conll",
    "run_protocol",
    "sample_batch",
    "sample_task",
    "scaled_lr",
    "spans_to_tags",
    "train",
]
