"""Few-shot adaptation to an unseen target domain and entity-level evaluation.

Only the encoder transfers: adaptation starts from the trained ``theta``, a
freshly initialised CRF for the target tag set, and no domain classifier.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from hgda import __version__
from hgda.corpus import Sentence, extract_entities
from hgda.crf import TagVocab, init_crf
from hgda.errors import DimensionMismatch, HGDAError
from hgda.model import ModelParams, Network
from hgda.rng import ADAPT, RngKey
from hgda.sampler import Episode, make_target_episodes
from hgda.trainer import SGD, clip_global, scaled_lr


class LeakageError(HGDAError, AssertionError):
    pass


@dataclass(frozen=True)
class AdaptationConfig:
    target_size: int = 10
    repeats: int = 20
    base_lr: float = 1e-2
    base_batch: int = 32
    adapt_lr: float | None = None  # defaults to scaled_lr(base_lr, target_size, base_batch)
    adapt_steps: int = 100
    stop_nll: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-6
    grad_clip: float = 5.0
    dropout: float = 0.2
    share_policy: str = "encoder_only"
    workers: int = 1

    def __post_init__(self):
        if self.repeats < 1 or self.target_size < 1:
            raise ValueError("repeats and target_size must be >= 1")
        if self.share_policy != "encoder_only":
            raise ValueError(f"unsupported share policy {self.share_policy!r}")

    @property
    def lr(self) -> float:
        return self.adapt_lr if self.adapt_lr is not None else scaled_lr(self.base_lr, self.target_size, self.base_batch)


@dataclass
class AdaptedModel:
    params: ModelParams
    tag_vocab: TagVocab
    steps_run: int = 0
    final_nll: float = float("nan")


def adapt(trained: ModelParams, net: Network, episode: Sequence[Sentence], tag_vocab: TagVocab,
          cfg: AdaptationConfig, seed: int, repeat_index: int = 0) -> AdaptedModel:
    """Fine-tune the shared encoder and a fresh target decoder on ``episode``.

    Full-batch steps over the episode with clipped momentum SGD; stops after
    ``adapt_steps`` passes or once the training nll drops below ``stop_nll``.
    """
    if not episode:
        raise ValueError("adaptation episode is empty")
    if trained.theta["fwd_U"].shape[0] * 2 != net.config.hidden_dim:
        raise DimensionMismatch("trained encoder does not match the network's hidden size")
    key = RngKey(seed, (ADAPT, cfg.target_size, repeat_index))
    phi = init_crf(net.config.hidden_dim, len(tag_vocab), key.child(0).generator())
    params = ModelParams({k: v.copy() for k, v in trained.theta.items()}, phi, None)
    opt = SGD(cfg.momentum, cfg.weight_decay)
    lab = float("nan")
    step = 0
    for step in range(cfg.adapt_steps):
        lab, _, g = net.objective(params, episode, None, 0.0, cfg.dropout, key.child(1, step).generator(),
                                  tag_vocab=tag_vocab)
        if lab < cfg.stop_nll:
            break
        clip_global(g, cfg.grad_clip)
        params = opt.step(params, g, cfg.lr)
    else:
        step = cfg.adapt_steps
    return AdaptedModel(params, tag_vocab, step, lab)


def span_counts(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> tuple[int, int, int]:
    tp = n_pred = n_gold = 0
    for g, p in zip(gold, pred):
        gs, ps = set(extract_entities(g)), set(extract_entities(p))
        tp += len(gs & ps)
        n_pred += len(ps)
        n_gold += len(gs)
    return tp, n_pred, n_gold


def prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def evaluate(model: AdaptedModel, net: Network, test: Sequence[Sentence]) -> dict:
    """Micro entity-level precision, recall and F1 with exact (start, end, type) matching."""
    test = list(test.sentences) if hasattr(test, "sentences") else list(test)
    pred = net.decode(model.params, test, model.tag_vocab)
    tp, n_pred, n_gold = span_counts([s.tags for s in test], pred)
    p, r, f = prf(tp, n_pred, n_gold)
    return {"precision": p, "recall": r, "f1": f, "tp": tp, "n_pred": n_pred, "n_gold": n_gold}


@dataclass
class EvalReport:
    target: str
    method: str
    size: int
    seed: int
    repeats: list[dict] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    config_hash: str = ""
    version: str = __version__

    @property
    def mean(self) -> dict:
        keys = ("precision", "recall", "f1")
        return {k: float(np.mean([r[k] for r in self.repeats])) for k in keys}

    @property
    def std(self) -> dict:
        return {k: float(np.std([r[k] for r in self.repeats])) for k in ("precision", "recall", "f1")}

    def to_json(self) -> dict:
        return {
            "target": self.target,
            "method": self.method,
            "size": self.size,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "version": self.version,
            "mean": self.mean,
            "std": self.std,
            "repeats": self.repeats,
            "manifest": self.manifest,
        }

    def write(self, directory: str | Path, stem: str | None = None) -> tuple[Path, Path]:
        directory = Path(directory)
        stem = stem or f"report_{self.method}_{self.target}_{self.size}"
        jpath, cpath = directory / f"{stem}.json", directory / f"{stem}.csv"
        jpath.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        cpath.write_text(self.to_csv())
        return jpath, cpath

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "target", "size", "repeat", "precision", "recall", "f1",
                    "seed", "config_hash", "version"])
        for r in self.repeats:
            w.writerow([self.method, self.target, self.size, r["repeat"], f"{r['precision']:.6f}",
                        f"{r['recall']:.6f}", f"{r['f1']:.6f}", self.seed, self.config_hash, self.version])
        m = self.mean
        w.writerow([self.method, self.target, self.size, "mean", f"{m['precision']:.6f}", f"{m['recall']:.6f}",
                    f"{m['f1']:.6f}", self.seed, self.config_hash, self.version])
        return buf.getvalue()


def check_leakage(episode: Episode):
    """T' must never share a sentence with the test split.

    Identity overlap (the same sentence object) is a configuration error and
    raises; textual duplicates across official splits are only counted.
    """
    ids = {id(s) for s in episode.test}
    if any(id(s) in ids for s in episode.sentences):
        raise LeakageError(f"episode {episode.manifest_entry()} shares sentences with the test split")
    test_text = {s.tokens for s in episode.test}
    return sum(s.tokens in test_text for s in episode.sentences)


def run_protocol(trained: ModelParams, net: Network, target_train, target_test, cfg: AdaptationConfig,
                 seed: int, tag_vocab: TagVocab | None = None, target: str = "target",
                 method: str = "hgda", config_hash: str = "") -> EvalReport:
    """Repeat (draw T', adapt, evaluate on test) ``cfg.repeats`` times."""
    test = list(target_test.sentences) if hasattr(target_test, "sentences") else list(target_test)
    if not test:
        raise ValueError("target test split is empty")
    if tag_vocab is None:
        types = {t[2:] for s in test for t in s.tags if t != "O"}
        train_list = target_train.sentences if hasattr(target_train, "sentences") else target_train
        types |= {t[2:] for s in train_list for t in s.tags if t != "O"}
        tag_vocab = TagVocab.from_types(types)
    episodes = make_target_episodes(target_train, cfg.target_size, cfg.repeats, seed, test)

    def one(ep: Episode) -> dict:
        overlap = check_leakage(ep)
        model = adapt(trained, net, ep.sentences, tag_vocab, cfg, seed, ep.repeat_index)
        res = evaluate(model, net, test)
        res.update(repeat=ep.repeat_index, indices=list(ep.indices), adapt_steps=model.steps_run,
                   final_nll=float(model.final_nll), text_overlap=overlap)
        return res

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            rows = list(ex.map(one, episodes))
    else:
        rows = [one(ep) for ep in episodes]
    manifest = {
        "seed": seed,
        "size": cfg.target_size,
        "tags": list(tag_vocab.tags),
        "episodes": [ep.manifest_entry() for ep in episodes],
    }
    return EvalReport(target, method, cfg.target_size, seed, rows, manifest, config_hash)


def write_table(path: str | Path, reports: Sequence[EvalReport], metric: str = "f1") -> Path:
    """Collate reports into a method x target grid per size, plus an Overall column."""
    targets = sorted({r.target for r in reports})
    grid: dict[tuple[int, str], dict[str, float]] = {}
    for r in reports:
        grid.setdefault((r.size, r.method), {})[r.target] = r.mean[metric]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size", "method", *targets, "Overall"])
    for (size, method) in sorted(grid):
        row = grid[(size, method)]
        vals = [row.get(t) for t in targets]
        present = [v for v in vals if v is not None]
        w.writerow([size, method, *("" if v is None else f"{v:.4f}" for v in vals),
                    f"{np.mean(present):.4f}" if present else ""])
    Path(path).write_text(buf.getvalue())
    return Path(path)
