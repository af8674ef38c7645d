"""Multi-domain BIO corpora, entity spans, embedding tables and run manifests."""

from __future__ import annotations

import io
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from hgda.errors import (
    ConfigError,
    DanglingInside,
    DimensionMismatch,
    EmptyCorpus,
    EmptyManifest,
    InvalidTag,
    InvalidTagSequence,
    MalformedLine,
    UnparsableFloat,
)

TAG_RE = re.compile(r"^(?:O|([BI])-(\S+))$")
SPLITS = ("train", "dev", "test")


def _split_tag(tag: str) -> tuple[str, str | None]:
    m = TAG_RE.match(tag)
    if m is None:
        raise InvalidTag(f"tag {tag!r} is not O, B-<type> or I-<type>")
    if m.group(1) is None:
        return "O", None
    return m.group(1), m.group(2)


def check_iob2(tags: Sequence[str], repair: bool = False) -> list[str]:
    """Validate strict IOB2; with ``repair`` the head of a bare I- run becomes B-."""
    out = []
    prev_type = None
    for i, tag in enumerate(tags):
        prefix, etype = _split_tag(tag)
        if prefix == "I" and prev_type != etype:
            if not repair:
                raise DanglingInside(f"position {i}: {tag} does not continue a {etype} span")
            tag = "B-" + etype
        out.append(tag)
        prev_type = etype
    return out


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    tags: tuple[str, ...]
    domain_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "tags", tuple(self.tags))
        if len(self.tokens) == 0:
            raise ValueError("a sentence needs at least one token")
        if len(self.tokens) != len(self.tags):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.tags)} tags")
        check_iob2(self.tags)

    def __len__(self):
        return len(self.tokens)

    @property
    def has_entity(self) -> bool:
        return any(t != "O" for t in self.tags)


@dataclass(frozen=True)
class Corpus:
    name: str
    domain_id: int
    sentences: tuple[Sentence, ...]
    split: str = "train"
    entity_types: frozenset = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        for s in self.sentences:
            if s.domain_id != self.domain_id:
                raise ValueError(f"sentence domain {s.domain_id} != corpus domain {self.domain_id}")
        observed = frozenset(t[2:] for s in self.sentences for t in s.tags if t != "O")
        if self.entity_types is None:
            object.__setattr__(self, "entity_types", observed)
        elif frozenset(self.entity_types) != observed:
            raise ValueError(f"entity_types {set(self.entity_types)} != observed {set(observed)}")

    def __len__(self):
        return len(self.sentences)


@dataclass(frozen=True)
class DomainRegistry:
    domains: tuple[str, ...]
    target_domain: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        if len(set(self.domains)) != len(self.domains):
            raise ValueError(f"duplicate domain names in {self.domains}")
        if self.target_domain is not None and self.target_domain not in self.domains:
            raise ValueError(f"target domain {self.target_domain!r} is not registered")

    def index(self, name: str) -> int:
        return self.domains.index(name)

    @property
    def source_ids(self) -> list[int]:
        return [i for i, d in enumerate(self.domains) if d != self.target_domain]

    @property
    def target_id(self) -> int | None:
        return None if self.target_domain is None else self.index(self.target_domain)


def _lines(stream: str | TextIO) -> Iterable[str]:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    for line in stream:
        yield line.rstrip("\r\n")


def parse_conll(
    stream: str | TextIO,
    domain_id: int = 0,
    repair: bool = False,
    *,
    name: str = "",
    split: str = "train",
    keep_types: Iterable[str] | None = None,
) -> Corpus:
    """Read two-column ``token tag`` text with blank lines between sentences.

    ``keep_types``, when given, maps every entity type outside the set to ``O``
    (after validation, so filtering never hides malformed input).
    """
    keep = None if keep_types is None else set(keep_types)
    sentences = []
    tokens, tags = [], []

    def flush():
        if not tokens:
            return
        fixed = check_iob2(tags, repair=repair)
        if keep is not None:
            fixed = [t if t == "O" or t[2:] in keep else "O" for t in fixed]
        sentences.append(Sentence(tuple(tokens), tuple(fixed), domain_id))
        tokens.clear()
        tags.clear()

    for lineno, line in enumerate(_lines(stream), 1):
        if not line.strip():
            flush()
            continue
        cols = line.split()
        if len(cols) != 2:
            raise MalformedLine(f"line {lineno}: expected 2 columns, got {len(cols)}: {line!r}")
        try:
            _split_tag(cols[1])
        except InvalidTag as e:
            raise InvalidTag(f"line {lineno}: {e}") from None
        tokens.append(cols[0])
        tags.append(cols[1])
    flush()
    if not sentences:
        raise EmptyCorpus(f"no sentences in corpus {name!r}")
    return Corpus(name=name, domain_id=domain_id, sentences=tuple(sentences), split=split)


def serialize_conll(sentences: Corpus | Iterable[Sentence]) -> str:
    if isinstance(sentences, Corpus):
        sentences = sentences.sentences
    blocks = []
    for s in sentences:
        blocks.append("".join(f"{w} {t}\n" for w, t in zip(s.tokens, s.tags)))
    return "\n".join(blocks) + ("\n" if blocks else "")


def corpus_stats(c: Corpus) -> dict:
    if not c.sentences:
        raise EmptyCorpus(f"corpus {c.name!r} is empty")
    n = len(c.sentences)
    return {
        "num_sentences": n,
        "num_unique_tokens": len({w for s in c.sentences for w in s.tokens}),
        "fraction_with_entities": sum(s.has_entity for s in c.sentences) / n,
    }


def extract_entities(tags: Sequence[str]) -> list[tuple[int, int, str]]:
    """Maximal B-then-I runs as ``(start, end_exclusive, type)``, sorted by start."""
    spans = []
    start = etype = None
    for i, tag in enumerate(tags):
        try:
            prefix, t = _split_tag(tag)
        except InvalidTag as e:
            raise InvalidTagSequence(str(e)) from None
        if prefix == "I":
            if t != etype:
                raise InvalidTagSequence(f"position {i}: {tag} has no open {t} span")
            continue
        if etype is not None:
            spans.append((start, i, etype))
        start, etype = (i, t) if prefix == "B" else (None, None)
    if etype is not None:
        spans.append((start, len(tags), etype))
    return spans


def spans_to_tags(spans: Iterable[tuple[int, int, str]], length: int) -> list[str]:
    tags = ["O"] * length
    for start, end, etype in spans:
        tags[start] = "B-" + etype
        for i in range(start + 1, end):
            tags[i] = "I-" + etype
    return tags


@dataclass
class EmbeddingTable:
    dimension: int
    vocab: dict[str, np.ndarray] = field(default_factory=dict)
    unk_policy: str = "zeros"
    unk_sigma: float = 0.1

    def __post_init__(self):
        if self.unk_policy not in ("zeros", "random_normal"):
            raise ValueError(f"unknown unk_policy {self.unk_policy!r}")
        for w, v in self.vocab.items():
            if np.shape(v) != (self.dimension,):
                raise DimensionMismatch(f"{w!r}: vector of shape {np.shape(v)}, expected ({self.dimension},)")

    def __len__(self):
        return len(self.vocab)

    def __contains__(self, token):
        return token in self.vocab or token.lower() in self.vocab

    def lookup(self, token: str, rng: np.random.Generator | None = None) -> np.ndarray:
        # case-sensitive first, then lowercase
        v = self.vocab.get(token)
        if v is None:
            v = self.vocab.get(token.lower())
        if v is not None:
            return np.array(v, dtype=np.float64)
        if self.unk_policy == "zeros":
            return np.zeros(self.dimension)
        if rng is None:
            raise ValueError("random_normal unk policy needs an rng")
        return rng.normal(0.0, self.unk_sigma, self.dimension)


def load_embeddings(stream: str | TextIO, expected_dim: int, unk_policy: str = "zeros") -> EmbeddingTable:
    """Read word2vec-style text vectors. A leading ``<count> <dim>`` header is skipped."""
    vocab: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(_lines(stream), 1):
        cols = line.split()
        if not cols:
            continue
        if lineno == 1 and len(cols) == 2 and cols[0].isdigit() and cols[1] == str(expected_dim):
            continue
        if len(cols) - 1 != expected_dim:
            raise DimensionMismatch(f"line {lineno}: {len(cols) - 1} values, expected {expected_dim}")
        try:
            vec = np.array([float(x) for x in cols[1:]])
        except ValueError:
            raise UnparsableFloat(f"line {lineno}: cannot parse floats in {line!r}") from None
        vocab.setdefault(cols[0], vec)
    return EmbeddingTable(expected_dim, vocab, unk_policy=unk_policy)


# ----------------------------------------------------------------------------
# manifests


@dataclass
class CorpusEntry:
    path: Path
    name: str
    domain: str
    split: str = "train"
    entity_type: str | None = None
    keep_types: list[str] | None = None
    repair: bool = False


@dataclass
class Manifest:
    """A parsed domain manifest: which files belong to which domain and split."""

    path: Path
    entries: list[CorpusEntry]
    registry: DomainRegistry
    embeddings_path: Path | None = None
    embedding_dim: int | None = None

    def load_corpora(self) -> list[Corpus]:
        corpora = []
        for e in self.entries:
            with open(e.path, encoding="utf-8") as fh:
                corpora.append(
                    parse_conll(
                        fh,
                        self.registry.index(e.domain),
                        repair=e.repair,
                        name=e.name,
                        split=e.split,
                        keep_types=e.keep_types,
                    )
                )
        return corpora

    def load_embeddings(self) -> EmbeddingTable | None:
        if self.embeddings_path is None:
            return None
        with open(self.embeddings_path, encoding="utf-8") as fh:
            return load_embeddings(fh, self.embedding_dim)


def load_manifest(path: str | Path) -> Manifest:
    """Load a JSON domain manifest.

    Schema::

        {"target_domain": "Disease",                     # optional
         "embeddings": {"path": "vec.txt", "dim": 200},  # optional
         "corpora": [{"path": "ncbi/train.tsv", "name": "NCBI", "domain": "Disease",
                      "split": "train", "entity_type": "Disease",
                      "keep_types": ["Disease"], "repair": false}, ...]}

    Relative paths resolve against the manifest's directory. Domains are
    registered in order of first appearance.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    items = raw.get("corpora") or []
    if not items:
        raise EmptyManifest(f"manifest {path} lists no corpora")
    base = path.parent
    entries = []
    domains: list[str] = []
    for i, item in enumerate(items):
        try:
            p = Path(item["path"])
            entry = CorpusEntry(
                path=p if p.is_absolute() else base / p,
                name=item.get("name", p.stem),
                domain=item["domain"],
                split=item.get("split", "train"),
                entity_type=item.get("entity_type"),
                keep_types=item.get("keep_types"),
                repair=bool(item.get("repair", False)),
            )
        except KeyError as k:
            raise ConfigError(f"manifest entry {i} is missing {k}") from None
        if entry.split not in SPLITS:
            raise ConfigError(f"manifest entry {i}: bad split {entry.split!r}")
        if not entry.path.is_file():
            raise ConfigError(f"manifest entry {i}: file not found: {entry.path}")
        if entry.domain not in domains:
            domains.append(entry.domain)
        entries.append(entry)
    emb = raw.get("embeddings")
    emb_path = emb_dim = None
    if emb:
        emb_path = Path(emb["path"])
        emb_path = emb_path if emb_path.is_absolute() else base / emb_path
        emb_dim = int(emb["dim"])
    try:
        registry = DomainRegistry(tuple(domains), raw.get("target_domain"))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return Manifest(path, entries, registry, emb_path, emb_dim)


def merge_by_domain(corpora: Iterable[Corpus], split: str = "train") -> dict[int, list[Sentence]]:
    """Concatenate all corpora of one split per domain (e.g. NCBI + BC5CDR for Disease)."""
    pools: dict[int, list[Sentence]] = {}
    for c in corpora:
        if c.split == split:
            pools.setdefault(c.domain_id, []).extend(c.sentences)
    return pools
