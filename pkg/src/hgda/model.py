"""Parameter containers, the tagger network glue, and checkpoint files.

A model is three parameter groups: ``theta`` (encoder), ``phi`` (CRF decoder)
and ``omega`` (domain classifier). Each group is a flat ``dict`` of float64
arrays, and gradients use the same layout.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from hgda.classifier import cls_backward, cls_loss, init_classifier
from hgda.corpus import EmbeddingTable, Sentence
from hgda.crf import TagVocab, init_crf, nll, nll_backward, viterbi
from hgda.encoder import EncoderDims, encode, encode_backward, init_encoder, pool, pool_backward
from hgda.errors import DomainIndexOutOfRange, IncompatibleCheckpoint, NonFiniteLoss, NonFiniteScore

GROUPS = ("theta", "phi", "omega")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 200
    hidden_dim: int = 256
    char_features: bool = False
    char_embed_dim: int = 25
    char_out: int = 50
    char_cnn_width: int = 3
    train_embeddings: bool = True


@dataclass
class ModelParams:
    theta: dict
    phi: dict
    omega: dict | None = None

    def groups(self):
        return {g: getattr(self, g) for g in GROUPS if getattr(self, g) is not None}

    def copy(self) -> "ModelParams":
        return ModelParams(*({k: v.copy() for k, v in grp.items()} if grp is not None else None
                             for grp in (self.theta, self.phi, self.omega)))

    def items(self):
        for g, grp in self.groups().items():
            for k, v in grp.items():
                yield f"{g}/{k}", v

    def equal(self, other: "ModelParams") -> bool:
        """Bitwise equality of every tensor."""
        a, b = dict(self.items()), dict(other.items())
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.items())

    @classmethod
    def zeros_like(cls, other: "ModelParams") -> "ModelParams":
        return cls(*({k: np.zeros_like(v) for k, v in grp.items()} if grp is not None else None
                     for grp in (other.theta, other.phi, other.omega)))


def global_norm(grads: ModelParams) -> float:
    # sorted names: the sum must not depend on dict insertion order
    return float(np.sqrt(sum(np.sum(v * v) for _, v in sorted(grads.items(), key=lambda kv: kv[0]))))


def weighted_sum(grads: Sequence[ModelParams], weights_by_group: dict[str, Sequence[float]]) -> ModelParams:
    """Per-group weighted sum, accumulated in list order (fixed reduction order)."""
    out = ModelParams.zeros_like(grads[0])
    for g, grp in out.groups().items():
        w = weights_by_group[g]
        for i, gr in enumerate(grads):
            for k, v in getattr(gr, g).items():
                grp[k] += w[i] * v
    return out


# ----------------------------------------------------------------------------


def _char_vocab(tokens: Iterable[str]) -> list[str]:
    return sorted({c for w in tokens for c in w})


class Network:
    """Vocabularies plus the forward/backward glue between encoder and heads.

    Holds no trainable state; parameters are always passed in explicitly so
    that clones can be adapted independently.
    """

    def __init__(self, config: ModelConfig, tokens: Sequence[str], tag_vocab: TagVocab,
                 domain_ids: Sequence[int] = (), chars: Sequence[str] | None = None):
        self.config = config
        self.tokens = list(tokens)
        self.token_index = {w: i + 1 for i, w in enumerate(self.tokens)}  # 0 = <unk>
        self.chars = list(chars) if chars is not None else _char_vocab(self.tokens)
        self.char_index = {c: i + 2 for i, c in enumerate(self.chars)}  # 0 = pad, 1 = <unk>
        self.tag_vocab = tag_vocab
        # classifier class c predicts registry domain domain_ids[c]
        self.domain_ids = [int(d) for d in domain_ids]
        self.n_domains = len(self.domain_ids)
        self.dims = EncoderDims(
            vocab_size=len(self.tokens) + 1,
            embed_dim=config.embed_dim,
            hidden_dim=config.hidden_dim,
            char_features=config.char_features,
            n_chars=len(self.chars) + 2,
            char_embed_dim=config.char_embed_dim,
            char_out=config.char_out,
            char_cnn_width=config.char_cnn_width,
        )
        self._batch_cache: dict = {}

    @classmethod
    def from_sentences(cls, config: ModelConfig, sentences: Iterable[Sentence], tag_vocab: TagVocab,
                       domain_ids: Sequence[int] = ()) -> "Network":
        vocab = sorted({w for s in sentences for w in s.tokens})
        return cls(config, vocab, tag_vocab, domain_ids)

    def domain_class(self, domain_id: int) -> int:
        try:
            return self.domain_ids.index(domain_id)
        except ValueError:
            raise DomainIndexOutOfRange(f"domain {domain_id} has no classifier output") from None

    def init_params(self, rng, embeddings: EmbeddingTable | None = None, with_classifier=True) -> ModelParams:
        emb = None
        if embeddings is not None:
            emb = np.zeros((self.dims.vocab_size, self.dims.embed_dim))
            for w, i in self.token_index.items():
                emb[i] = embeddings.lookup(w, rng)
        theta = init_encoder(self.dims, rng, emb)
        phi = init_crf(self.config.hidden_dim, len(self.tag_vocab), rng)
        with_classifier = with_classifier and self.n_domains > 0
        omega = init_classifier(self.config.hidden_dim, self.n_domains, rng) if with_classifier else None
        return ModelParams(theta, phi, omega)

    # -- batching ------------------------------------------------------------

    def _ids(self, s: Sentence):
        hit = self._batch_cache.get(s)
        if hit is None:
            tok = np.array([self.token_index.get(w, 0) for w in s.tokens], dtype=np.intp)
            chars = [[self.char_index.get(c, 1) for c in w] for w in s.tokens]
            hit = (tok, chars)
            self._batch_cache[s] = hit
        return hit

    def batch(self, sentences: Sequence[Sentence]) -> dict:
        ids = [self._ids(s) for s in sentences]
        lengths = np.array([len(t) for t, _ in ids], dtype=np.intp)
        T = int(lengths.max())
        tok = np.zeros((len(ids), T), dtype=np.intp)
        for b, (t, _) in enumerate(ids):
            tok[b, : len(t)] = t
        out = {"token_ids": tok, "lengths": lengths}
        if self.config.char_features:
            C = max(len(w) for _, ch in ids for w in ch)
            cid = np.zeros((len(ids), T, C), dtype=np.intp)
            clen = np.zeros((len(ids), T), dtype=np.intp)
            for b, (_, ch) in enumerate(ids):
                for t, w in enumerate(ch):
                    cid[b, t, : len(w)] = w
                    clen[b, t] = len(w)
            out["char_ids"] = cid
            out["char_lengths"] = clen
        return out

    def encode(self, theta, sentences, dropout=0.0, rng=None):
        bt = self.batch(sentences)
        feats, cache = encode(theta, bt["token_ids"], bt["lengths"], self.dims,
                              char_ids=bt.get("char_ids"), char_lengths=bt.get("char_lengths"),
                              dropout=dropout, rng=rng)
        return feats, bt["lengths"], cache

    # -- objective -----------------------------------------------------------

    def objective(self, params: ModelParams, sentences: Sequence[Sentence], domain: int | None = None,
                  lam: float = 1.0, dropout: float = 0.0, rng=None, tag_vocab: TagVocab | None = None,
                  grads: bool = True):
        """Labelling and classification losses of a sentence set, with gradients.

        Returns ``(lab, cls, g)`` where ``lab`` is the mean CRF nll, ``cls`` the
        mean domain cross-entropy (``nan`` without a classifier or domain), and
        ``g`` holds ``∇θ(lab + lam·cls)``, ``∇φ lab`` and ``∇ω cls``.
        """
        tv = tag_vocab or self.tag_vocab
        feats, lengths, enc_cache = self.encode(params.theta, sentences, dropout, rng)
        N = len(sentences)
        phi = params.phi
        dfeats = np.zeros_like(feats)
        gphi = {k: np.zeros_like(v) for k, v in phi.items()}
        lab = 0.0
        for b, s in enumerate(sentences):
            L = lengths[b]
            F = feats[b, :L]
            scores = F @ phi["proj"]
            try:
                val, cache = nll(scores, tv.encode(s.tags), phi)
            except NonFiniteScore as e:
                raise NonFiniteLoss(f"labelling loss is not finite: {e}") from None
            lab += val
            if grads:
                g, dscores = nll_backward(cache)
                for k in g:
                    gphi[k] += g[k] / N
                gphi["proj"] += F.T @ dscores / N
                dfeats[b, :L] += dscores @ phi["proj"].T / N
        lab /= N

        cls = float("nan")
        gomega = None
        use_cls = params.omega is not None and domain is not None
        if use_cls:
            pooled = pool(feats, lengths)
            cls, ccache = cls_loss(params.omega, pooled, domain)
            if grads:
                gomega, dpooled = cls_backward(ccache)
                if lam != 0.0:
                    dfeats += lam * pool_backward(dpooled, lengths, feats.shape[1])
        elif grads and params.omega is not None:
            gomega = {k: np.zeros_like(v) for k, v in params.omega.items()}

        if not np.isfinite(lab) or (use_cls and not np.isfinite(cls)):
            raise NonFiniteLoss(f"non-finite loss (lab={lab}, cls={cls})")
        if not grads:
            return lab, cls, None
        gtheta = encode_backward(enc_cache, dfeats)
        if not self.config.train_embeddings:
            del gtheta["embedding"]
        return lab, cls, ModelParams(gtheta, gphi, gomega)

    def decode(self, params: ModelParams, sentences: Sequence[Sentence],
               tag_vocab: TagVocab | None = None) -> list[list[str]]:
        """Viterbi tags with illegal IOB2 transitions masked."""
        tv = tag_vocab or self.tag_vocab
        allowed, start = tv.transition_mask()
        out = []
        # chunked so padding stays modest on long test sets
        for i in range(0, len(sentences), 64):
            chunk = sentences[i : i + 64]
            feats, lengths, _ = self.encode(params.theta, chunk)
            for b in range(len(chunk)):
                scores = feats[b, : lengths[b]] @ params.phi["proj"]
                out.append(tv.decode(viterbi(scores, params.phi, allowed, start)))
        return out

    def meta(self) -> dict:
        return {
            "model_config": asdict(self.config),
            "tokens": self.tokens,
            "chars": self.chars,
            "tags": list(self.tag_vocab.tags),
            "domain_ids": self.domain_ids,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "Network":
        return cls(ModelConfig(**meta["model_config"]), meta["tokens"], TagVocab(tuple(meta["tags"])),
                   meta["domain_ids"], meta["chars"])


# ----------------------------------------------------------------------------
# checkpoints: an npz-compatible zip with fixed timestamps so identical
# content produces identical bytes


_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path: str | Path, params: ModelParams, meta: dict,
                    arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write named tensors plus a JSON metadata record.

    ``arrays`` carries extra state such as optimizer momentum buffers.
    """
    tensors = dict(params.items())
    for k, v in (arrays or {}).items():
        tensors[f"extra/{k}"] = v
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(tensors):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(tensors[name]), allow_pickle=False)
            _write_entry(zf, name + ".npy", buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path):
    """Returns ``(params, meta, extra_arrays)``."""
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            groups: dict[str, dict] = {g: {} for g in GROUPS}
            extra = {}
            for name in zf.namelist():
                if not name.endswith(".npy"):
                    continue
                arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                head, key = name[:-4].split("/", 1)
                if head == "extra":
                    extra[key] = arr
                elif head in groups:
                    groups[head][key] = arr
                else:
                    raise IncompatibleCheckpoint(f"unexpected entry {name}")
    except (OSError, zipfile.BadZipFile, KeyError, ValueError, json.JSONDecodeError) as e:
        if isinstance(e, IncompatibleCheckpoint):
            raise
        raise IncompatibleCheckpoint(f"cannot read checkpoint {path}: {e}") from None
    if not groups["theta"] or not groups["phi"]:
        raise IncompatibleCheckpoint(f"checkpoint {path} lacks encoder or decoder tensors")
    params = ModelParams(groups["theta"], groups["phi"], groups["omega"] or None)
    return params, meta, extra
