"""Command-line entry point: ``hgda {stats,synth,train,adapt-eval,sample-tasks}``.

Configuration is a JSON file with optional ``model``, ``train`` and
``adapt`` sections whose keys mirror :class:`ModelConfig`,
:class:`TrainConfig` and :class:`AdaptationConfig`; command-line flags
override file values. All randomness flows from ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from hgda import __version__
from hgda.adapt import AdaptationConfig, run_protocol, write_table
from hgda.corpus import corpus_stats, load_manifest
from hgda.errors import ConfigError, EmptyManifest, HGDAError, IncompatibleCheckpoint, NonFiniteGradient, NonFiniteLoss
from hgda.experiment import prepare
from hgda.model import ModelConfig, ModelParams, Network, load_checkpoint, save_checkpoint
from hgda.rng import SAMPLE, RngKey
from hgda.sampler import SamplerConfig, TaskPool, sample_batch
from hgda.synth import SynthConfig, write_synthetic
from hgda.trainer import SGD, TrainConfig, config_hash, train

log = logging.getLogger("hgda")

EXIT_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_CHECKPOINT = 4

MODES = {
    "hgda": {"mode": "uniform", "weighting": "hardness"},
    "hgda-nes": {"mode": "ne_constrained", "weighting": "hardness"},
    "uniform": {"mode": "uniform", "weighting": "uniform"},
}


def _section(cls, raw: dict, overrides: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    vals = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls(**vals)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {cls.__name__}: {e}") from None


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    raw = json.loads(p.read_text())
    unknown = set(raw) - {"model", "train", "adapt"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return raw


def _settings(cfg) -> dict:
    """Config fields that can change results; ``workers`` only changes wall time."""
    d = asdict(cfg)
    d.pop("workers", None)
    return d


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------


def cmd_stats(args) -> int:
    manifest = load_manifest(args.manifest)
    corpora = manifest.load_corpora()
    rows = []
    for entry, c in zip(manifest.entries, corpora):
        st = corpus_stats(c)
        rows.append({
            "corpus": entry.name,
            "domain": entry.domain,
            "split": c.split,
            "entity_type": entry.entity_type or ",".join(sorted(c.entity_types)),
            "sentences": st["num_sentences"],
            "unique_tokens": st["num_unique_tokens"],
            "pct_with_entities": round(100 * st["fraction_with_entities"], 1),
        })
    cols = list(rows[0])
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print("  ".join(str(r[c]).ljust(w) for c, w in zip(cols, widths)))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.DictWriter(buf, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        (out / "corpus_stats.csv").write_text(buf.getvalue())
    return 0


def cmd_synth(args) -> int:
    over = {}
    if args.density:
        over["entity_density"] = tuple(float(x) for x in args.density.split(","))
    for k in ("n_train", "n_dev", "n_test"):
        if getattr(args, k) is not None:
            over[k] = getattr(args, k)
    if args.domains:
        over["domains"] = tuple(args.domains.split(","))
        over.setdefault("target", over["domains"][-1])
        if "entity_density" not in over:
            over["entity_density"] = (0.5,) * len(over["domains"])
    if args.target is not None:
        over["target"] = args.target or None
    try:
        cfg = replace(SynthConfig(), **over)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    path = write_synthetic(args.out, cfg, args.seed)
    print(path)
    return 0


def _configs(args):
    raw = load_config(getattr(args, "config", None))
    model_cfg = _section(ModelConfig, raw.get("model", {}), {})
    train_over = dict(MODES[args.mode]) if getattr(args, "mode", None) else {}
    train_over.update(max_outer_iters=getattr(args, "iters", None), workers=getattr(args, "workers", None),
                      K=getattr(args, "k", None), m=getattr(args, "m", None))
    train_cfg = _section(TrainConfig, raw.get("train", {}), train_over)
    adapt_cfg = _section(AdaptationConfig, raw.get("adapt", {}),
                         {"repeats": getattr(args, "repeats", None), "workers": getattr(args, "workers", None)})
    return model_cfg, train_cfg, adapt_cfg


def cmd_train(args) -> int:
    # validate everything before touching the output directory
    manifest = load_manifest(args.manifest)
    model_cfg, train_cfg, adapt_cfg = _configs(args)
    corpora = manifest.load_corpora()
    embeddings = manifest.load_embeddings()
    if embeddings is not None and embeddings.dimension != model_cfg.embed_dim:
        raise ConfigError(f"embedding file has dim {embeddings.dimension}, model expects {model_cfg.embed_dim}")
    setup = prepare(manifest.registry, corpora, model_cfg)
    if len(setup.train_pool.domains) < 2:
        raise ConfigError("training needs at least two source domains (target excluded)")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(model_cfg, _settings(train_cfg), {"mode": args.mode, "manifest": str(manifest.path.name)})
    stamp = {"seed": args.seed, "config_hash": chash, "version": __version__}
    meta = {
        **stamp,
        "mode": args.mode,
        "network": setup.net.meta(),
        "registry": {"domains": list(manifest.registry.domains), "target": manifest.registry.target_domain},
        "train_config": _settings(train_cfg),
    }

    params = setup.init_params(args.seed, embeddings)
    optimizer, start, es = None, 0, None
    log_path = out / "train_log.jsonl"
    if args.resume:
        last, rmeta, extra = load_checkpoint(out / "resume.npz")
        best, _, _ = load_checkpoint(out / "checkpoint.npz")
        if rmeta.get("config_hash") != chash or rmeta.get("seed") != args.seed:
            raise IncompatibleCheckpoint("resume state was produced with a different config or seed")
        params, start = last, rmeta["iteration"]
        optimizer = SGD(train_cfg.momentum, train_cfg.weight_decay)
        optimizer.load_state({k[len("opt/"):]: v for k, v in extra.items() if k.startswith("opt/")})
        es = {"best_params": best, "best_loss": rmeta["best_loss"], "best_iter": rmeta["best_iter"]}
        fh = open(log_path, "a")
    else:
        fh = open(log_path, "w")
        fh.write(json.dumps({"event": "header", **stamp, "mode": args.mode, "train_config": _settings(train_cfg)},
                            sort_keys=True) + "\n")
    try:
        with fh:
            res = train(setup.train_pool, setup.net, params, train_cfg, args.seed, setup.dev_pool,
                        on_record=lambda r: fh.write(json.dumps(r, sort_keys=True) + "\n"),
                        optimizer=optimizer, start_iter=start, early_stop_state=es,
                        stop_after=args.stop_after)
    except (NonFiniteLoss, NonFiniteGradient) as e:
        log.error("training diverged: %s", e)
        return EXIT_NONFINITE

    best_loss = None if res.best_loss == float("inf") else res.best_loss
    save_checkpoint(out / "checkpoint.npz", res.params, {**meta, "iteration": res.best_iter, "best_loss": best_loss})
    save_checkpoint(
        out / "resume.npz",
        res.final_params,
        {**meta, "iteration": res.iterations, "best_iter": res.best_iter, "best_loss": best_loss},
        {f"opt/{k}": v for k, v in res.optimizer.state().items()},
    )
    _write_json(out / "run_manifest.json", {
        **stamp,
        "command": "train",
        "mode": args.mode,
        "manifest": str(manifest.path),
        "iterations": res.iterations,
        "best_iter": res.best_iter,
        "stopped_early": res.stopped_early,
        "K": train_cfg.K,
        "sampler_mode": train_cfg.mode,
    })
    print(f"trained {res.iterations} iterations, best dev loss {best_loss} at {res.best_iter}")
    return 0


def _parse_sizes(s: str) -> list[int]:
    try:
        sizes = [int(x) for x in s.split(",") if x]
    except ValueError:
        raise ConfigError(f"bad --sizes {s!r}") from None
    if not sizes or min(sizes) < 1:
        raise ConfigError(f"bad --sizes {s!r}")
    return sizes


def cmd_adapt_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    _, _, adapt_cfg = _configs(args)
    sizes = _parse_sizes(args.sizes)
    params, meta, _ = load_checkpoint(args.checkpoint)
    try:
        net = Network.from_meta(meta["network"])
    except (KeyError, TypeError) as e:
        raise IncompatibleCheckpoint(f"checkpoint metadata incomplete: {e}") from None
    _check_compatible(params, net)
    corpora = manifest.load_corpora()
    setup = prepare(manifest.registry, corpora, net.config)
    if not setup.target_test:
        raise ConfigError("manifest defines no target-domain test split")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(_settings(adapt_cfg), {"checkpoint": meta.get("config_hash"), "sizes": sizes})
    target = manifest.registry.target_domain
    reports = []
    for size in sizes:
        cfg = replace(adapt_cfg, target_size=size)
        rep = run_protocol(params, net, setup.target_train, setup.target_test, cfg, args.seed,
                           setup.target_tags, target=target, method=args.method, config_hash=chash)
        rep.manifest["checkpoint"] = {"config_hash": meta.get("config_hash"), "seed": meta.get("seed")}
        rep.write(out, f"report_{size}")
        reports.append(rep)
        m = rep.mean
        print(f"size {size}: P={m['precision']:.4f} R={m['recall']:.4f} F1={m['f1']:.4f} ({cfg.repeats} repeats)")
    write_table(out / "table_f1.csv", reports, "f1")
    write_table(out / "table_precision.csv", reports, "precision")
    write_table(out / "table_recall.csv", reports, "recall")
    return 0


def _check_compatible(params: ModelParams, net: Network):
    d = net.dims
    expect = {"embedding": (d.vocab_size, d.embed_dim), "fwd_U": (d.hidden_dim // 2, 2 * d.hidden_dim)}
    for k, shape in expect.items():
        if k not in params.theta or params.theta[k].shape != shape:
            raise IncompatibleCheckpoint(f"tensor theta/{k} does not match the stored network description")


def cmd_sample_tasks(args) -> int:
    manifest = load_manifest(args.manifest)
    corpora = manifest.load_corpora()
    setup = prepare(manifest.registry, corpora, ModelConfig())
    mode = MODES[args.mode]["mode"]
    cfg = SamplerConfig(K=args.k, mode=mode, seed=args.seed)
    tasks = sample_batch(setup.train_pool, cfg, args.m, RngKey(args.seed, (SAMPLE, args.iteration)))
    dump = {
        "seed": args.seed,
        "iteration": args.iteration,
        "K": args.k,
        "mode": mode,
        "version": __version__,
        "tasks": [
            {
                **t.manifest_entry(),
                "domain": manifest.registry.domains[t.domain_id],
                "support": [" ".join(f"{w}/{g}" for w, g in zip(s.tokens, s.tags)) for s in t.support],
                "query": [" ".join(f"{w}/{g}" for w, g in zip(s.tokens, s.tags)) for s in t.query],
            }
            for t in tasks
        ],
    }
    text = json.dumps(dump, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hgda", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stats", help="per-corpus statistics table")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", help="directory for corpus_stats.csv")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("synth", help="write a synthetic multi-domain corpus and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--domains", help="comma-separated domain names (last is the target)")
    s.add_argument("--target", help="target domain name; empty string for none")
    s.add_argument("--density", help="comma-separated entity densities, one per domain")
    s.add_argument("--n-train", dest="n_train", type=int)
    s.add_argument("--n-dev", dest="n_dev", type=int)
    s.add_argument("--n-test", dest="n_test", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="meta-train on the manifest's source domains")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=sorted(MODES), default="hgda")
    s.add_argument("--iters", type=int, help="override max_outer_iters")
    s.add_argument("--k", type=int)
    s.add_argument("--m", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--resume", action="store_true", help="continue from OUT/resume.npz")
    s.add_argument("--stop-after", dest="stop_after", type=int, help="halt at this iteration (resumable)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("adapt-eval", help="few-shot adaptation protocol on the target domain")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sizes", default="5,10,20,50")
    s.add_argument("--repeats", type=int)
    s.add_argument("--method", default="hgda", help="row label in the collated tables")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_adapt_eval)

    s = sub.add_parser("sample-tasks", help="dump sampled episodes as JSON")
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--iteration", type=int, default=0)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--m", type=int, default=4)
    s.add_argument("--mode", choices=sorted(MODES), default="hgda")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample_tasks)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except IncompatibleCheckpoint as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, EmptyManifest) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, NonFiniteGradient) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except HGDAError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
