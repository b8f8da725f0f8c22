"""Command-line entry point: ``pas <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 stage error, 4 corruption.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from pas import __version__
from pas.errors import ConfigError, CorruptionError, FormatError, IntegrityError, PasError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_CORRUPT = 0, 2, 3, 4

log = logging.getLogger("pas")


# -- shared helpers -------------------------------------------------------------

def _offline_defaults() -> dict:
    return {
        "generator": {"kind": "chat", "model_name": "offline-generator"},
        "validator": {"kind": "chat", "model_name": "offline-validator"},
        "captioner": {"kind": "chat", "model_name": "offline-captioner"},
        "text_embed": {"kind": "text_embed", "model_name": "offline-text"},
        "image_embed": {"kind": "image_embed", "model_name": "offline-image"},
        "image_gen": {"kind": "image_gen", "model_name": "offline-gen"},
        "ood_prob": {"kind": "ood_prob", "model_name": "offline-ood"},
    }


def _context(args, domain: tuple[str, str] | None = None):
    """(config, providers) for single-stage commands.

    Without ``--config`` the command runs offline against mock providers.
    """
    from pas.pipeline import _Providers, config_from_dict

    offline = True if getattr(args, "offline", False) else None
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
        base = path.parent.resolve()
    else:
        raw = {"offline": True, "providers": _offline_defaults()}
        base = Path.cwd()
    raw = dict(raw)
    if domain is not None:
        raw["domain"] = {"name": domain[0], "description": domain[1]}
    raw.setdefault("domain", {"name": "unspecified", "description": "unspecified"})
    seed = getattr(args, "seed", None)
    cfg, errors = config_from_dict(raw, base, offline=offline, seed=seed)
    if cfg is not None:
        errors += cfg.discovery.violations() + cfg.acquisition.violations()
    if errors:
        raise ConfigError(errors)
    return cfg, _Providers(cfg, None)


def _replace(obj, **changes):
    from dataclasses import replace
    return replace(obj, **{k: v for k, v in changes.items() if v is not None})


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- concepts ------------------------------------------------------------------------

def cmd_concepts(args) -> int:
    from pas.concepts import (expand_concepts, generate_initial_concepts, load_bank, save_bank,
                              validate_concepts)
    cfg, providers = _context(args, (args.domain_name, args.domain_desc))
    if args.action == "generate":
        bank = generate_initial_concepts(cfg.domain, providers["generator"], cfg.discovery)
    else:
        if not args.input:
            raise ConfigError([f"concepts {args.action} needs --in"])
        bank = load_bank(args.input, cfg.domain)
        if args.action == "expand":
            bank = expand_concepts(bank, providers["generator"], cfg.discovery)
        else:
            bank = validate_concepts(bank, providers["validator"], cfg.discovery)
    save_bank(bank, args.out)
    _print_json({"concepts": len(bank.concepts), "accepted": len(bank.accepted()), "phase": bank.phase})
    return EXIT_OK


# -- index ----------------------------------------------------------------------------

def _read_ids(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def cmd_index(args) -> int:
    from pas.index import build_store, load_store, save_store, top_k
    if args.action == "build":
        vectors = np.load(args.vectors) if str(args.vectors).endswith(".npy") else np.loadtxt(args.vectors, ndmin=2)
        store = build_store(_read_ids(args.ids), vectors, args.model_tag)
        save_store(store, args.out)
        _print_json({"count": len(store), "dim": store.dim, "model_tag": store.model_tag})
        return EXIT_OK
    store = load_store(args.store)
    if args.id is not None:
        queries = [(args.id, store.vector(args.id), args.id)]
    elif args.vector is not None:
        v = np.array([float(x) for x in args.vector.split(",")])
        queries = [("query", v, None)]
    else:
        queries = [(f"query{i}", np.array([float(x) for x in line.split(",")]), None)
                   for i, line in enumerate(sys.stdin) if line.strip()]
    for name, v, exclude in queries:
        nl = top_k(store, v, args.k, exclude=exclude)
        _print_json({"query": name, "neighbors": [[i, s] for i, s in nl.neighbors]})
    return EXIT_OK


# -- acquisition ------------------------------------------------------------------------

def _accepted(path):
    from pas.concepts import ACCEPTED, PENDING, load_bank
    bank = load_bank(path)
    if any(c.validated == ACCEPTED for c in bank.concepts):
        return bank.accepted(), bank.domain
    return [c for c in bank.concepts if c.validated == PENDING], bank.domain


def cmd_retrieve(args) -> int:
    from pas.acquisition import retrieve_all
    from pas.index import load_store
    from pas.records import save_records
    cfg, providers = _context(args)
    concepts, _ = _accepted(args.concepts)
    store = load_store(args.store)
    cfg.offline_options.setdefault("dim", store.dim)  # mock text embeddings must match the store
    records = retrieve_all(concepts, providers["text_embed"], store,
                           _replace(cfg.acquisition, per_concept_real=args.per_concept))
    save_records(args.out, records)
    _print_json({"records": len(records)})
    return EXIT_OK


def cmd_captions(args) -> int:
    from pas.acquisition import generate_all_captions, save_caption_sets
    cfg, providers = _context(args)
    concepts, domain = _accepted(args.concepts)
    sets = generate_all_captions(concepts, providers["captioner"], _replace(cfg.acquisition, n_cap=args.n_cap),
                                 domain)
    save_caption_sets(args.out, sets)
    _print_json({"caption_sets": len(sets), "captions": sum(len(s.captions) for s in sets)})
    return EXIT_OK


def cmd_synth(args) -> int:
    from pas.acquisition import load_caption_sets, synthesize_all
    from pas.records import save_records
    cfg, providers = _context(args)
    records = synthesize_all(load_caption_sets(args.captions), providers["image_gen"],
                             _replace(cfg.acquisition, n_synth=args.n_synth))
    save_records(args.out, records)
    _print_json({"records": len(records)})
    return EXIT_OK


def cmd_merge(args) -> int:
    from pas.acquisition import merge_pools
    from pas.records import load_records, save_records
    pool = merge_pools(load_records(args.real), load_records(args.synth))
    save_records(args.out, pool)
    _print_json({"records": len(pool)})
    return EXIT_OK


# -- curation -----------------------------------------------------------------------------

def cmd_curate(args) -> int:
    from pas import curation
    from pas.index import build_store, load_store
    from pas.records import load_records, save_records

    records = load_records(args.input)
    if args.action in ("dedup", "leak"):
        if not args.copy_store:
            raise ConfigError([f"curate {args.action} needs --copy-store"])
        from pas.pipeline import record_copy_store
        copy_store = record_copy_store(records, load_store(args.copy_store))
        if args.action == "dedup":
            cfg = curation.DedupConfig(args.lambda_dup, args.k or 64, args.seed or 0)
            result = curation.dedup(records, copy_store, cfg)
            summary = {"kept": len(result.kept), "removed": len(result.removed),
                       "component_sizes": curation.component_size_histogram(result.component_map)}
        else:
            stores = [load_store(p) for p in args.protected]
            protected = None
            if stores:
                ids = [f"{n}:{i}" for n, s in enumerate(stores) for i in s.ids]
                protected = build_store(ids, np.concatenate([s.vectors for s in stores]), stores[0].model_tag)
            result = curation.leak_filter(records, copy_store, protected,
                                          curation.LeakFilterConfig(args.leak_threshold, args.k or 32))
            summary = {"kept": len(result.kept), "removed": len(result.removed)}
        save_records(args.out, result.kept)
        _print_json(summary)
        return EXIT_OK

    if args.action == "score":
        from pas.concepts import generate_general_concepts
        from pas.gateway import ood_probabilities
        from pas.io import read_jsonl, write_jsonl
        if not args.concepts:
            raise ConfigError(["curate score needs --concepts"])
        cfg, providers = _context(args)
        concepts, domain = _accepted(args.concepts)
        bank = [c.text for c in concepts]
        if args.general_concepts:
            general = json.loads(Path(args.general_concepts).read_text(encoding="utf-8"))
        elif cfg.curation.general_concepts is not None:
            general = cfg.curation.general_concepts
        else:
            general = generate_general_concepts(domain, providers["generator"], cfg.discovery)
        flags = {}
        if args.text_flags:
            flags = {r["uri"]: r["blurred_uri"] for r in read_jsonl(args.text_flags)
                     if r.get("text_detected", True) and r.get("blurred_uri")}
        ood = providers["ood_prob"]
        uris = [r.uri for r in records]
        rows_b = ood_probabilities(ood, uris, bank) if uris else []
        rows_g = ood_probabilities(ood, uris, general) if uris else []
        flagged = [u for u in uris if u in flags]
        blurred = dict(zip(flagged, ood_probabilities(ood, [flags[u] for u in flagged], bank))) if flagged else {}
        triples = [curation.ood_triple(r.id, b, g, blurred.get(r.uri)) for r, b, g in zip(records, rows_b, rows_g)]
        assignment = curation.peel_fronts(triples)
        write_jsonl(args.out, ({"image_id": t.image_id, "ood_primary": t.ood_primary,
                                "ood_general": t.ood_general, "ood_text_delta": t.ood_text_delta,
                                "front": assignment.front_of[t.image_id]} for t in triples))
        _print_json({"scored": len(triples), "fronts": len(assignment.fronts)})
        return EXIT_OK

    from pas.pipeline import load_scores
    if not args.scores:
        raise ConfigError(["curate prune needs --scores"])
    triples, assignment = load_scores(args.scores)
    if args.target_size is not None:
        kept = curation.prune_to_size(assignment, records, args.target_size, triples)
        summary = {"mode": "target_size", "kept": len(kept)}
    else:
        halt = curation.select_halt(assignment, triples, args.sensitivity)
        kept = curation.prune_through_front(assignment, records, halt.front)
        summary = {"mode": "kneedle", "kept": len(kept), "halt_front": halt.front, "knees": halt.knees,
                   "warning": halt.warning}
    save_records(args.out, kept)
    _print_json(summary)
    return EXIT_OK


def cmd_fetch(args) -> int:
    from pas.fetch import fetch_manifest
    from pas.records import load_records
    summary = fetch_manifest(load_records(args.manifest), args.out, workers=args.workers,
                             offline=True if args.offline else None)
    _print_json(summary.to_json())
    return EXIT_OK if not summary.failed else EXIT_STAGE


# -- run / smoke -------------------------------------------------------------------------------

def cmd_run(args) -> int:
    from pas.pipeline import load_config, run_pipeline
    cfg = load_config(args.config, offline=True if args.offline else None, seed=args.seed,
                      target_size=args.target_size)
    manifest = run_pipeline(cfg, resume=args.resume)
    report = manifest.report
    _print_json({"retained": len(manifest.records), "removed": report.removed(),
                 "halt_front": report.halt_front, "warnings": report.warnings,
                 "workspace": str(cfg.paths.workspace)})
    return EXIT_OK


def cmd_smoke(args) -> int:
    from pas.synthetic import write_smoke_fixture
    path = write_smoke_fixture(args.out, n_images=args.n_images, seed=args.seed)
    _print_json({"config": str(path)})
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pas", description="Domain-specific image dataset construction.")
    p.add_argument("--version", action="version", version=f"pas {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def provider_opts(sp):
        sp.add_argument("--config", help="pipeline config JSON supplying provider endpoints")
        sp.add_argument("--offline", action="store_true", help="use mock providers")
        sp.add_argument("--seed", type=int, default=None, help="base seed")

    c = sub.add_parser("concepts", help="concept bank discovery")
    c.add_argument("action", choices=("generate", "expand", "validate"))
    c.add_argument("--domain-name", required=True)
    c.add_argument("--domain-desc", required=True)
    c.add_argument("--in", dest="input", help="input bank (expand, validate)")
    c.add_argument("--out", required=True)
    provider_opts(c)
    c.set_defaults(func=cmd_concepts)

    ix = sub.add_parser("index", help="embedding stores")
    ix.add_argument("action", choices=("build", "query"))
    ix.add_argument("--ids")
    ix.add_argument("--vectors", help=".npy matrix or whitespace-separated text rows")
    ix.add_argument("--model-tag", default="unspecified")
    ix.add_argument("--out")
    ix.add_argument("--store")
    ix.add_argument("--k", type=int, default=10)
    ix.add_argument("--id", help="query with a stored row (itself excluded)")
    ix.add_argument("--vector", help="comma-separated query vector; default reads rows from stdin")
    ix.set_defaults(func=cmd_index)

    r = sub.add_parser("retrieve", help="real images by concept retrieval")
    r.add_argument("--concepts", required=True)
    r.add_argument("--store", required=True)
    r.add_argument("--per-concept", type=int, default=500)
    r.add_argument("--out", required=True)
    provider_opts(r)
    r.set_defaults(func=cmd_retrieve)

    cp = sub.add_parser("captions", help="caption sampling")
    cp.add_argument("--concepts", required=True)
    cp.add_argument("--n-cap", type=int, default=None)
    cp.add_argument("--out", required=True)
    provider_opts(cp)
    cp.set_defaults(func=cmd_captions)

    sy = sub.add_parser("synth", help="synthetic image generation")
    sy.add_argument("--captions", required=True)
    sy.add_argument("--n-synth", type=int, default=None)
    sy.add_argument("--out", required=True)
    provider_opts(sy)
    sy.set_defaults(func=cmd_synth)

    m = sub.add_parser("merge", help="merge real and synthetic pools")
    m.add_argument("--real", required=True)
    m.add_argument("--synth", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    cu = sub.add_parser("curate", help="dedup, leak filter, scoring, pruning")
    cu.add_argument("action", choices=("dedup", "leak", "score", "prune"))
    cu.add_argument("--in", dest="input", required=True)
    cu.add_argument("--out", required=True)
    cu.add_argument("--copy-store")
    cu.add_argument("--protected", action="append", default=[])
    cu.add_argument("--lambda-dup", type=float, default=0.6)
    cu.add_argument("--leak-threshold", type=float, default=0.45)
    cu.add_argument("--k", type=int, default=None)
    cu.add_argument("--concepts")
    cu.add_argument("--general-concepts", help="JSON list of general concepts")
    cu.add_argument("--text-flags")
    cu.add_argument("--scores")
    cu.add_argument("--target-size", type=int, default=None)
    cu.add_argument("--sensitivity", type=float, default=1.0)
    provider_opts(cu)
    cu.set_defaults(func=cmd_curate)

    rn = sub.add_parser("run", help="run the whole pipeline")
    rn.add_argument("--config", required=True)
    rn.add_argument("--resume", action="store_true")
    rn.add_argument("--offline", action="store_true")
    rn.add_argument("--target-size", type=int, default=None)
    rn.add_argument("--seed", type=int, default=None)
    rn.set_defaults(func=cmd_run)

    fe = sub.add_parser("fetch", help="download manifest images into a directory")
    fe.add_argument("--manifest", required=True)
    fe.add_argument("--out", required=True)
    fe.add_argument("--workers", type=int, default=8)
    fe.add_argument("--offline", action="store_true", help="refuse network downloads")
    fe.set_defaults(func=cmd_fetch)

    sm = sub.add_parser("smoke", help="write a synthetic offline fixture and config")
    sm.add_argument("--out", required=True)
    sm.add_argument("--n-images", type=int, default=5000)
    sm.add_argument("--seed", type=int, default=7)
    sm.set_defaults(func=cmd_smoke)
    return p


def main(argv=None) -> int:
    level = os.environ.get("PAS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorruptionError, FormatError, IntegrityError) as exc:
        print(f"corruption: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (PasError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
