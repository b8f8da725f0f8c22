"""Synthetic smoke corpus: embedding stores and a ready-to-run offline config.

The retrieval store holds random unit vectors keyed by image URI. The
copy-detection store uses the same URIs with planted near-duplicate clusters,
and the protected store contains planted near-copies of a few corpus images,
so every curation stage has something to do.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from pas.index import build_store, save_store
from pas.io import atomic_write, write_jsonl


def _unit(rng, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _near(rng, base: np.ndarray, noise: float) -> np.ndarray:
    v = base + noise * rng.standard_normal(base.shape) / np.sqrt(base.shape[-1])
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def smoke_uri(i: int) -> str:
    return f"mock://real/{i:05d}.jpg"


def make_smoke_corpus(out_dir, n_images: int = 5000, dim: int = 64, n_clusters: int = 150,
                      n_protected: int = 100, n_leaks: int = 30, text_rate: float = 0.1,
                      seed: int = 7) -> dict:
    """Write stores and a text-flag file under ``out_dir``; return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    uris = [smoke_uri(i) for i in range(n_images)]

    retrieval = _unit(rng, n_images, dim)
    save_store(build_store(uris, retrieval, "smoke-retrieval"), out / "images.emb")

    copy_vecs = _unit(rng, n_images, dim)
    members = rng.permutation(n_images)
    pos = 0
    for _ in range(n_clusters):
        size = int(rng.integers(2, 5))
        group = members[pos:pos + size]
        pos += size
        copy_vecs[group[1:]] = _near(rng, np.repeat(copy_vecs[group[:1]], size - 1, axis=0), 0.3)
    save_store(build_store(uris, copy_vecs, "smoke-copy"), out / "copy.emb")

    leaked = rng.choice(n_images, size=min(n_leaks, n_images), replace=False)
    protected = _unit(rng, n_protected, dim)
    protected[:len(leaked)] = _near(rng, copy_vecs[leaked], 0.5)
    save_store(build_store([f"test/{i:04d}" for i in range(n_protected)], protected, "smoke-copy"),
               out / "protected.emb")

    flagged = np.flatnonzero(rng.random(n_images) < text_rate)
    write_jsonl(out / "text_flags.jsonl",
                ({"uri": uris[i], "text_detected": True, "blurred_uri": uris[i] + "#blurred"} for i in flagged))
    return {"image_store": out / "images.emb", "copy_store": out / "copy.emb",
            "protected_store": out / "protected.emb", "text_flags": out / "text_flags.jsonl",
            "dim": dim, "leaked_uris": sorted(uris[i] for i in leaked)}


def smoke_config(corpus: dict, workspace, **overrides) -> dict:
    """An offline pipeline config over a corpus from ``make_smoke_corpus``."""

    def ep(kind: str, model: str) -> dict:
        return {"kind": kind, "model_name": model}

    cfg = {
        "domain": {"name": "garden birds", "description": "small birds seen in gardens"},
        "base_seed": 0,
        "offline": True,
        "offline_options": {"universe": 50, "dim": corpus["dim"]},
        "discovery": {"max_generation_rounds": 30, "max_expansion_rounds": 10},
        "acquisition": {"per_concept_real": 100, "n_cap": 2, "n_synth": 4},
        "dedup": {"lambda_dup": 0.6, "k": 64},
        "leak": {"threshold": 0.45, "k": 32},
        "curation": {},
        "providers": {
            "generator": ep("chat", "offline-generator"),
            "validator": ep("chat", "offline-validator"),
            "captioner": ep("chat", "offline-captioner"),
            "text_embed": ep("text_embed", "offline-text"),
            "image_embed": ep("image_embed", "offline-image"),
            "image_gen": ep("image_gen", "offline-gen"),
            "ood_prob": ep("ood_prob", "offline-ood"),
        },
        "paths": {
            "workspace": str(workspace),
            "image_store": str(corpus["image_store"]),
            "copy_store": str(corpus["copy_store"]),
            "protected_stores": [str(corpus["protected_store"])],
            "text_flags": str(corpus["text_flags"]),
        },
    }
    cfg.update(overrides)
    return cfg


def write_smoke_fixture(out_dir, **corpus_options) -> Path:
    """Corpus plus ``config.json`` in ``out_dir``; returns the config path."""
    out = Path(out_dir).resolve()
    corpus = make_smoke_corpus(out / "corpus", **corpus_options)
    cfg = smoke_config(corpus, out / "workspace")
    path = out / "config.json"
    atomic_write(path, json.dumps(cfg, indent=2) + "\n")
    return path
