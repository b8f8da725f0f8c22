"""End-to-end orchestration with content-addressed checkpoints.

A workspace holds one file set per stage plus ``checkpoints.json``. A stage
is marked done only after its outputs are written (atomically) and their
SHA-256 digests recorded; ``resume`` re-verifies every digest and continues
from the first pending stage.
"""
from __future__ import annotations

import copy
import fcntl
import json
import logging
import os
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from pas import __version__
from pas.acquisition import (AcquisitionConfig, collapse_links, generate_all_captions, load_caption_sets, merge_pools,
                             retrieve_all, save_caption_sets, synthesize_all)
from pas.concepts import (ConceptBank, DiscoveryConfig, DomainSpec, expand_concepts, generate_general_concepts,
                          generate_initial_concepts, load_bank, save_bank, validate_concepts)
from pas.curation import (CurationReport, DedupConfig, LeakFilterConfig, OODTriple, ParetoAssignment,
                          component_size_histogram, dedup, leak_filter, ood_triple, peel_fronts, prune_through_front,
                          prune_to_size, select_halt)
from pas.errors import ConfigError, CorruptionError, DomainError, IntegrityError, PasError, StageError
from pas.gateway import ProviderEndpoint, embed_batch, make_provider, offline_mode, ood_probabilities
from pas.index import EmbeddingStore, build_store, load_store, save_store
from pas.io import atomic_write, dumps, file_digest, read_jsonl, write_jsonl
from pas.records import ImageRecord, load_records, save_records

log = logging.getLogger(__name__)

STAGES = ("concepts", "expand", "validate", "retrieve", "captions", "synth", "merge",
          "dedup", "leak", "score", "prune", "manifest")
ROLES = {
    "generator": "chat",
    "validator": "chat",
    "captioner": "chat",
    "text_embed": "text_embed",
    "image_embed": "image_embed",
    "image_gen": "image_gen",
    "ood_prob": "ood_prob",
}
CHECKPOINTS = "checkpoints.json"
RUN_CONFIG = "run_config.json"


class WorkspaceLocked(StageError):
    pass


class Interrupted(Exception):
    """Raised by test hooks to simulate a crash at a stage boundary."""


# -- configuration ------------------------------------------------------------

@dataclass
class Paths:
    workspace: Path
    image_store: Path | None = None
    copy_store: Path | None = None
    protected_stores: list[Path] = field(default_factory=list)
    text_flags: Path | None = None


@dataclass
class CurationSettings:
    kneedle_sensitivity: float = 1.0
    general_concepts: list[str] | None = None
    ood_batch_size: int = 100
    embed_batch_size: int = 64


@dataclass
class PipelineConfig:
    domain: DomainSpec
    discovery: DiscoveryConfig
    acquisition: AcquisitionConfig
    dedup: DedupConfig
    leak: LeakFilterConfig
    providers: dict[str, ProviderEndpoint]
    paths: Paths
    curation: CurationSettings = field(default_factory=CurationSettings)
    target_size: int | None = None
    base_seed: int = 0
    synthetic: bool = True
    offline: bool = False
    offline_options: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    def stage_roles(self) -> dict[str, list[str]]:
        need = {"concepts": ["generator"], "expand": ["generator"], "validate": ["validator"],
                "dedup": [], "score": ["ood_prob"]}
        if self.paths.image_store is not None:
            need["retrieve"] = ["text_embed"]
        if self.synthetic:
            need["captions"] = ["captioner"]
            need["synth"] = ["image_gen"]
            need["dedup"].append("image_embed")
        if self.paths.copy_store is None:
            need["dedup"] = sorted(set(need["dedup"]) | {"image_embed"})
        if self.curation.general_concepts is None:
            need["score"].append("generator")
        return need

    def snapshot(self) -> dict:
        """The configuration as written (env references kept, literal tokens
        redacted) with seed, size and paths resolved."""
        snap = copy.deepcopy(self.raw)
        for ep in snap.get("providers", {}).values():
            if isinstance(ep, dict) and ep.get("auth_token") and "${" not in str(ep["auth_token"]):
                ep["auth_token"] = "***"
        snap["base_seed"] = self.base_seed
        snap["target_size"] = self.target_size
        snap["offline"] = self.offline
        snap["paths"] = {
            "workspace": str(self.paths.workspace),
            "image_store": str(self.paths.image_store) if self.paths.image_store else None,
            "copy_store": str(self.paths.copy_store) if self.paths.copy_store else None,
            "protected_stores": [str(p) for p in self.paths.protected_stores],
            "text_flags": str(self.paths.text_flags) if self.paths.text_flags else None,
        }
        return snap


_ENV = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _interpolate(obj, missing: list[str]):
    if isinstance(obj, str):
        def sub(m):
            if m.group(1) not in os.environ:
                missing.append(m.group(1))
                return ""
            return os.environ[m.group(1)]
        return _ENV.sub(sub, obj)
    if isinstance(obj, list):
        return [_interpolate(v, missing) for v in obj]
    if isinstance(obj, dict):
        return {k: _interpolate(v, missing) for k, v in obj.items()}
    return obj


def _section(raw: dict, name: str, cls, errors: list[str], **extra):
    data = dict(raw.get(name) or {})
    data.update(extra)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        errors.append(f"{name}: {exc}")
        return None


def config_from_dict(raw: dict, base_dir: Path | None = None, *, offline: bool | None = None,
                     seed: int | None = None, target_size: int | None = None) -> tuple[PipelineConfig | None, list[str]]:
    errors: list[str] = []
    missing: list[str] = []
    original = copy.deepcopy(raw)
    raw = _interpolate(copy.deepcopy(raw), missing)
    errors += [f"environment variable {m} is not set" for m in sorted(set(missing))]
    base_dir = base_dir or Path.cwd()

    def path(p):
        if p in (None, ""):
            return None
        p = Path(p)
        return p if p.is_absolute() else (base_dir / p)

    base_seed = int(seed if seed is not None else raw.get("base_seed", 0))
    dom = raw.get("domain") or {}
    domain = None
    try:
        domain = DomainSpec(str(dom.get("name", "")), str(dom.get("description", "")))
    except DomainError as exc:
        errors.append(f"domain: {exc}")
    disc_raw = dict(raw.get("discovery") or {})
    if "prompt_templates" in disc_raw:
        from pas.concepts import DEFAULT_TEMPLATES
        disc_raw["prompt_templates"] = {**DEFAULT_TEMPLATES, **disc_raw["prompt_templates"]}
    discovery = _section({"discovery": disc_raw}, "discovery", DiscoveryConfig, errors, base_seed=base_seed)
    acquisition = _section(raw, "acquisition", AcquisitionConfig, errors, base_seed=base_seed)
    dedup_cfg = _section(raw, "dedup", DedupConfig, errors, rng_seed=base_seed)
    leak_cfg = _section(raw, "leak", LeakFilterConfig, errors)
    curation = _section(raw, "curation", CurationSettings, errors)
    providers: dict[str, ProviderEndpoint] = {}
    for role, ep in (raw.get("providers") or {}).items():
        try:
            providers[role] = ProviderEndpoint.from_json(ep)
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"providers.{role}: {exc}")
    p = raw.get("paths") or {}
    paths = Paths(
        workspace=path(p.get("workspace")) or base_dir / "workspace",
        image_store=path(p.get("image_store")),
        copy_store=path(p.get("copy_store")),
        protected_stores=[path(x) for x in p.get("protected_stores", [])],
        text_flags=path(p.get("text_flags")),
    )
    if target_size is None:
        target_size = raw.get("target_size")
    if offline is None:
        offline = bool(raw.get("offline", False)) or offline_mode()
    if None in (domain, discovery, acquisition, dedup_cfg, leak_cfg, curation):
        return None, errors
    cfg = PipelineConfig(domain, discovery, acquisition, dedup_cfg, leak_cfg, providers, paths, curation,
                         target_size, base_seed, bool(raw.get("synthetic", True)), offline,
                         dict(raw.get("offline_options") or {}), original)
    return cfg, errors


def validate_config(config: PipelineConfig, check_paths: bool = True) -> list[str]:
    """Every violation found, never just the first."""
    out: list[str] = []
    out += config.discovery.violations()
    out += config.acquisition.violations()
    if config.target_size is not None and config.target_size < 1:
        out.append("target_size must be a positive integer")
    if config.curation.kneedle_sensitivity <= 0:
        out.append("curation.kneedle_sensitivity must be > 0")
    if config.curation.ood_batch_size < 1 or config.curation.embed_batch_size < 1:
        out.append("curation batch sizes must be >= 1")
    for role, ep in config.providers.items():
        if role not in ROLES:
            out.append(f"providers: unknown role {role!r}")
            continue
        out += ep.violations(f"providers.{role}")
        if ep.kind != ROLES[role]:
            out.append(f"providers.{role}: kind {ep.kind!r}, expected {ROLES[role]!r}")
        if not config.offline and not ep.base_url:
            out.append(f"providers.{role}: base_url required unless offline")
    for stage, roles in config.stage_roles().items():
        for role in roles:
            if role not in config.providers:
                out.append(f"stage {stage} needs a {ROLES[role]} endpoint (providers.{role}) but none is configured")
    gen, val = config.providers.get("generator"), config.providers.get("validator")
    if gen and val and gen.model_name == val.model_name:
        out.append("providers.validator must use a different model than providers.generator")
    if config.paths.image_store is None and not config.synthetic:
        out.append("nothing to acquire: no paths.image_store and synthetic disabled")
    if check_paths:
        for name in ("image_store", "copy_store", "text_flags"):
            p = getattr(config.paths, name)
            if p is not None and not p.exists():
                out.append(f"paths.{name}: {p} does not exist")
        for p in config.paths.protected_stores:
            if not p.exists():
                out.append(f"paths.protected_stores: {p} does not exist")
    return out


def load_config(path, *, offline: bool | None = None, seed: int | None = None,
                target_size: int | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    cfg, errors = config_from_dict(raw, path.parent.resolve(), offline=offline, seed=seed, target_size=target_size)
    if cfg is not None:
        errors += validate_config(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


# -- workspace bookkeeping ------------------------------------------------------

class Workspace:
    def __init__(self, root: Path):
        self.root = Path(root)
        self._lock_fh = None

    def path(self, name: str) -> Path:
        return self.root / name

    def lock(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        fh = open(self.root / ".lock", "a+")
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError as exc:
            fh.close()
            raise WorkspaceLocked(f"workspace {self.root} is in use by another run") from exc
        self._lock_fh = fh

    def unlock(self) -> None:
        if self._lock_fh is not None:
            fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None

    def checkpoints(self) -> dict:
        p = self.path(CHECKPOINTS)
        if not p.exists():
            return {}
        try:
            return json.loads(p.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise CorruptionError(f"{p}: unreadable checkpoint file") from exc

    def _digest(self, files: list[str]) -> str:
        import hashlib
        h = hashlib.sha256()
        for name in files:
            p = self.path(name)
            if not p.exists():
                raise CorruptionError(f"missing stage output {name}")
            h.update(name.encode() + b"\0" + file_digest(p).encode() + b"\n")
        return h.hexdigest()

    def mark_done(self, stage: str, files: list[str]) -> None:
        cps = self.checkpoints()
        cps[stage] = {"status": "done", "files": files, "digest": self._digest(files)}
        atomic_write(self.path(CHECKPOINTS), json.dumps(cps, indent=1, sort_keys=True))

    def verify(self, stage: str) -> None:
        entry = self.checkpoints()[stage]
        try:
            digest = self._digest(entry["files"])
        except CorruptionError as exc:
            raise CorruptionError(f"stage {stage}: {exc}") from exc
        if digest != entry["digest"]:
            raise CorruptionError(f"stage {stage}: output digest mismatch (files changed since checkpoint)")

    def done(self, stage: str) -> bool:
        return self.checkpoints().get(stage, {}).get("status") == "done"

    def reset(self) -> None:
        p = self.path(CHECKPOINTS)
        if p.exists():
            p.unlink()


# -- the run ------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    report: CurationReport
    config: dict
    engine_version: str
    created_at: str


class _Providers:
    """Lazily constructed providers, so a no-op resume touches nothing."""

    def __init__(self, config: PipelineConfig, overrides: Mapping | None):
        self.config = config
        self.overrides = dict(overrides or {})
        self.cache: dict = {}

    def __getitem__(self, role: str):
        if role in self.overrides:
            return self.overrides[role]
        if role not in self.cache:
            if role not in self.config.providers:
                raise StageError(f"no provider configured for role {role!r}")
            ep = self.config.providers[role]
            opts = {}
            if self.config.offline:
                if ep.kind == "chat" and "universe" in self.config.offline_options:
                    opts["universe"] = int(self.config.offline_options["universe"])
                if ep.kind in ("text_embed", "image_embed") and "dim" in self.config.offline_options:
                    opts["dim"] = int(self.config.offline_options["dim"])
            self.cache[role] = make_provider(ep, offline=self.config.offline, **opts)
        return self.cache[role]


class Runner:
    def __init__(self, config: PipelineConfig, providers: Mapping | None = None,
                 hook: Callable[[str, str], None] | None = None):
        self.config = config
        self.ws = Workspace(config.paths.workspace)
        self.providers = _Providers(config, providers)
        self.hook = hook or (lambda stage, phase: None)

    # stage outputs; the first file is the stage's primary artifact
    OUTPUTS = {
        "concepts": ["concepts_initial.jsonl", "concepts_initial.jsonl.meta.json"],
        "expand": ["concepts_expanded.jsonl", "concepts_expanded.jsonl.meta.json"],
        "validate": ["concepts.jsonl", "concepts.jsonl.meta.json"],
        "retrieve": ["real.jsonl", "retrieve_stats.json"],
        "captions": ["captions.jsonl"],
        "synth": ["synth.jsonl"],
        "merge": ["pool.jsonl"],
        "dedup": ["dedup.jsonl", "dedup_stats.json", "copy.emb", "copy.emb.ids", "copy.emb.meta.json"],
        "leak": ["leak.jsonl", "leak_stats.json"],
        "score": ["scores.jsonl", "general_concepts.json"],
        "prune": ["retained.jsonl", "prune.json"],
        "manifest": ["manifest.jsonl", "report.json", "config.lock.json"],
    }

    def run(self, resume: bool = False) -> DatasetManifest:
        self.ws.lock()
        try:
            self._prepare(resume)
            for stage in STAGES:
                if resume and self.ws.done(stage):
                    continue
                resume = False  # everything after the first pending stage is recomputed
                self.hook(stage, "start")
                try:
                    getattr(self, f"_stage_{stage}")()
                except (PasError, OSError) as exc:
                    if isinstance(exc, (CorruptionError, StageError)):
                        raise
                    raise StageError(f"stage {stage} failed: {exc}") from exc
                self.hook(stage, "written")
                self.ws.mark_done(stage, self.OUTPUTS[stage])
                self.hook(stage, "done")
            return load_manifest(self.ws.root)
        finally:
            self.ws.unlock()

    def _prepare(self, resume: bool) -> None:
        snap = self.config.snapshot()
        snap_path = self.ws.path(RUN_CONFIG)
        if resume:
            if snap_path.exists():
                prior = json.loads(snap_path.read_text(encoding="utf-8"))
                if prior != json.loads(dumps(snap)):
                    raise ConfigError(["workspace was created with a different configuration; "
                                       "run without --resume to start over"])
            for stage in STAGES:
                if self.ws.done(stage):
                    self.ws.verify(stage)
            if not snap_path.exists():
                atomic_write(snap_path, dumps(snap))
        else:
            self.ws.reset()
            atomic_write(snap_path, dumps(snap))

    # -- stages --------------------------------------------------------------------

    def _bank(self, name: str) -> ConceptBank:
        return load_bank(self.ws.path(name), self.config.domain)

    def _stage_concepts(self):
        bank = generate_initial_concepts(self.config.domain, self.providers["generator"], self.config.discovery)
        save_bank(bank, self.ws.path("concepts_initial.jsonl"))

    def _stage_expand(self):
        bank = expand_concepts(self._bank("concepts_initial.jsonl"), self.providers["generator"],
                               self.config.discovery)
        save_bank(bank, self.ws.path("concepts_expanded.jsonl"))

    def _stage_validate(self):
        bank = validate_concepts(self._bank("concepts_expanded.jsonl"), self.providers["validator"],
                                 self.config.discovery)
        if not bank.accepted():
            raise StageError("validation rejected every concept")
        save_bank(bank, self.ws.path("concepts.jsonl"))

    def _accepted(self):
        return self._bank("concepts.jsonl").accepted()

    def _stage_retrieve(self):
        links: list[ImageRecord] = []
        if self.config.paths.image_store is not None:
            store = load_store(self.config.paths.image_store)
            links = retrieve_all(self._accepted(), self.providers["text_embed"], store, self.config.acquisition,
                                 collapse=False)
        records = collapse_links(links)
        save_records(self.ws.path("real.jsonl"), records)
        atomic_write(self.ws.path("retrieve_stats.json"),
                     dumps({"links": len(links), "collapsed": len(links) - len(records)}))

    def _stage_captions(self):
        sets = []
        if self.config.synthetic:
            sets = generate_all_captions(self._accepted(), self.providers["captioner"], self.config.acquisition,
                                         self.config.domain)
        save_caption_sets(self.ws.path("captions.jsonl"), sets)

    def _stage_synth(self):
        records: list[ImageRecord] = []
        if self.config.synthetic:
            sets = load_caption_sets(self.ws.path("captions.jsonl"))
            records = synthesize_all(sets, self.providers["image_gen"], self.config.acquisition)
        save_records(self.ws.path("synth.jsonl"), records)

    def _stage_merge(self):
        pool = merge_pools(load_records(self.ws.path("real.jsonl")), load_records(self.ws.path("synth.jsonl")))
        save_records(self.ws.path("pool.jsonl"), pool)

    def _copy_store(self, records: list[ImageRecord]) -> EmbeddingStore:
        pre = load_store(self.config.paths.copy_store) if self.config.paths.copy_store else None
        needs_embedder = pre is None or any(r.uri not in pre for r in records)
        embedder = self.providers["image_embed"] if needs_embedder else None
        return record_copy_store(records, pre, embedder, self.config.curation.embed_batch_size)

    def _stage_dedup(self):
        pool = load_records(self.ws.path("pool.jsonl"))
        store = self._copy_store(pool) if pool else build_store([], np.zeros((0, 1)), "copy")
        embedded = [r for r in pool if r.id in store]
        result = dedup(embedded, store, self.config.dedup)
        save_store(store, self.ws.path("copy.emb"))
        save_records(self.ws.path("dedup.jsonl"), result.kept)
        stats = {"unembedded": len(pool) - len(embedded),
                 "component_sizes": {str(k): v for k, v in component_size_histogram(result.component_map).items()}}
        atomic_write(self.ws.path("dedup_stats.json"), dumps(stats))

    def _stage_leak(self):
        records = load_records(self.ws.path("dedup.jsonl"))
        stores = [load_store(p) for p in self.config.paths.protected_stores]
        protected = None
        if stores:
            ids = [f"{n}:{i}" for n, s in enumerate(stores) for i in s.ids]
            protected = build_store(ids, np.concatenate([s.vectors for s in stores]), stores[0].model_tag)
        warnings = []
        if protected is None or len(protected) == 0:
            warnings.append("no protected test-set embeddings; leak filter skipped")
        result = leak_filter(records, load_store(self.ws.path("copy.emb")), protected, self.config.leak)
        save_records(self.ws.path("leak.jsonl"), result.kept)
        atomic_write(self.ws.path("leak_stats.json"), dumps({"removed": len(result.removed), "warnings": warnings}))

    def _text_flags(self) -> dict[str, str]:
        if self.config.paths.text_flags is None:
            return {}
        flags = {}
        for row in read_jsonl(self.config.paths.text_flags):
            if row.get("text_detected", True) and row.get("blurred_uri"):
                flags[row["uri"]] = row["blurred_uri"]
        return flags

    def _stage_score(self):
        records = load_records(self.ws.path("leak.jsonl"))
        bank = [c.text for c in self._accepted()]
        general = self.config.curation.general_concepts
        if general is None:
            general = generate_general_concepts(self.config.domain, self.providers["generator"],
                                                self.config.discovery)
        rows: list[dict] = []
        if records:
            ood = self.providers["ood_prob"]
            bs = self.config.curation.ood_batch_size
            uris = [r.uri for r in records]
            bank_rows = ood_probabilities(ood, uris, bank, bs)
            general_rows = ood_probabilities(ood, uris, general, bs)
            flags = self._text_flags()
            flagged = [u for u in uris if u in flags]
            blurred = {}
            if flagged:
                got = ood_probabilities(ood, [flags[u] for u in flagged], bank, bs)
                blurred = dict(zip(flagged, got))
            triples = [ood_triple(r.id, b, g, blurred.get(r.uri))
                       for r, b, g in zip(records, bank_rows, general_rows)]
            assignment = peel_fronts(triples)
            rows = [{"image_id": t.image_id, "ood_primary": t.ood_primary, "ood_general": t.ood_general,
                     "ood_text_delta": t.ood_text_delta, "front": assignment.front_of[t.image_id]}
                    for t in triples]
        write_jsonl(self.ws.path("scores.jsonl"), rows)
        atomic_write(self.ws.path("general_concepts.json"), dumps(list(general)))

    def _stage_prune(self):
        records = load_records(self.ws.path("leak.jsonl"))
        triples, assignment = load_scores(self.ws.path("scores.jsonl"))
        info: dict = {"mode": "none", "halt_front": None, "knees": {}, "warning": None,
                      "n_fronts": len(assignment.fronts)}
        if self.config.target_size is not None:
            target = self.config.target_size
            if target > len(records):
                raise StageError(f"target size {target} exceeds the {len(records)} curated records")
            kept = prune_to_size(assignment, records, target, triples)
            info["mode"] = "target_size"
        elif records:
            halt = select_halt(assignment, triples, self.config.curation.kneedle_sensitivity)
            kept = prune_through_front(assignment, records, halt.front)
            info.update(mode="kneedle", halt_front=halt.front, knees=halt.knees, warning=halt.warning,
                        removed_through_front=halt.removed_through_front)
        else:
            kept = []
        save_records(self.ws.path("retained.jsonl"), kept)
        atomic_write(self.ws.path("prune.json"), dumps(info))

    def _stage_manifest(self):
        def load(name):
            return load_records(self.ws.path(name))

        report = CurationReport()
        report.record("raw", load("pool.jsonl"))
        report.record("after_dedup", load("dedup.jsonl"))
        report.record("after_leak", load("leak.jsonl"))
        retained = load("retained.jsonl")
        report.record("after_pareto", retained)
        dstats = json.loads(self.ws.path("dedup_stats.json").read_text(encoding="utf-8"))
        report.duplicate_component_sizes = {int(k): v for k, v in dstats["component_sizes"].items()}
        lstats = json.loads(self.ws.path("leak_stats.json").read_text(encoding="utf-8"))
        prune = json.loads(self.ws.path("prune.json").read_text(encoding="utf-8"))
        report.knees = prune.get("knees", {})
        report.halt_front = prune.get("halt_front")
        report.halt_mode = prune.get("mode", "none")
        report.n_fronts = prune.get("n_fronts", 0)
        rstats = json.loads(self.ws.path("retrieve_stats.json").read_text(encoding="utf-8"))
        report.warnings = list(lstats.get("warnings", []))
        if rstats["collapsed"]:
            report.warnings.append(f"{rstats['collapsed']} cross-concept duplicate retrieval(s) collapsed "
                                   "to their best-matching concept")
        if dstats.get("unembedded"):
            report.warnings.append(f"{dstats['unembedded']} record(s) had no copy-detection embedding")
        if prune.get("warning"):
            report.warnings.append(prune["warning"])
        emit_manifest(retained, report, self.config.snapshot(), self.ws.root)


def record_copy_store(records, precomputed: EmbeddingStore | None, image_embedder=None,
                      batch_size: int = 64) -> EmbeddingStore:
    """Copy-detection store keyed by record id.

    Vectors come from ``precomputed`` (keyed by record id or by URI) when
    present there, otherwise from ``image_embedder``. Records that get no
    vector are left out with a warning.
    """
    vectors: dict[str, np.ndarray] = {}
    todo = []
    for r in records:
        if precomputed is not None and (r.id in precomputed or r.uri in precomputed):
            key = r.id if r.id in precomputed else r.uri
            vectors[r.id] = precomputed.vector(key).astype(np.float64)
        else:
            todo.append(r)
    if todo:
        if image_embedder is None:
            raise IntegrityError(f"{len(todo)} record(s) have no copy-detection embedding, e.g. {todo[0].id}")
        got = embed_batch(image_embedder, [r.uri for r in todo], batch_size)
        for r, v in zip(todo, got):
            if v is None:
                log.warning("no copy-detection embedding for %s; record dropped", r.id)
                continue
            vectors[r.id] = v
    tag = precomputed.model_tag if precomputed is not None else getattr(image_embedder, "model_name", "copy")
    ids = [r.id for r in records if r.id in vectors]
    if not ids:
        return build_store([], np.zeros((0, 1)), tag)
    return build_store(ids, np.stack([vectors[i] for i in ids]), tag)


def load_scores(path) -> tuple[dict[str, OODTriple], ParetoAssignment]:
    triples: dict[str, OODTriple] = {}
    front_of: dict[str, int] = {}
    for row in read_jsonl(path):
        t = OODTriple(row["image_id"], row["ood_primary"], row["ood_general"], row["ood_text_delta"])
        triples[t.image_id] = t
        front_of[t.image_id] = int(row["front"])
    nfronts = max(front_of.values()) + 1 if front_of else 0
    fronts: list[list[str]] = [[] for _ in range(nfronts)]
    for i, f in front_of.items():
        fronts[f].append(i)
    for f in fronts:
        f.sort()
    return triples, ParetoAssignment(front_of, fronts)


def save_scores(path, triples, assignment: ParetoAssignment) -> None:
    write_jsonl(path, ({"image_id": t.image_id, "ood_primary": t.ood_primary, "ood_general": t.ood_general,
                        "ood_text_delta": t.ood_text_delta, "front": assignment.front_of[t.image_id]}
                       for t in triples))


def emit_manifest(records, report: CurationReport, config_snapshot: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    if not report.telescopes():
        raise StageError(f"curation counts do not reconcile: {report.counts}")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise StageError("duplicate ids among retained records")
    if not records:
        msg = "retained set is empty; thresholds removed every candidate"
        log.warning(msg)
        if msg not in report.warnings:
            report.warnings.append(msg)
    save_records(out_dir / "manifest.jsonl", records)
    atomic_write(out_dir / "report.json", json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
    lock = {"config": config_snapshot, "engine_version": __version__,
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    atomic_write(out_dir / "config.lock.json", json.dumps(lock, indent=1, sort_keys=True) + "\n")


def load_manifest(workspace) -> DatasetManifest:
    ws = Path(workspace)
    lock = json.loads((ws / "config.lock.json").read_text(encoding="utf-8"))
    report = CurationReport.from_json(json.loads((ws / "report.json").read_text(encoding="utf-8")))
    return DatasetManifest(load_records(ws / "manifest.jsonl"), report, lock["config"],
                           lock["engine_version"], lock["created_at"])


def run_pipeline(config: PipelineConfig, *, resume: bool = False, providers: Mapping | None = None,
                 hook: Callable[[str, str], None] | None = None) -> DatasetManifest:
    errors = validate_config(config)
    if errors:
        raise ConfigError(errors)
    return Runner(config, providers, hook).run(resume=resume)


def resume(workspace, *, providers: Mapping | None = None, offline: bool | None = None) -> DatasetManifest:
    """Continue the run recorded in ``workspace`` from its first pending stage."""
    ws = Path(workspace)
    snap_path = ws / RUN_CONFIG
    if not snap_path.exists():
        raise CorruptionError(f"{ws}: no {RUN_CONFIG}; nothing to resume")
    raw = json.loads(snap_path.read_text(encoding="utf-8"))
    cfg, errors = config_from_dict(raw, ws, offline=raw.get("offline") if offline is None else offline)
    if cfg is not None:
        errors += validate_config(cfg)
    if errors:
        raise ConfigError(errors)
    return Runner(cfg, providers).run(resume=True)
