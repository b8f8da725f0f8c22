"""Candidate pool assembly: real images by text-to-image retrieval, synthetic
images by caption sampling and generation jobs."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pas.concepts import Concept, DomainSpec
from pas.errors import IntegrityError, PasError, StageError
from pas.gateway import ChatRequest
from pas.index import EmbeddingStore, top_k_batch
from pas.io import read_jsonl, stable_int, write_jsonl
from pas.records import REAL, SYNTHETIC, ImageRecord, real_record_id, synthetic_record_id

log = logging.getLogger(__name__)

DEFAULT_CAPTION_TEMPLATE = (
    "Write one short, vivid caption for a photograph whose subject is \"{concept}\", "
    "a kind of {domain_description} from the domain {domain_name}. Put the subject in a concrete "
    "scene. Reply with the caption only."
)


@dataclass(frozen=True)
class AcquisitionConfig:
    per_concept_real: int = 500
    n_cap: int = 5
    n_synth: int = 35
    caption_template: str = DEFAULT_CAPTION_TEMPLATE
    base_seed: int = 0
    temperature: float = 1.0
    workers: int = 4

    def violations(self) -> list[str]:
        out = []
        for name in ("per_concept_real", "n_cap", "n_synth", "workers"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        return out


@dataclass(frozen=True)
class CaptionSet:
    concept_id: str
    concept_key: str
    captions: tuple[str, ...]
    seeds: tuple[int, ...]

    def to_json(self) -> dict:
        return {"concept_id": self.concept_id, "concept_key": self.concept_key,
                "captions": list(self.captions), "seeds": list(self.seeds)}

    @classmethod
    def from_json(cls, row: dict) -> "CaptionSet":
        return cls(row["concept_id"], row["concept_key"], tuple(row["captions"]), tuple(row["seeds"]))


def _seed(*parts) -> int:
    return stable_int(*parts) % (1 << 31)


# -- real images ----------------------------------------------------------------

def retrieve_for_concept(concept: Concept, text_embedder, image_store: EmbeddingStore,
                         config: AcquisitionConfig) -> list[ImageRecord]:
    return retrieve_all([concept], text_embedder, image_store, config, collapse=False)


def retrieve_all(concepts: Sequence[Concept], text_embedder, image_store: EmbeddingStore,
                 config: AcquisitionConfig, collapse: bool = True) -> list[ImageRecord]:
    """Top-k images per concept; with ``collapse`` an image retrieved by several
    concepts keeps only its best (highest similarity, then lowest concept id) link."""
    if len(image_store) == 0:
        raise StageError("retrieval store is empty")
    kept_concepts, vectors = [], []
    for c in concepts:
        try:
            (v,) = text_embedder.embed([c.text])
        except PasError as exc:
            log.warning("text embedding for %r failed, concept skipped: %s", c.text, exc)
            continue
        if v is None:
            log.warning("text embedding for %r missing, concept skipped", c.text)
            continue
        kept_concepts.append(c)
        vectors.append(v)
    if not vectors:
        return []
    hits = top_k_batch(image_store, np.stack(vectors), config.per_concept_real)
    records = []
    for c, nl in zip(kept_concepts, hits):
        for uri, sim in nl.neighbors:
            records.append(ImageRecord(real_record_id(uri), uri, REAL, c.id, None, sim))
    return collapse_links(records) if collapse else records


def collapse_links(records: Sequence[ImageRecord]) -> list[ImageRecord]:
    """One record per image: the highest-similarity link, ties to the lower concept id."""
    best: dict[str, ImageRecord] = {}
    for r in records:
        cur = best.get(r.id)
        if cur is None or (r.retrieval_similarity, cur.concept_id) > (cur.retrieval_similarity, r.concept_id):
            best[r.id] = r
    return sorted(best.values(), key=lambda r: r.id)


# -- synthetic images --------------------------------------------------------------

def _clean_caption(reply: str) -> str:
    for line in (reply or "").splitlines():
        line = line.strip().strip("\"'“”").strip()
        if line:
            return line
    return ""


def generate_captions(concept: Concept, chat_provider, config: AcquisitionConfig,
                      domain: DomainSpec | None = None) -> CaptionSet:
    name = domain.name if domain else ""
    desc = domain.description if domain else ""
    prompt = config.caption_template.format(concept=concept.text, domain_name=name, domain_description=desc)
    messages = (("user", prompt),)
    captions: list[str] = []
    seeds: list[int] = []
    for j in range(config.n_cap):
        seed = _seed(config.base_seed, concept.key, "caption", j)
        text = _clean_caption(chat_provider.complete(ChatRequest(messages, config.temperature, seed)))
        if not text or text in captions:
            seed = _seed(config.base_seed, concept.key, "caption-retry", j)
            retry = _clean_caption(chat_provider.complete(ChatRequest(messages, config.temperature, seed)))
            text = retry or text
        if not text:
            log.warning("empty caption %d for %r dropped", j, concept.text)
            continue
        captions.append(text)
        seeds.append(seed)
    if not captions:
        raise StageError(f"no usable captions for {concept.text!r}")
    return CaptionSet(concept.id, concept.key, tuple(captions), tuple(seeds))


def generate_all_captions(concepts: Sequence[Concept], chat_provider, config: AcquisitionConfig,
                          domain: DomainSpec | None = None) -> list[CaptionSet]:
    def one(c: Concept) -> CaptionSet | None:
        try:
            return generate_captions(c, chat_provider, config, domain)
        except PasError as exc:
            log.warning("captions for %r skipped: %s", c.text, exc)
            return None

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        out = list(pool.map(one, concepts))
    return [cs for cs in out if cs is not None]


def synthesize_for_captions(caption_set: CaptionSet, image_gen, config: AcquisitionConfig) -> list[ImageRecord]:
    records = []
    for j, caption in enumerate(caption_set.captions):
        seed = _seed(config.base_seed, caption_set.concept_key, j)
        try:
            result = image_gen.generate(caption, config.n_synth, seed)
        except PasError as exc:
            log.warning("generation failed for caption %d of %s: %s", j, caption_set.concept_id, exc)
            continue
        if result.errors:
            log.warning("%d of %d images failed for caption %d of %s",
                        result.errors, config.n_synth, j, caption_set.concept_id)
        for i, uri in enumerate(result.uris):
            records.append(ImageRecord(synthetic_record_id(caption, seed, i), uri, SYNTHETIC,
                                       caption_set.concept_id, caption))
    if not records:
        log.warning("no synthetic images for concept %s", caption_set.concept_id)
    return records


def synthesize_all(caption_sets: Sequence[CaptionSet], image_gen, config: AcquisitionConfig) -> list[ImageRecord]:
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        parts = list(pool.map(lambda cs: synthesize_for_captions(cs, image_gen, config), caption_sets))
    return sorted((r for part in parts for r in part), key=lambda r: r.id)


def merge_pools(real: Sequence[ImageRecord], synth: Sequence[ImageRecord]) -> list[ImageRecord]:
    real_sorted = sorted(real, key=lambda r: r.id)
    synth_sorted = sorted(synth, key=lambda r: r.id)
    seen: set[str] = set()
    for r in real_sorted + synth_sorted:
        if r.id in seen:
            raise IntegrityError(f"record id collision: {r.id}")
        seen.add(r.id)
    return real_sorted + synth_sorted


def save_caption_sets(path, sets: Sequence[CaptionSet]) -> None:
    write_jsonl(path, (cs.to_json() for cs in sets))


def load_caption_sets(path) -> list[CaptionSet]:
    return [CaptionSet.from_json(r) for r in read_jsonl(path)]

