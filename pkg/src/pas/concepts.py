"""Concept bank discovery: saturating generation, expansion and validation."""
from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from pas.errors import DomainError, EmptyDomainError, PasError, StageError
from pas.gateway import ChatRequest, parse_bool_verdict, parse_concept_list
from pas.io import atomic_write, dumps, read_jsonl, stable_hex, stable_int

log = logging.getLogger(__name__)

GENERATED, EXPANDED = "generated", "expanded"
PENDING, ACCEPTED, REJECTED = "pending", "accepted", "rejected"
INITIAL, EXPANDED_PHASE, VALIDATED = "initial", "expanded", "validated"

DEFAULT_SYSTEM_PROMPT = "You are a domain expert helping to assemble an image dataset. Keep answers terse."
DEFAULT_TEMPLATES = {
    "generation": (
        "List as many distinct {domain_description} as you can for an image dataset about "
        "{domain_name}. Answer with one concept per line and nothing else."
    ),
    "expansion": (
        "Within the domain {domain_name}, list other {domain_description} that are similar to "
        "\"{concept}\". Answer with one concept per line and nothing else."
    ),
    "validation": (
        "Domain: {domain_name}. Is \"{concept}\" a valid example of {domain_description}? "
        "Answer yes or no."
    ),
}
HISTORY_TURNS = 20


class InvalidConcept(DomainError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    name: str
    description: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "name", self.name.strip())
        object.__setattr__(self, "description", self.description.strip())
        if not self.name or not self.description:
            raise DomainError("domain name and description must be non-empty")

    def fill(self, template: str, concept: str = "") -> str:
        return template.format(domain_name=self.name, domain_description=self.description, concept=concept)


@dataclass(frozen=True)
class DiscoveryConfig:
    lambda1: float = 0.01
    lambda2: float = 0.01
    max_generation_rounds: int = 50
    max_expansion_rounds: int = 10
    base_seed: int = 0
    prompt_templates: dict = field(default_factory=lambda: dict(DEFAULT_TEMPLATES))
    system_prompt: str = DEFAULT_SYSTEM_PROMPT
    temperature: float = 1.0
    workers: int = 4
    max_retries: int = 1

    def violations(self) -> list[str]:
        out = []
        if not 0 < self.lambda1 < 1:
            out.append("lambda1 outside (0,1)")
        if not 0 < self.lambda2 < 1:
            out.append("lambda2 outside (0,1)")
        if self.max_generation_rounds < 1:
            out.append("max_generation_rounds must be >= 1")
        if self.max_expansion_rounds < 1:
            out.append("max_expansion_rounds must be >= 1")
        if self.workers < 1:
            out.append("workers must be >= 1")
        missing = [k for k in DEFAULT_TEMPLATES if k not in self.prompt_templates]
        if missing:
            out.append(f"prompt templates missing: {', '.join(missing)}")
        return out

    def template(self, name: str) -> str:
        return self.prompt_templates[name]


@dataclass(frozen=True)
class Concept:
    id: str
    text: str
    key: str
    origin: str
    parent_id: str | None
    iteration: int
    validated: str = PENDING

    def to_json(self) -> dict:
        return {"id": self.id, "text": self.text, "key": self.key, "origin": self.origin,
                "parent_id": self.parent_id, "iteration": self.iteration, "validated": self.validated}

    @classmethod
    def from_json(cls, row: dict) -> "Concept":
        return cls(row["id"], row["text"], row["key"], row["origin"], row.get("parent_id"),
                   int(row["iteration"]), row.get("validated", PENDING))


@dataclass
class ConceptBank:
    domain: DomainSpec
    concepts: list[Concept] = field(default_factory=list)
    phase: str = INITIAL
    transcript: list[tuple[str, str]] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def keys(self) -> set[str]:
        return {c.key for c in self.concepts}

    def by_id(self) -> dict[str, Concept]:
        return {c.id: c for c in self.concepts}

    def accepted(self) -> list[Concept]:
        return [c for c in self.concepts if c.validated == ACCEPTED]

    def check(self) -> None:
        keys = [c.key for c in self.concepts]
        if len(set(keys)) != len(keys):
            raise PasError("duplicate concept keys in bank")
        ids = self.by_id()
        for c in self.concepts:
            if c.origin == EXPANDED and c.parent_id not in ids:
                raise PasError(f"expanded concept {c.text!r} has no parent in the bank")
            if c.origin == GENERATED and c.parent_id is not None:
                raise PasError(f"generated concept {c.text!r} has a parent")
        for origin in (GENERATED, EXPANDED):
            its = sorted({c.iteration for c in self.concepts if c.origin == origin})
            if its and its != list(range(len(its))):
                raise PasError(f"{origin} iterations not contiguous from 0: {its}")
        if self.phase == VALIDATED and any(c.validated == PENDING for c in self.concepts):
            raise PasError("validated bank with pending concepts")


def canonicalize_concept(text: str) -> tuple[str, str]:
    """Return ``(display, key)``: display keeps casing, key is case-folded."""
    s = (text or "").strip()
    s = re.sub(r"^\s*(?:[-*•+]+|\(?\d+[.)\]])\s*", "", s)
    s = s.strip().strip("\"'`“”‘’").strip()
    display = " ".join(s.split())
    if not display:
        raise InvalidConcept(f"empty concept from {text!r}")
    return display, display.casefold()


def concept_id(key: str) -> str:
    return "c" + stable_hex("concept", key, length=16)


def _clean(reply: str) -> list[tuple[str, str]]:
    out = []
    for raw in parse_concept_list(reply):
        try:
            out.append(canonicalize_concept(raw))
        except InvalidConcept:
            continue
    return out


def _ask(provider, messages, seed: int, temperature: float, retries: int) -> str:
    """One chat call with a small retry budget on top of the provider's own."""
    last: Exception | None = None
    for _ in range(retries + 1):
        try:
            return provider.complete(ChatRequest(tuple(messages), temperature, seed))
        except PasError as exc:
            last = exc
    raise StageError(f"provider failed after {retries + 1} attempts: {last}") from last


def _truncate(transcript: list[tuple[str, str]], turns: int = HISTORY_TURNS) -> list[tuple[str, str]]:
    if not transcript:
        return []
    head = [transcript[0]] if transcript[0][0] == "system" else []
    body = transcript[len(head):]
    return head + body[-2 * turns:]


def generate_initial_concepts(domain: DomainSpec, provider, config: DiscoveryConfig,
                              on_round: Callable[[int, int, int], None] | None = None) -> ConceptBank:
    problems = config.violations()
    if problems:
        raise DomainError("; ".join(problems))
    prompt = domain.fill(config.template("generation"))
    system = ("system", config.system_prompt)
    transcript: list[tuple[str, str]] = [system]
    concepts: list[Concept] = []
    seen: set[str] = set()
    rounds = 0
    for n in range(1, config.max_generation_rounds + 1):
        reply = _ask(provider, [system, ("user", prompt)], config.base_seed + n, config.temperature,
                     config.max_retries)
        rounds = n
        transcript += [("user", prompt), ("assistant", reply)]
        prior = len(seen)
        for display, key in _clean(reply):
            if key not in seen:
                seen.add(key)
                concepts.append(Concept(concept_id(key), display, key, GENERATED, None, n - 1))
        gain = len(seen) - prior
        if on_round:
            on_round(n, gain, prior)
        if n == 1 and not seen:
            raise EmptyDomainError(f"no concepts generated for domain {domain.name!r}")
        if gain < config.lambda1 * prior:
            break
    bank = ConceptBank(domain, concepts, INITIAL, _truncate(transcript),
                       {"generation_rounds": rounds})
    bank.check()
    return bank


def expand_concepts(bank: ConceptBank, provider, config: DiscoveryConfig,
                    on_round: Callable[[int, int, int], None] | None = None) -> ConceptBank:
    if bank.phase != INITIAL:
        raise DomainError(f"expansion needs an initial bank, got phase {bank.phase!r}")
    history = _truncate(bank.transcript) or [("system", config.system_prompt)]
    template = config.template("expansion")
    concepts = list(bank.concepts)
    seen = {c.key for c in concepts}
    frontier = sorted(concepts, key=lambda c: c.key)
    rounds = skipped = 0

    def expand_one(c: Concept):
        msgs = history + [("user", bank.domain.fill(template, c.text))]
        try:
            return c, _ask(provider, msgs, config.base_seed + stable_int(c.key) % (1 << 31),
                           config.temperature, config.max_retries)
        except StageError as exc:
            log.warning("expansion of %r skipped: %s", c.text, exc)
            return c, None

    for r in range(config.max_expansion_rounds):
        rounds = r + 1
        prior = len(seen)
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(expand_one, frontier))
        failed = sum(1 for _, reply in results if reply is None)
        if results and failed == len(results):
            raise StageError(f"expansion round {rounds}: every provider call failed")
        skipped += failed
        new: list[Concept] = []
        # single writer, parents visited in key order
        for parent, reply in results:
            for display, key in _clean(reply or ""):
                if key not in seen:
                    seen.add(key)
                    new.append(Concept(concept_id(key), display, key, EXPANDED, parent.id, r))
        concepts.extend(new)
        gain = len(seen) - prior
        if on_round:
            on_round(rounds, gain, prior)
        if gain < config.lambda2 * prior:
            break
        # concepts already expanded would be re-asked with the same seed and prompt
        frontier = sorted(new, key=lambda c: c.key)
    out = ConceptBank(bank.domain, concepts, EXPANDED_PHASE, bank.transcript,
                      dict(bank.stats, expansion_rounds=rounds, expansion_skipped=skipped))
    out.check()
    return out


def validate_concepts(bank: ConceptBank, provider, config: DiscoveryConfig) -> ConceptBank:
    if bank.phase != EXPANDED_PHASE:
        raise DomainError(f"validation needs an expanded bank, got phase {bank.phase!r}")
    template = config.template("validation")
    system = ("system", config.system_prompt)

    def judge(c: Concept) -> tuple[str, bool]:
        msgs = [system, ("user", bank.domain.fill(template, c.text))]
        for attempt in range(2):
            try:
                reply = provider.complete(ChatRequest(tuple(msgs), 0.0, config.base_seed + attempt))
            except PasError as exc:
                log.warning("validation call for %r failed: %s", c.text, exc)
                continue
            verdict = parse_bool_verdict(reply)
            if verdict is not None:
                return (ACCEPTED if verdict else REJECTED), False
        return REJECTED, True

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        verdicts = dict(zip((c.key for c in bank.concepts), pool.map(judge, bank.concepts)))
    concepts = [replace(c, validated=verdicts[c.key][0]) for c in bank.concepts]
    unparseable = sum(1 for _, bad in verdicts.values() if bad)
    if unparseable:
        log.warning("%d concept(s) rejected for unparseable verdicts", unparseable)
    out = ConceptBank(bank.domain, concepts, VALIDATED, bank.transcript,
                      dict(bank.stats,
                           accepted=sum(c.validated == ACCEPTED for c in concepts),
                           rejected=sum(c.validated == REJECTED for c in concepts),
                           unparseable=unparseable))
    out.check()
    return out


def generate_general_concepts(domain: DomainSpec, provider, config: DiscoveryConfig,
                              template: str | None = None) -> list[str]:
    """A coarse, super-domain concept list: one extra generation round."""
    template = template or (
        "List general object categories that a broad photo collection might contain, "
        "including {domain_name}. Answer with one category per line and nothing else."
    )
    reply = _ask(provider, [("system", config.system_prompt), ("user", domain.fill(template))],
                 config.base_seed, config.temperature, config.max_retries)
    out, seen = [], set()
    for display, key in _clean(reply) + [canonicalize_concept(domain.name)]:
        if key not in seen:
            seen.add(key)
            out.append(display)
    return out


def save_bank(bank: ConceptBank, path) -> None:
    path = Path(path)
    atomic_write(path, "".join(dumps(c.to_json()) + "\n" for c in bank.concepts))
    meta = {"domain": {"name": bank.domain.name, "description": bank.domain.description},
            "phase": bank.phase, "transcript": [list(m) for m in bank.transcript], "stats": bank.stats}
    atomic_write(path.with_name(path.name + ".meta.json"), dumps(meta))


def load_bank(path, domain: DomainSpec | None = None) -> ConceptBank:
    path = Path(path)
    concepts = [Concept.from_json(r) for r in read_jsonl(path)]
    meta_path = path.with_name(path.name + ".meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        dom = domain or DomainSpec(meta["domain"]["name"], meta["domain"]["description"])
        phase = meta["phase"]
        transcript = [tuple(m) for m in meta.get("transcript", [])]
        stats = meta.get("stats", {})
    else:
        if domain is None:
            raise PasError(f"{path}: no metadata sidecar and no domain given")
        dom, transcript, stats = domain, [], {}
        validated = concepts and all(c.validated != PENDING for c in concepts)
        phase = VALIDATED if validated else (EXPANDED_PHASE if any(c.origin == EXPANDED for c in concepts)
                                             else INITIAL)
    bank = ConceptBank(dom, concepts, phase, transcript, stats)
    bank.check()
    return bank


def concept_texts(concepts: Sequence[Concept]) -> list[str]:
    return [c.text for c in concepts]
