"""Candidate image records and their line-delimited JSON form."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

from pas.io import read_jsonl, stable_hex, write_jsonl

REAL = "real"
SYNTHETIC = "synthetic"
SOURCES = (REAL, SYNTHETIC)


@dataclass(frozen=True)
class ImageRecord:
    id: str
    uri: str
    source: str
    concept_id: str
    caption: str | None = None
    retrieval_similarity: float | None = None

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.source == SYNTHETIC and not self.caption:
            raise ValueError(f"synthetic record {self.id} has no caption")
        if self.source == REAL:
            s = self.retrieval_similarity
            if s is None or not -1.0 <= s <= 1.0:
                raise ValueError(f"real record {self.id} needs a similarity in [-1, 1], got {s}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, row: dict) -> "ImageRecord":
        return cls(
            id=row["id"],
            uri=row["uri"],
            source=row["source"],
            concept_id=row["concept_id"],
            caption=row.get("caption"),
            retrieval_similarity=row.get("retrieval_similarity"),
        )


def real_record_id(uri: str) -> str:
    return "r" + stable_hex(REAL, uri)


def synthetic_record_id(prompt: str, seed: int, index: int) -> str:
    return "s" + stable_hex(SYNTHETIC, prompt, seed, index)


def save_records(path, records: Iterable[ImageRecord]) -> None:
    write_jsonl(path, (r.to_json() for r in records))


def load_records(path) -> list[ImageRecord]:
    return [ImageRecord.from_json(row) for row in read_jsonl(path)]
