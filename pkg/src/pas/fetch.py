"""Materialise manifest images to a local directory.

Manifests reference images by URI. ``fetch_manifest`` downloads ``http(s)``
URIs and copies ``file://`` URIs; anything else (for instance the ``mock://``
URIs of offline runs) is reported as skipped.
"""
from __future__ import annotations

import logging
import random
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import unquote, urlparse

import httpx

from pas.errors import ConfigError
from pas.gateway import _RETRY_STATUS, backoff_delay, offline_mode
from pas.io import atomic_write, stable_int
from pas.records import ImageRecord

log = logging.getLogger(__name__)


@dataclass
class FetchSummary:
    fetched: list[str] = field(default_factory=list)
    present: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"fetched": len(self.fetched), "present": len(self.present), "skipped": len(self.skipped),
                "failed": len(self.failed)}


def target_name(record: ImageRecord) -> str:
    """``<record id><suffix of the URI path>``; ids are unique so names never clash."""
    suffix = Path(unquote(urlparse(record.uri).path)).suffix
    return record.id + (suffix if 0 < len(suffix) <= 6 else "")


def _download(client: httpx.Client, url: str, retries: int, sleep) -> bytes:
    rng = random.Random(stable_int(url))
    last = None
    for attempt in range(retries + 1):
        if attempt:
            sleep(backoff_delay(attempt - 1, rng))
        try:
            resp = client.get(url, follow_redirects=True)
        except httpx.TransportError as exc:
            last = exc
            continue
        if resp.status_code in _RETRY_STATUS:
            last = f"HTTP {resp.status_code}"
            continue
        if resp.status_code != 200:
            raise OSError(f"HTTP {resp.status_code}")
        return resp.content
    raise OSError(f"gave up after {retries + 1} attempts: {last}")


def fetch_manifest(records, out_dir, *, workers: int = 8, retries: int = 3, timeout: float = 30.0,
                   client: httpx.Client | None = None, offline: bool | None = None,
                   sleep=time.sleep) -> FetchSummary:
    """Download every record's image into ``out_dir``; existing files are kept."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    offline = offline_mode() if offline is None else offline
    remote = [r for r in records if urlparse(r.uri).scheme in ("http", "https")]
    if remote and offline:
        raise ConfigError([f"{len(remote)} http(s) URI(s) to fetch but offline mode is on"])
    summary = FetchSummary()
    own = client is None and bool(remote)
    if own:
        client = httpx.Client(timeout=timeout)

    def one(rec: ImageRecord):
        dest = out / target_name(rec)
        if dest.exists():
            return "present", None
        scheme = urlparse(rec.uri).scheme
        try:
            if scheme in ("http", "https"):
                atomic_write(dest, _download(client, rec.uri, retries, sleep))
            elif scheme == "file":
                tmp = dest.with_name(f".{dest.name}.part")
                shutil.copyfile(unquote(urlparse(rec.uri).path), tmp)
                tmp.replace(dest)
            else:
                return "skipped", None
        except OSError as exc:
            return "failed", str(exc)
        return "fetched", None

    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for rec, (status, err) in zip(records, pool.map(one, records)):
                if status == "failed":
                    summary.failed[rec.id] = err
                    log.warning("fetch %s failed: %s", rec.uri, err)
                else:
                    getattr(summary, status).append(rec.id)
    finally:
        if own:
            client.close()
    return summary
