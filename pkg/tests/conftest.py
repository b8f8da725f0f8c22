import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pas.records import REAL, SYNTHETIC, ImageRecord  # noqa: E402

_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[report.nodeid] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in sorted(_ACCEPTANCE.items(), key=lambda kv: _criterion_number(kv[0])):
        terminalreporter.write_line(f"{outcome}  {nodeid.split('::')[-1]}")


def _criterion_number(nodeid: str) -> int:
    name = nodeid.split("::")[-1]
    digits = "".join(ch for ch in name.split("_")[2] if ch.isdigit()) if name.count("_") >= 2 else ""
    return int(digits) if digits else 99


def unit_rows(rng, n, dim):
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def real(uri: str, concept: str = "c1", sim: float = 0.5) -> ImageRecord:
    from pas.records import real_record_id
    return ImageRecord(real_record_id(uri), uri, REAL, concept, None, sim)


def synth(prompt: str, i: int, concept: str = "c1") -> ImageRecord:
    from pas.records import synthetic_record_id
    return ImageRecord(synthetic_record_id(prompt, 0, i), f"mock://s/{prompt}/{i}", SYNTHETIC, concept, prompt)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def smoke_corpus(tmp_path_factory):
    from pas.synthetic import make_smoke_corpus
    return make_smoke_corpus(tmp_path_factory.mktemp("corpus"))
