"""
conftest.py - Shared Test Fixtures

Corpus builders, configs and instrumented mock backends. Every test runs
offline; the only child processes are the sandbox tests.
"""

import json
import threading
import time
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import pytest

from backend import BackendConfig, MockBackend, MockRule, MockScript, Transcript, create_backend
from config import CliConfig
from mock_playbook import default_playbook
from sandbox import ExecutionResult

WINDOW = 600
SOLUTION_MARKER = "SOLUTIONMARKER"

VALID_PROBLEM = (
    "[CONTEXT]: Graph analytics on a 16-core server with a shared last-level cache.\n"
    "[SYMPTOM]: Irregular accesses miss in the cache 61% of the time.\n"
    "[CONSTRAINT]: No more than 32 KB of new state per core."
)

VALID_PROPOSAL = (
    "Title: Hop Tables: Remembering Pointer Chains\n\n"
    "The Mechanism: A 512-entry table records the last two hops of each pointer chain.\n\n"
    "Why it Works: Chains repeat across iterations, so the next hop is known early.\n\n"
    "Evaluation Plan: Compare with a stride prefetcher on GAP benchmarks; report IPC."
)


def paper_text(paper_id: str) -> str:
    """Problem section longer than WINDOW, then a solution section carrying the marker."""
    intro = f"Paper {paper_id} studies memory stalls in server processors. " * 15
    solution = f"The {SOLUTION_MARKER} design adds a victim filter beside the cache. " * 20
    return intro + solution


def with_rules(*rules) -> MockScript:
    """Given rules take precedence over the built-in playbook."""
    built = [r if isinstance(r, MockRule) else MockRule(r[0][0], r[0][1], r[1]) for r in rules]
    return MockScript(built + default_playbook().rules)


class InstrumentedBackend(MockBackend):
    """Mock backend that tracks in-flight calls and every request it served."""

    def __init__(self, config: BackendConfig, script: Optional[MockScript] = None,
                 transcript: Optional[Transcript] = None, delay: float = 0.0):
        super().__init__(config, script, transcript)
        self.delay = delay
        self.in_flight = 0
        self.max_in_flight = 0
        self.requests = []
        self._gauge = threading.Lock()

    def _call(self, request):
        with self._gauge:
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            self.requests.append(request)
        try:
            if self.delay:
                time.sleep(self.delay)
            return super()._call(request)
        finally:
            with self._gauge:
                self.in_flight -= 1


class FakeSandbox:
    """Sandbox stand-in returning a fixed result without starting a process."""

    def __init__(self, stdout: str = '{"T_total": 4.0, "speedup": 1.5}', returncode: int = 0):
        self.stdout = stdout
        self.returncode = returncode
        self.runs = 0
        self._lock = threading.Lock()

    def preflight(self) -> None:
        pass

    def run(self, program_text: str, workdir: Path) -> ExecutionResult:
        with self._lock:
            self.runs += 1
        return ExecutionResult(self.returncode, self.stdout, "")


class CountingFactory:
    """make_backend replacement that counts how often a backend was built."""

    def __init__(self, *rules):
        self.rules = rules
        self.calls = 0

    def __call__(self, config: BackendConfig, transcript: Transcript):
        self.calls += 1
        script = with_rules(*self.rules) if self.rules else None
        return create_backend(config, transcript, script)


@pytest.fixture
def make_corpus(tmp_path):
    """build(ids, root=None, **meta) -> corpus directory with one folder per paper."""

    def build(ids: Iterable[str], root: Optional[Path] = None, **meta: Any) -> Path:
        corpus = root or tmp_path / "corpus"
        for paper_id in ids:
            paper_dir = corpus / paper_id
            paper_dir.mkdir(parents=True, exist_ok=True)
            (paper_dir / "paper.txt").write_text(paper_text(paper_id), encoding="utf-8")
            data = {"problem_window": WINDOW}
            data.update(meta)
            (paper_dir / "meta.json").write_text(json.dumps(data), encoding="utf-8")
        return corpus

    return build


@pytest.fixture
def make_backend():
    """make(*rules, seed=7, max_parallel=4, delay=0.0) -> InstrumentedBackend over the playbook."""

    def make(*rules, seed: int = 7, max_parallel: int = 4, delay: float = 0.0) -> InstrumentedBackend:
        config = BackendConfig(seed=seed, max_parallel=max_parallel)
        return InstrumentedBackend(config, with_rules(*rules), Transcript(), delay)

    return make


@pytest.fixture
def make_config(tmp_path):
    """make(corpus, **sections) -> validated CliConfig writing runs under tmp_path/runs."""

    def make(corpus: Optional[Path] = None, **sections: Any) -> CliConfig:
        data: Dict[str, Any] = {
            "backend": {"kind": "mock", "seed": 7},
            "output": str(tmp_path / "runs"),
        }
        if corpus is not None:
            data["corpus"] = str(corpus)
        data.update(sections)
        return CliConfig.model_validate(data)

    return make


@pytest.fixture
def write_config(tmp_path):
    """write(data) -> path of a JSON config file."""

    def write(data: Dict[str, Any], name: str = "gauntlet.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return write
