"""
store.py - Corpus Ingestion, Run Persistence and Reports

CORPUS LAYOUT:
    corpus/{paper_id}/paper.txt    full text (UTF-8, non-empty)
    corpus/{paper_id}/meta.json    optional: {"paper_id", "problem_window",
                                   "ground_truth_available", "tags"}

RUN LAYOUT:
    runs/{run_id}/run.json             RunRecord
    runs/{run_id}/transcript.jsonl     every agent call
    runs/{run_id}/{pipeline}/...       pipeline artifacts
    runs/{run_id}/COMPLETE             written last

A run directory without COMPLETE was interrupted and is listed as partial.

Everything on disk is UTF-8 JSON, JSON Lines or Markdown.
"""

import json
import logging
import secrets
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from config import DEFAULT_PROBLEM_WINDOW
from errors import CorpusError, DuplicateRun, GauntletError, PersistFailed, PreconditionError, ReportFormatError
from kernel import ProblemSource, ProblemStatement

logger = logging.getLogger("gauntlet.store")

PAPER_FILE = "paper.txt"
META_FILE = "meta.json"
RECORD_FILE = "run.json"
TRANSCRIPT_FILE = "transcript.jsonl"
COMPLETE_MARKER = "COMPLETE"
PARTIAL_MARKER = "PARTIAL"


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusEntry:
    paper_id: str
    text_path: Path
    problem_window: int = DEFAULT_PROBLEM_WINDOW
    ground_truth_available: bool = True
    tags: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "paper_id": self.paper_id,
            "text_path": str(self.text_path),
            "problem_window": self.problem_window,
            "ground_truth_available": self.ground_truth_available,
            "tags": list(self.tags),
        }


def _read_entry(paper_dir: Path) -> CorpusEntry:
    """One corpus directory -> entry. Raises ValueError describing what is wrong."""
    text_path = paper_dir / PAPER_FILE
    if not text_path.is_file():
        raise ValueError(f"missing {PAPER_FILE}")
    if not text_path.read_text(encoding="utf-8").strip():
        raise ValueError(f"{PAPER_FILE} is empty")

    meta: Dict[str, Any] = {}
    meta_path = paper_dir / META_FILE
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ValueError(f"{META_FILE} is not valid JSON ({e})")
        if not isinstance(meta, dict):
            raise ValueError(f"{META_FILE} must hold an object")

    window = meta.get("problem_window", DEFAULT_PROBLEM_WINDOW)
    if not isinstance(window, int) or isinstance(window, bool) or window <= 0:
        raise ValueError(f"problem_window must be a positive integer, got {window!r}")
    tags = meta.get("tags", [])
    if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
        raise ValueError("tags must be a list of strings")

    return CorpusEntry(
        paper_id=str(meta.get("paper_id") or paper_dir.name),
        text_path=text_path,
        problem_window=window,
        ground_truth_available=bool(meta.get("ground_truth_available", True)),
        tags=tuple(tags),
    )


def ingest_corpus(directory) -> Tuple[List[CorpusEntry], List[str]]:
    """
    Read every paper directory under `directory`.

    Args:
        directory: Corpus root

    Returns:
        (entries sorted by paper_id, diagnostics for malformed entries)

    Raises:
        CorpusError: directory missing, or two entries share a paper_id
    """
    root = Path(directory)
    if not root.is_dir():
        raise CorpusError(f"corpus directory not found: {root}")

    entries: List[CorpusEntry] = []
    diagnostics: List[str] = []
    seen: Dict[str, Path] = {}
    for paper_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            entry = _read_entry(paper_dir)
        except (ValueError, OSError) as e:
            diagnostics.append(f"{paper_dir}: {e}")
            continue
        if entry.paper_id in seen:
            raise CorpusError(f"duplicate paper_id '{entry.paper_id}' in {seen[entry.paper_id]} and {paper_dir}")
        seen[entry.paper_id] = paper_dir
        entries.append(entry)

    if not entries and not diagnostics:
        logger.warning("corpus %s is empty", root)
    for line in diagnostics:
        logger.warning("skipping %s", line)
    entries.sort(key=lambda e: e.paper_id)
    return entries, diagnostics


def load_problems(path) -> List[ProblemStatement]:
    """
    Pre-formatted problems (manual or telemetry-stub), one JSON object per line.

    Raises:
        CorpusError: malformed line or a source other than manual/telemetry-stub
    """
    problems = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                problem = ProblemStatement.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError, GauntletError) as e:
                raise CorpusError(f"{path}:{number}: malformed problem ({e})")
            if problem.source not in (ProblemSource.MANUAL, ProblemSource.TELEMETRY_STUB):
                raise CorpusError(f"{path}:{number}: pre-formatted problems must be manual or telemetry-stub")
            problems.append(problem)
    return problems


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

class Pipeline(Enum):
    IDEATION = "ideation"
    PANEL = "panel"
    FORGE = "forge"
    FUNNEL = "funnel"


class RunStatus(Enum):
    COMPLETE = "complete"
    PARTIAL = "partial"
    FAILED = "failed"


_id_lock = threading.Lock()
_last_stamp = [""]


def new_run_id() -> str:
    """Zero-padded UTC timestamp plus 4 hex chars; strictly increasing within a process."""
    with _id_lock:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        if stamp <= _last_stamp[0]:
            stamp = _bump(_last_stamp[0])
        _last_stamp[0] = stamp
        return f"{stamp}-{secrets.token_hex(2)}"


def _bump(stamp: str) -> str:
    digits = stamp[9:-1]
    return f"{stamp[:9]}{int(digits) + 1:0{len(digits)}d}Z"


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    pipeline: Pipeline
    subject: str
    config: Dict[str, Any] = field(default_factory=dict)
    transcript: Optional[str] = TRANSCRIPT_FILE
    manifest: Tuple[str, ...] = ()
    status: RunStatus = RunStatus.COMPLETE

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "pipeline": self.pipeline.value,
            "subject": self.subject,
            "config": self.config,
            "transcript": self.transcript,
            "manifest": list(self.manifest),
            "status": self.status.value,
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "RunRecord":
        return RunRecord(
            run_id=data["run_id"],
            pipeline=Pipeline(data["pipeline"]),
            subject=data["subject"],
            config=data.get("config") or {},
            transcript=data.get("transcript"),
            manifest=tuple(data.get("manifest") or ()),
            status=RunStatus(data["status"]),
        )


class LocalFS:
    """Filesystem operations used by RunStore (replaceable in tests)."""

    def exists(self, path: Path) -> bool:
        return path.exists()

    def mkdir(self, path: Path) -> None:
        path.mkdir(parents=True, exist_ok=False)

    def write_text(self, path: Path, text: str) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)


class RunStore:
    """Run directories under one output root. One writer per run directory."""

    def __init__(self, root, fs: Optional[LocalFS] = None):
        self.root = Path(root)
        self.fs = fs or LocalFS()

    def run_dir(self, run_id: str) -> Path:
        return self.root / run_id

    def persist_run(self, record: RunRecord, artifacts: Dict[str, str]) -> Path:
        """
        Write a run: artifacts, then run.json, then the completion marker.

        Args:
            record: Run record; its manifest is replaced by the artifact paths
            artifacts: Path relative to the run directory -> text content

        Returns:
            The run directory

        Raises:
            DuplicateRun: run directory already exists
            PersistFailed: a write failed (a PARTIAL marker is attempted)
        """
        for rel in artifacts:
            if Path(rel).is_absolute() or ".." in Path(rel).parts or rel in (RECORD_FILE, COMPLETE_MARKER, PARTIAL_MARKER):
                raise PreconditionError(f"invalid artifact path: {rel}")
        run_dir = self.run_dir(record.run_id)
        if self.fs.exists(run_dir):
            raise DuplicateRun(f"run {record.run_id} already exists at {run_dir}")
        stored = replace(record, manifest=tuple(sorted(artifacts)))
        try:
            self.fs.mkdir(run_dir)
            for rel in stored.manifest:
                self.fs.write_text(run_dir / rel, artifacts[rel])
            self.fs.write_text(run_dir / RECORD_FILE, json.dumps(stored.to_dict(), indent=2, sort_keys=True) + "\n")
            self.fs.write_text(run_dir / COMPLETE_MARKER, stored.run_id + "\n")
        except FileExistsError:
            raise DuplicateRun(f"run {record.run_id} already exists at {run_dir}")
        except OSError as e:
            try:
                self.fs.write_text(run_dir / PARTIAL_MARKER, f"{e}\n")
            except OSError:
                pass
            raise PersistFailed(f"writing run {record.run_id} failed: {e}")
        logger.info("run %s stored in %s", record.run_id, run_dir)
        return run_dir

    def list_runs(self) -> List[Dict[str, str]]:
        """Every run directory with its pipeline and status, oldest first."""
        if not self.root.is_dir():
            return []
        runs = []
        for run_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            pipeline = next((p.value for p in Pipeline if (run_dir / p.value).is_dir()), "")
            status = RunStatus.PARTIAL.value
            if (run_dir / COMPLETE_MARKER).exists() and (run_dir / RECORD_FILE).exists():
                try:
                    data = json.loads((run_dir / RECORD_FILE).read_text(encoding="utf-8"))
                    pipeline, status = data["pipeline"], data["status"]
                except (ValueError, KeyError):
                    pass
            runs.append({"run_id": run_dir.name, "pipeline": pipeline, "status": status})
        return runs

    def load_run(self, run_id: str) -> RunRecord:
        """
        Raises:
            PreconditionError: run missing or never completed
        """
        run_dir = self.run_dir(run_id)
        if not (run_dir / COMPLETE_MARKER).exists():
            raise PreconditionError(f"run {run_id} is missing or incomplete")
        return RunRecord.from_dict(json.loads((run_dir / RECORD_FILE).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_FORMATS = ("json", "markdown")


def report_json(report: Dict[str, Any]) -> str:
    return json.dumps(report, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> List[str]:
    lines = ["| " + " | ".join(headers) + " |", "|" + "|".join("---" for _ in headers) + "|"]
    for row in rows:
        lines.append("| " + " | ".join("" if v is None else str(v) for v in row) + " |")
    return lines


def _stats_table(stats: Dict[str, Any]) -> List[str]:
    rates = stats["rates"]

    def rate(name: str) -> str:
        return f"{rates[name]['fraction']} ({rates[name]['decimal']})"

    return _table(
        ("Metric", "Count", "Rate"),
        [
            ("total", stats["n_total"], ""),
            ("viable", stats["n_viable"], rate("viable_rate")),
            ("rediscovery", stats["n_rediscovery"], rate("rediscovery_rate")),
            ("alternative", stats["n_alternative"], rate("alternative_rate")),
            ("fail", stats["n_fail"], rate("fail_rate")),
        ],
    )


class MarkdownReport:
    """Markdown renderers, one per pipeline, fed the same dict as report.json."""

    @staticmethod
    def ideation(report: Dict[str, Any]) -> List[str]:
        lines = ["# Ideation report", "", "## Corpus statistics", ""]
        lines += _stats_table(report["stats"])
        excluded = report.get("excluded", {})
        lines += ["", "Excluded cells: " + ", ".join(f"{k} {v}" for k, v in sorted(excluded.items()))]
        lines += [f"Leaked cells (counted as fail): {report.get('leaked', 0)}", ""]
        if report["frontier_stats"]["n_total"]:
            lines += ["## Frontier statistics", ""] + _stats_table(report["frontier_stats"]) + [""]
        lines += ["## Cells", ""]
        lines += _table(
            ("Paper", "Run", "Status", "Verdict", "Winner"),
            [
                (c["paper_id"], c["run_index"], c["status"], c["verdict"] or "-", c["winning_proposal_id"] or "-")
                for c in report["cells"]
            ],
        )
        insights = [(c["paper_id"], c["run_index"], c["core_insight"]) for c in report["cells"] if c.get("core_insight")]
        if insights:
            lines += ["", "## Core insights", ""]
            lines += [f"- {p} run {r}: {text}" for p, r, text in insights]
        return lines

    @staticmethod
    def panel(report: Dict[str, Any]) -> List[str]:
        lines = [f"# Panel review: {report['paper_id']}", "", "Topics: " + ", ".join(report["topics"]), ""]
        lines += _table(("Persona", "Name", "Kind"), [(p["id"], p["display_name"], p["kind"]) for p in report["panel"]])
        if report["failures"]:
            lines += ["", "## Failed reviews", ""]
            lines += [f"- {f['persona_id']}: {f['code']}: {f['message']}" for f in report["failures"]]
        if report["masterclass"]:
            lines += ["", "## Core insight", "", report["masterclass"]["core_insight"]]
        return lines

    @staticmethod
    def forge(report: Dict[str, Any]) -> List[str]:
        lines = [f"# Model construction: {report['paper_id']}", ""]
        lines += _table(
            ("Run", "Status", "Phase 1 loops", "Phase 2 loops", "Feasible", "Cause"),
            [
                (
                    r["run_index"], r["status"], r["loop_counts"]["phase1"], r["loop_counts"]["phase2"],
                    "-" if r["feasible"] is None else ("yes" if r["feasible"] else "no"), r["cause"] or "-",
                )
                for r in report["runs"]
            ],
        )
        pick = report["pick"]
        lines += ["", "## Pick", "", f"Chosen run: {pick['chosen_run_index']}", ""]
        lines += _table(
            ("Run", "Correctness", "Insight", "Combined"),
            [(k, s["correctness"], s["insight"], s["combined"]) for k, s in pick["rubric_scores"].items()],
        )
        lines += ["", pick["justification"] or "(no justification)"]
        return lines

    @staticmethod
    def funnel(report: Dict[str, Any]) -> List[str]:
        lines = ["# Evaluation funnel", ""]
        lines += _table(
            ("Tier", "Name", "Enabled", "Entered", "Passed"),
            [(t["tier"], t["name"], "yes" if t["enabled"] else "no", t["entered"], t["passed"]) for t in report["tiers"]],
        )
        failures = [d for d in report["decisions"] if not d["passed"]]
        if failures:
            lines += ["", "## Feedback", ""]
            lines += [f"- {d['candidate_id']} (tier {d['tier']}): {d['feedback']}" for d in failures]
        return lines


def emit_report(report: Dict[str, Any], fmt: str) -> str:
    """
    Render a pipeline report.

    Args:
        report: The pipeline's to_dict() (carries "pipeline" and "partial")
        fmt: "json" or "markdown"

    Returns:
        Document text

    Raises:
        ReportFormatError: unknown format
    """
    if fmt not in REPORT_FORMATS:
        raise ReportFormatError(f"unknown report format '{fmt}' (expected one of {', '.join(REPORT_FORMATS)})")
    if fmt == "json":
        return report_json(report)
    renderer = getattr(MarkdownReport, report["pipeline"])
    lines = []
    if report.get("partial"):
        lines += ["> **PARTIAL** - some items failed; see the failures recorded in report.json", ""]
    lines += renderer(report)
    warnings = report.get("warnings") or []
    if warnings:
        lines += ["", "## Warnings", ""] + [f"- {w}" for w in warnings]
    return "\n".join(lines) + "\n"


def report_artifacts(report: Dict[str, Any]) -> Dict[str, str]:
    """report.json and report.md under the pipeline directory."""
    pipeline = report["pipeline"]
    return {
        f"{pipeline}/report.json": emit_report(report, "json"),
        f"{pipeline}/report.md": emit_report(report, "markdown"),
    }
