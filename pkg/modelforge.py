"""
modelforge.py - Paper to Executable Performance Model

Three phases per run, each run independent:

PHASE 1 (specify):  specifier -> spec verifier -> (spec repairer -> verifier)...
PHASE 2 (implement): implementer -> sandbox run -> functional + directive
                     verifiers in parallel -> (code repairer -> rerun)...
PHASE 3 (interpret): structure, assumptions, findings and magic gaps

Both loops stop at max_iterations (never more than 3). A spec still
unapproved at the bound halts the run unless continue_unapproved is set.

ENSEMBLE:
run_forge() executes the pipeline three times and asks a selector agent to
score every run on correctness and insight (0-10 each). Failed runs score
zero and are never picked while any run succeeded; ties go to the lowest
run index.

ARTIFACTS (per run):
forge/run-N/{spec.json, model.src, execution.log, verifiers.json, interpretation.md}
forge/pick.json
"""

import json
import logging
import re
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from backend import AgentResponse, Backend, build_request, call_agent
from config import ForgeSettings
from errors import (
    ForgeFailed,
    GauntletError,
    Phase1Failed,
    Phase2Failed,
    Phase3Failed,
    PreconditionError,
)
from prompts import (
    SYSTEM_PROMPTS,
    code_repair_prompt,
    directive_verify_prompt,
    dump_spec,
    functional_verify_prompt,
    implement_prompt,
    interpret_prompt,
    selector_prompt,
    spec_prompt,
    spec_repair_prompt,
    spec_verify_prompt,
)
from response_parser import extract_code, extract_json, find_field, parse_bullets, parse_labelled, section_map
from sandbox import ExecutionResult, Sandbox

logger = logging.getLogger("gauntlet.forge")

MAX_ITERATIONS = 3
INTERPRETATION_SECTIONS = ("model structure", "assumptions", "findings", "magic gaps")

# Names a relationship may use without declaring them
KNOWN_FUNCTIONS = {
    "min", "max", "log", "log2", "log10", "ln", "exp", "sqrt", "ceil", "floor",
    "sum", "abs", "pow", "e", "pi", "if", "else", "and", "or", "not",
}

_SELECTOR_LINE = re.compile(
    r"RUN\s*(\d+)\s*[:\-]\s*CORRECTNESS\s*=\s*(\d+)\D+?INSIGHT\s*=\s*(\d+)", re.IGNORECASE
)


class VerifierId(Enum):
    SPEC = "spec"
    FUNCTIONAL = "functional"
    DIRECTIVE = "directive"


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Variable:
    symbol: str
    meaning: str
    units: str


@dataclass(frozen=True)
class Calibration:
    source: str
    values: Dict[str, Any]


@dataclass(frozen=True)
class ModelSpec:
    """Variables, equations, constraints and calibration data of one model."""
    paper_id: str
    variables: Tuple[Variable, ...]
    relationships: Tuple[str, ...]
    constraints: Tuple[str, ...] = ()
    calibration_data: Tuple[Calibration, ...] = ()

    def undeclared_symbols(self) -> List[str]:
        """Identifiers used in relationships but never declared (lexical check)."""
        declared = {v.symbol for v in self.variables}
        missing: List[str] = []
        for relation in self.relationships:
            for token in re.findall(r"[A-Za-z_][A-Za-z0-9_]*", relation):
                if token in declared or token.lower() in KNOWN_FUNCTIONS or token in missing:
                    continue
                missing.append(token)
        return missing

    def to_dict(self) -> Dict[str, Any]:
        return {
            "paper_id": self.paper_id,
            "variables": [{"symbol": v.symbol, "meaning": v.meaning, "units": v.units} for v in self.variables],
            "relationships": list(self.relationships),
            "constraints": list(self.constraints),
            "calibration_data": [{"source": c.source, "values": c.values} for c in self.calibration_data],
        }

    def to_json(self) -> str:
        return dump_spec(self.to_dict())

    @staticmethod
    def from_payload(paper_id: str, payload: Any) -> Optional["ModelSpec"]:
        """Spec from parsed JSON, or None when the shape is wrong."""
        if not isinstance(payload, dict):
            return None
        try:
            variables = tuple(
                Variable(str(v["symbol"]), str(v.get("meaning", "")), str(v.get("units", "")))
                for v in payload.get("variables", [])
            )
            relationships = tuple(str(r) for r in payload.get("relationships", []))
            constraints = tuple(str(c) for c in payload.get("constraints", []))
            calibration = tuple(
                Calibration(str(c.get("source", "")), dict(c.get("values", {})))
                for c in payload.get("calibration_data", [])
            )
        except (KeyError, TypeError, AttributeError, ValueError):
            return None
        if not variables or not relationships:
            return None
        return ModelSpec(paper_id, variables, relationships, constraints, calibration)


@dataclass(frozen=True)
class VerifierReport:
    verifier_id: VerifierId
    approved: bool
    issues: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.approved and self.issues:
            raise PreconditionError("an approving verifier report cannot list issues")

    def to_dict(self) -> Dict[str, Any]:
        return {"verifier_id": self.verifier_id.value, "approved": self.approved, "issues": list(self.issues)}


def parse_verifier(text: str, verifier_id: VerifierId) -> VerifierReport:
    """
    Verifier output to a report.

    Approval that still lists issues counts as rejection; a missing
    APPROVED line counts as rejection with an explanatory issue.
    """
    answer = (find_field(text, "APPROVED") or "").upper()
    issues_body = parse_labelled(text, ["ISSUES"]).get("ISSUES", "")
    issues = tuple(i for i in parse_bullets(issues_body) if i.lower() not in ("none", "n/a"))
    if answer.startswith("YES") and not issues:
        return VerifierReport(verifier_id, True)
    if not answer.startswith(("YES", "NO")):
        issues = issues or ("verifier output has no APPROVED line",)
    return VerifierReport(verifier_id, False, issues or ("rejected without a stated issue",))


@dataclass
class ModelArtifact:
    spec_id: str
    program_text: str
    execution: ExecutionResult

    @property
    def execution_report(self) -> str:
        return self.execution.log()


@dataclass
class Interpretation:
    text: str
    sections: Dict[str, str]
    feasible: bool

    @property
    def magic_gap(self) -> str:
        return self.sections.get("magic gaps", "")

    @property
    def magic_gap_none(self) -> bool:
        return "none identified" in self.magic_gap.lower()


@dataclass
class Phase1Result:
    spec: ModelSpec
    loop_count: int
    approved: bool
    reports: List[VerifierReport] = field(default_factory=list)


@dataclass
class Phase2Result:
    artifact: ModelArtifact
    loop_count: int
    approved: bool
    reports: List[Tuple[VerifierReport, VerifierReport]] = field(default_factory=list)


@dataclass
class ForgeRun:
    run_index: int
    spec: Optional[ModelSpec] = None
    artifact: Optional[ModelArtifact] = None
    interpretation: Optional[Interpretation] = None
    loop_counts: Tuple[int, int] = (0, 0)
    spec_reports: List[VerifierReport] = field(default_factory=list)
    code_reports: List[Tuple[VerifierReport, VerifierReport]] = field(default_factory=list)
    cause: str = ""

    @property
    def succeeded(self) -> bool:
        return not self.cause and self.interpretation is not None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_index": self.run_index,
            "status": "complete" if self.succeeded else "failed",
            "cause": self.cause,
            "loop_counts": {"phase1": self.loop_counts[0], "phase2": self.loop_counts[1]},
            "spec_approved": bool(self.spec_reports) and self.spec_reports[-1].approved,
            "model_approved": bool(self.code_reports) and all(r.approved for r in self.code_reports[-1]),
            "execution": self.artifact.execution.to_dict() if self.artifact else None,
            "feasible": self.interpretation.feasible if self.interpretation else None,
            "magic_gap": self.interpretation.magic_gap if self.interpretation else None,
        }

    def summary(self) -> str:
        """Condensed description handed to the selector."""
        if not self.succeeded:
            return f"FAILED: {self.cause}"
        return (
            f"SPECIFICATION:\n{self.spec.to_json()}\n\n"
            f"MODEL OUTPUT:\n{self.artifact.execution.stdout.strip()}\n\n"
            f"INTERPRETATION:\n{self.interpretation.text}"
        )


@dataclass(frozen=True)
class EnsemblePick:
    chosen_run_index: Optional[int]
    rubric_scores: Dict[int, Tuple[int, int]]
    justification: str

    def combined(self, run_index: int) -> int:
        correctness, insight = self.rubric_scores.get(run_index, (0, 0))
        return correctness + insight

    def to_dict(self) -> Dict[str, Any]:
        return {
            "chosen_run_index": self.chosen_run_index,
            "rubric_scores": {
                str(k): {"correctness": c, "insight": i, "combined": c + i}
                for k, (c, i) in sorted(self.rubric_scores.items())
            },
            "justification": self.justification,
        }


@dataclass
class ForgeOutcome:
    paper_id: str
    runs: List[ForgeRun]
    pick: EnsemblePick

    @property
    def partial(self) -> bool:
        return any(not run.succeeded for run in self.runs)

    @property
    def chosen(self) -> Optional[ForgeRun]:
        for run in self.runs:
            if run.run_index == self.pick.chosen_run_index:
                return run
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pipeline": "forge",
            "paper_id": self.paper_id,
            "partial": self.partial,
            "runs": [r.to_dict() for r in self.runs],
            "pick": self.pick.to_dict(),
        }

    def artifacts(self) -> Dict[str, str]:
        """Relative path -> file content for the run directory."""
        files: Dict[str, str] = {}
        for run in self.runs:
            base = f"forge/run-{run.run_index}"
            if run.spec:
                files[f"{base}/spec.json"] = run.spec.to_json() + "\n"
            if run.artifact:
                files[f"{base}/model.src"] = run.artifact.program_text
                files[f"{base}/execution.log"] = run.artifact.execution_report
            verifiers = {
                "phase1": [r.to_dict() for r in run.spec_reports],
                "phase2": [[f.to_dict(), d.to_dict()] for f, d in run.code_reports],
            }
            files[f"{base}/verifiers.json"] = json.dumps(verifiers, indent=2, sort_keys=True) + "\n"
            if run.interpretation:
                files[f"{base}/interpretation.md"] = run.interpretation.text.strip() + "\n"
        files["forge/pick.json"] = json.dumps(self.pick.to_dict(), indent=2, sort_keys=True) + "\n"
        return files


# ---------------------------------------------------------------------------
# Phase 1
# ---------------------------------------------------------------------------

def _specify(paper_text: str, backend: Backend, paper_id: str, tag: str) -> ModelSpec:
    reason: Optional[str] = None
    for attempt in (1, 2):
        text = call_agent(
            backend, "forge.specifier", SYSTEM_PROMPTS["forge.specifier"],
            spec_prompt(paper_text, reason), request_tag=f"{tag}/specify/{attempt}",
        )
        spec = ModelSpec.from_payload(paper_id, extract_json(text))
        if spec:
            return spec
        reason = "no JSON object with variables and relationships"
    raise Phase1Failed(f"{paper_id}: specification unparseable")


def _repair_spec(spec: ModelSpec, issues: Sequence[str], paper_text: str, backend: Backend, tag: str) -> ModelSpec:
    for attempt in (1, 2):
        text = call_agent(
            backend, "forge.spec-repairer", SYSTEM_PROMPTS["forge.spec-repairer"],
            spec_repair_prompt(spec.to_json(), issues, paper_text), request_tag=f"{tag}/{attempt}",
        )
        repaired = ModelSpec.from_payload(spec.paper_id, extract_json(text))
        if repaired:
            return repaired
    raise Phase1Failed(f"{spec.paper_id}: repaired specification unparseable")


def phase1_specify(
    paper_text: str,
    backend: Backend,
    paper_id: str = "paper",
    max_iterations: int = MAX_ITERATIONS,
    tag: str = "",
) -> Phase1Result:
    """
    Specify, then verify and repair until approved or the bound is hit.

    A spec that references undeclared symbols is never approved, whatever
    the verifier says.

    Returns:
        Phase1Result; approved=False after the bound is a result, not an error

    Raises:
        Phase1Failed: specification output unparseable after one re-prompt
    """
    if not paper_text.strip():
        raise PreconditionError("paper text is empty")
    max_iterations = min(max_iterations, MAX_ITERATIONS)
    tag = tag or paper_id
    spec = _specify(paper_text, backend, paper_id, tag)
    reports: List[VerifierReport] = []
    for iteration in range(1, max_iterations + 1):
        text = call_agent(
            backend, "forge.spec-verifier", SYSTEM_PROMPTS["forge.spec-verifier"],
            spec_verify_prompt(spec.to_json(), paper_text), request_tag=f"{tag}/spec-verify/{iteration}",
        )
        report = parse_verifier(text, VerifierId.SPEC)
        undeclared = spec.undeclared_symbols()
        if undeclared:
            lexical = f"relationships use undeclared symbols: {', '.join(undeclared)}"
            report = VerifierReport(VerifierId.SPEC, False, report.issues + (lexical,))
        reports.append(report)
        if report.approved:
            return Phase1Result(spec, iteration, True, reports)
        if iteration == max_iterations:
            break
        spec = _repair_spec(spec, report.issues, paper_text, backend, f"{tag}/spec-repair/{iteration}")
    logger.info("%s: specification not approved after %d iterations", tag, max_iterations)
    return Phase1Result(spec, max_iterations, False, reports)


# ---------------------------------------------------------------------------
# Phase 2
# ---------------------------------------------------------------------------

def _program_from(text: str) -> Optional[str]:
    program = extract_code(text, "python")
    if program and program.strip():
        return program if program.endswith("\n") else program + "\n"
    return None


def _implement(spec: ModelSpec, backend: Backend, tag: str) -> str:
    reason: Optional[str] = None
    for attempt in (1, 2):
        text = call_agent(
            backend, "forge.implementer", SYSTEM_PROMPTS["forge.implementer"],
            implement_prompt(spec.to_json(), reason), request_tag=f"{tag}/implement/{attempt}",
        )
        program = _program_from(text)
        if program:
            return program
        reason = "no ```python block"
    raise Phase2Failed(f"{spec.paper_id}: program text unparseable")


def _repair_program(spec: ModelSpec, program: str, issues: Sequence[str], backend: Backend, tag: str) -> str:
    for attempt in (1, 2):
        text = call_agent(
            backend, "forge.code-repairer", SYSTEM_PROMPTS["forge.code-repairer"],
            code_repair_prompt(spec.to_json(), program, issues), request_tag=f"{tag}/{attempt}",
        )
        repaired = _program_from(text)
        if repaired:
            return repaired
    raise Phase2Failed(f"{spec.paper_id}: repaired program unparseable")


def _verify_program(
    spec: ModelSpec,
    program: str,
    execution: ExecutionResult,
    backend: Backend,
    tag: str,
) -> Tuple[VerifierReport, VerifierReport]:
    """Both verifiers, issued together and judged concurrently."""
    requests = [
        build_request(
            backend, "forge.functional-verifier", SYSTEM_PROMPTS["forge.functional-verifier"],
            functional_verify_prompt(spec.to_json(), program, execution.log()), request_tag=f"{tag}/functional",
        ),
        build_request(
            backend, "forge.directive-verifier", SYSTEM_PROMPTS["forge.directive-verifier"],
            directive_verify_prompt(program), request_tag=f"{tag}/directive",
        ),
    ]
    reports = []
    for verifier_id, result in zip((VerifierId.FUNCTIONAL, VerifierId.DIRECTIVE), backend.complete_all(requests)):
        if isinstance(result, AgentResponse):
            reports.append(parse_verifier(result.text, verifier_id))
        else:
            reports.append(VerifierReport(verifier_id, False, (f"verifier unavailable: {result}",)))
    functional, directive = reports

    if not execution.ok:
        problem = (
            "program exceeded the wall-clock limit (timeout)"
            if execution.timed_out
            else f"program crashed with exit status {execution.returncode}"
        )
        functional = VerifierReport(VerifierId.FUNCTIONAL, False, (problem,) + functional.issues)
    return functional, directive


def phase2_implement(
    spec: ModelSpec,
    backend: Backend,
    sandbox: Sandbox,
    workdir: Path,
    spec_approved: bool = True,
    override: bool = False,
    max_iterations: int = MAX_ITERATIONS,
    tag: str = "",
) -> Phase2Result:
    """
    Implement, execute, verify and repair until both verifiers approve.

    Raises:
        PreconditionError: spec not approved and no override
        Phase2Failed: program text unparseable after one re-prompt
    """
    if not spec_approved and not override:
        raise PreconditionError(f"{spec.paper_id}: specification not approved")
    max_iterations = min(max_iterations, MAX_ITERATIONS)
    tag = tag or spec.paper_id
    program = _implement(spec, backend, tag)
    reports: List[Tuple[VerifierReport, VerifierReport]] = []
    execution: Optional[ExecutionResult] = None
    for iteration in range(1, max_iterations + 1):
        execution = sandbox.run(program, Path(workdir))
        functional, directive = _verify_program(spec, program, execution, backend, f"{tag}/verify/{iteration}")
        reports.append((functional, directive))
        artifact = ModelArtifact(spec.paper_id, program, execution)
        if functional.approved and directive.approved:
            return Phase2Result(artifact, iteration, True, reports)
        if iteration == max_iterations:
            break
        issues = list(functional.issues) + list(directive.issues)
        program = _repair_program(spec, program, issues, backend, f"{tag}/code-repair/{iteration}")
    logger.info("%s: model not approved after %d iterations", tag, max_iterations)
    return Phase2Result(ModelArtifact(spec.paper_id, program, execution), max_iterations, False, reports)


# ---------------------------------------------------------------------------
# Phase 3
# ---------------------------------------------------------------------------

def phase3_interpret(
    artifact: ModelArtifact,
    spec: ModelSpec,
    backend: Backend,
    paper_text: str = "",
    tag: str = "",
) -> Interpretation:
    """
    Explain the model and its gaps against the paper's claims.

    Raises:
        PreconditionError: the artifact did not execute successfully
        Phase3Failed: a required section is missing after one re-prompt
    """
    if not artifact.execution.ok:
        raise PreconditionError(f"{spec.paper_id}: model did not execute successfully")
    tag = tag or spec.paper_id
    reason: Optional[str] = None
    for attempt in (1, 2):
        text = call_agent(
            backend, "forge.interpreter", SYSTEM_PROMPTS["forge.interpreter"],
            interpret_prompt(spec.to_json(), artifact.program_text, artifact.execution.stdout, paper_text, reason),
            request_tag=f"{tag}/interpret/{attempt}",
        )
        sections = section_map(text)
        missing = [name for name in INTERPRETATION_SECTIONS if name not in sections]
        if not missing:
            verdict = (find_field(text, "FEASIBILITY") or "").upper()
            feasible = not verdict.startswith("INFEASIBLE")
            return Interpretation(text.strip(), sections, feasible)
        reason = "missing sections: " + ", ".join(missing)
    raise Phase3Failed(f"{spec.paper_id}: interpretation {reason}")


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------

def parse_rubric(text: str, run_indices: Sequence[int]) -> Dict[int, Tuple[int, int]]:
    """Selector lines "RUN k: CORRECTNESS=a INSIGHT=b"; out-of-range scores are dropped."""
    scores: Dict[int, Tuple[int, int]] = {}
    for match in _SELECTOR_LINE.finditer(text or ""):
        index, correctness, insight = (int(g) for g in match.groups())
        if index in run_indices and index not in scores and 0 <= correctness <= 10 and 0 <= insight <= 10:
            scores[index] = (correctness, insight)
    return scores


def select_run(runs: Sequence[ForgeRun], scores: Dict[int, Tuple[int, int]], justification: str) -> EnsemblePick:
    """
    Highest combined score among successful runs; ties to the lowest index.

    Failed runs are forced to zero. With no successful run the pick is None.
    """
    rubric = {}
    for run in runs:
        rubric[run.run_index] = scores.get(run.run_index, (0, 0)) if run.succeeded else (0, 0)
    eligible = sorted(r.run_index for r in runs if r.succeeded)
    if not eligible:
        return EnsemblePick(None, rubric, "no run succeeded")
    chosen = min(eligible, key=lambda k: (-(rubric[k][0] + rubric[k][1]), k))
    return EnsemblePick(chosen, rubric, justification)


def _run_once(
    run_index: int,
    paper_text: str,
    backend: Backend,
    sandbox: Sandbox,
    settings: ForgeSettings,
    paper_id: str,
    workdir: Path,
) -> ForgeRun:
    run = ForgeRun(run_index)
    tag = f"{paper_id}/run-{run_index}"
    try:
        phase1 = phase1_specify(paper_text, backend, paper_id, settings.max_iterations, tag)
        run.spec, run.spec_reports = phase1.spec, phase1.reports
        run.loop_counts = (phase1.loop_count, 0)
        if not phase1.approved and not settings.continue_unapproved:
            run.cause = f"specification not approved after {phase1.loop_count} iterations"
            return run

        phase2 = phase2_implement(
            phase1.spec, backend, sandbox, workdir / f"run-{run_index}",
            spec_approved=phase1.approved, override=settings.continue_unapproved,
            max_iterations=settings.max_iterations, tag=tag,
        )
        run.artifact, run.code_reports = phase2.artifact, phase2.reports
        run.loop_counts = (phase1.loop_count, phase2.loop_count)
        if not phase2.approved and not settings.continue_unapproved:
            run.cause = f"model not approved after {phase2.loop_count} iterations"
            return run
        if not phase2.artifact.execution.ok:
            run.cause = f"model did not execute ({phase2.artifact.execution.summary()})"
            return run

        run.interpretation = phase3_interpret(phase2.artifact, phase1.spec, backend, paper_text, tag)
    except GauntletError as e:
        logger.warning("%s failed: %s", tag, e)
        run.cause = f"{e.code}: {e}"
    return run


def run_forge(
    paper_text: str,
    backend: Backend,
    sandbox: Sandbox,
    settings: Optional[ForgeSettings] = None,
    paper_id: str = "paper",
    workdir: Optional[Path] = None,
) -> ForgeOutcome:
    """
    Run the full pipeline independently `settings.runs` times and pick one.

    Args:
        paper_text: Source document
        backend: Agent backend
        sandbox: Program executor
        settings: Forge settings (defaults when None)
        paper_id: Identifier for specs and tags
        workdir: Scratch directory for executions (a temporary one if None)

    Returns:
        ForgeOutcome with every run and the ensemble pick

    Raises:
        SandboxUnavailable: sandbox pre-flight failed (before any model call)
        ForgeFailed: every run failed
    """
    settings = settings or ForgeSettings()
    sandbox.preflight()

    with tempfile.TemporaryDirectory(prefix="forge-") as scratch:
        base = Path(workdir) if workdir else Path(scratch)
        with ThreadPoolExecutor(max_workers=settings.runs) as pool:
            futures = [
                pool.submit(_run_once, k, paper_text, backend, sandbox, settings, paper_id, base)
                for k in range(1, settings.runs + 1)
            ]
            runs = [f.result() for f in futures]

    if not any(r.succeeded for r in runs):
        raise ForgeFailed([r.cause for r in runs])

    succeeded = [r for r in runs if r.succeeded]
    justification = ""
    scores: Dict[int, Tuple[int, int]] = {}
    try:
        text = call_agent(
            backend, "forge.selector", SYSTEM_PROMPTS["forge.selector"],
            selector_prompt([
                {"index": r.run_index, "status": "complete" if r.succeeded else "failed", "summary": r.summary()}
                for r in runs
            ]),
            request_tag=f"{paper_id}/select",
        )
        scores = parse_rubric(text, [r.run_index for r in succeeded])
        justification = find_field(text, "JUSTIFICATION") or ""
    except GauntletError as e:
        logger.warning("%s: selector unavailable (%s)", paper_id, e.code)
    if not scores:
        justification = "selector output unusable; lowest successful run chosen"

    pick = select_run(runs, scores, justification)
    logger.info("%s: picked run %s", paper_id, pick.chosen_run_index)
    return ForgeOutcome(paper_id, runs, pick)
