"""
ideation.py - Problem-to-Mechanism Ideation Pipeline

Each (paper, run) cell goes through:

1. EXTRACT   - problem window only -> canonical ProblemStatement
2. QC        - generality score 1-10, one repair pass below threshold
3. LEAKAGE   - lexical n-gram overlap with the rest of the paper + judge call
4. GENERATE  - n independent architect proposals over a temperature ladder
5. VALIDATE  - dual-axis judgment against the full paper; verdict computed locally
6. EXPAND    - Vertical / Lateral / Foundational follow-on problems

Expansions shallower than recursion_depth are fed back in as frontier
problems: generated and judged on quality alone (there is no reference
solution), then expanded again. Frontier results are reported separately
and never enter the corpus statistics.

CELL OUTCOMES:
- complete:          counted; verdict = best verdict among its proposals
- extraction-failed: recorded, excluded from the denominator
- leaked:            counted as FAIL; generation never runs
Generation or validation failures inside a complete cell count as FAIL.
"""

import dataclasses
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

from backend import Backend, call_agent
from config import DEFAULT_PROBLEM_WINDOW, IdeationSettings
from errors import (
    ExpansionFailed,
    ExtractionFailed,
    GauntletError,
    GenerationFailed,
    PreconditionError,
    QCFailed,
    ValidationFailed,
)
from kernel import (
    ExpansionMode,
    Lineage,
    MechanismProposal,
    ProblemSource,
    ProblemStatement,
    QualityClass,
    RunStats,
    SimilarityClass,
    Verdict,
    aggregate_stats,
    best_verdict,
    classify_verdict,
)
from prompts import (
    SYSTEM_PROMPTS,
    architect_prompt,
    expansion_prompt,
    expansion_role,
    extraction_prompt,
    frontier_validator_prompt,
    leakage_prompt,
    qc_prompt,
    repair_prompt,
    validator_prompt,
)
from response_parser import find_field, has_digit, parse_enum, parse_int, parse_labelled

logger = logging.getLogger("gauntlet.ideation")

PROBLEM_LABELS = ["CONTEXT", "SYMPTOM", "CONSTRAINT"]
PROPOSAL_LABELS = {
    "TITLE OF PAPER": "title",
    "TITLE": "title",
    "THE MECHANISM": "mechanism",
    "MECHANISM": "mechanism",
    "WHY IT WORKS": "rationale",
    "RATIONALE": "rationale",
    "EVALUATION PLAN": "evaluation_plan",
}
SIMILARITY_ALIASES = {
    "EXACT": SimilarityClass.EXACT_MATCH,
    "FUNCTIONALLY_EQUIVALENT": SimilarityClass.FUNCTIONAL_EQUIVALENT,
    "DIFFERENT": SimilarityClass.DIFFERENT_APPROACH,
}
QUALITY_ALIASES = {
    "NAIVE": QualityClass.FLAWED,
    "ISCA": QualityClass.ISCA_WORTHY,
}

STATUS_COMPLETE = "complete"
STATUS_EXTRACTION_FAILED = "extraction-failed"
STATUS_LEAKED = "leaked"


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtractionInput:
    """One paper as seen by the ideation pipeline."""
    paper_id: str
    text: str
    problem_window: int = DEFAULT_PROBLEM_WINDOW
    ground_truth_available: bool = True

    def __post_init__(self):
        if not self.text:
            raise PreconditionError(f"{self.paper_id}: paper text is empty")
        if not 0 < self.problem_window <= len(self.text):
            raise PreconditionError(
                f"{self.paper_id}: problem_window {self.problem_window} outside 1..{len(self.text)}"
            )

    @property
    def window_text(self) -> str:
        return self.text[:self.problem_window]

    @property
    def solution_text(self) -> str:
        """Everything past the window, treated as potentially solution-bearing."""
        return self.text[self.problem_window:]

    @staticmethod
    def from_entry(entry) -> "ExtractionInput":
        """Build from a store.CorpusEntry; the window is clamped to short papers."""
        text = Path(entry.text_path).read_text(encoding="utf-8")
        window = min(entry.problem_window, len(text))
        return ExtractionInput(entry.paper_id, text, window, entry.ground_truth_available)


@dataclass(frozen=True)
class GeneralityReport:
    score: int
    critique: str
    repaired: bool
    below_threshold: bool = False
    initial_score: Optional[int] = None

    def __post_init__(self):
        if not 1 <= self.score <= 10:
            raise PreconditionError(f"generality score {self.score} outside [1, 10]")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class LeakReport:
    """Result of the two-stage leakage check."""
    lexical_evidence: Tuple[str, ...] = ()
    judge_reveals: Optional[bool] = None
    judge_evidence: str = ""
    warning: str = ""

    @property
    def leaked(self) -> bool:
        return bool(self.lexical_evidence) or bool(self.judge_reveals)

    @property
    def status(self) -> str:
        return "leaked" if self.leaked else "clean"

    def to_dict(self) -> Dict[str, Any]:
        stages = []
        if self.lexical_evidence:
            stages.append("lexical")
        if self.judge_reveals:
            stages.append("judge")
        return {
            "status": self.status,
            "flagged_by": stages,
            "lexical_evidence": list(self.lexical_evidence),
            "judge_reveals": self.judge_reveals,
            "judge_evidence": self.judge_evidence,
            "warning": self.warning,
        }


@dataclass(frozen=True)
class ValidationJudgment:
    """Dual-axis judgment. The verdict is always derived, never stored."""
    proposal_id: str
    similarity: SimilarityClass
    quality: QualityClass
    justification: str

    @property
    def verdict(self) -> Verdict:
        return classify_verdict(self.similarity, self.quality)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "proposal_id": self.proposal_id,
            "similarity": self.similarity.value,
            "quality": self.quality.value,
            "verdict": self.verdict.value,
            "justification": self.justification,
        }


@dataclass(frozen=True)
class FrontierExpansion:
    parent_problem_id: str
    mode: ExpansionMode
    new_problem: ProblemStatement

    def __post_init__(self):
        if self.new_problem.lineage != Lineage(self.parent_problem_id, self.mode):
            raise PreconditionError("expansion lineage must name its parent and mode")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "parent_problem_id": self.parent_problem_id,
            "mode": self.mode.value,
            "new_problem": self.new_problem.to_dict(),
        }


@dataclass(frozen=True)
class FailureRecord:
    """A per-item failure that the pipeline recorded instead of raising."""
    stage: str
    code: str
    message: str
    item: str = ""

    @staticmethod
    def of(stage: str, error: GauntletError, item: str = "") -> "FailureRecord":
        return FailureRecord(stage, error.code, str(error), item)

    def to_dict(self) -> Dict[str, str]:
        return dataclasses.asdict(self)


@dataclass
class GenerationOutcome:
    proposals: List[MechanismProposal] = field(default_factory=list)
    failures: List[FailureRecord] = field(default_factory=list)


@dataclass
class ExpansionOutcome:
    expansions: List[FrontierExpansion] = field(default_factory=list)
    failures: List[FailureRecord] = field(default_factory=list)


def _best(judgments: Sequence[ValidationJudgment]) -> Optional[ValidationJudgment]:
    """First judgment (slot order) holding the best verdict."""
    if not judgments:
        return None
    top = best_verdict(j.verdict for j in judgments)
    return next(j for j in judgments if j.verdict is top)


@dataclass
class FrontierResult:
    """Generate-judge-expand pass over one enqueued expansion."""
    problem: ProblemStatement
    depth: int
    proposals: List[MechanismProposal] = field(default_factory=list)
    judgments: List[ValidationJudgment] = field(default_factory=list)
    expansions: List[FrontierExpansion] = field(default_factory=list)
    failures: List[FailureRecord] = field(default_factory=list)

    @property
    def verdict(self) -> Verdict:
        best = _best(self.judgments)
        return best.verdict if best else Verdict.FAIL

    def to_dict(self) -> Dict[str, Any]:
        return {
            "problem": self.problem.to_dict(),
            "depth": self.depth,
            "verdict": self.verdict.value,
            "proposals": [p.to_dict() for p in self.proposals],
            "judgments": [j.to_dict() for j in self.judgments],
            "expansions": [e.to_dict() for e in self.expansions],
            "failures": [f.to_dict() for f in self.failures],
        }


@dataclass
class CellResult:
    """Everything one (paper, run) cell produced."""
    paper_id: str
    run_index: int
    status: str = STATUS_COMPLETE
    problem: Optional[ProblemStatement] = None
    generality: Optional[GeneralityReport] = None
    leak: Optional[LeakReport] = None
    proposals: List[MechanismProposal] = field(default_factory=list)
    judgments: List[ValidationJudgment] = field(default_factory=list)
    expansions: List[FrontierExpansion] = field(default_factory=list)
    frontier: List[FrontierResult] = field(default_factory=list)
    failures: List[FailureRecord] = field(default_factory=list)
    core_insight: Optional[str] = None

    @property
    def counted(self) -> bool:
        return self.status != STATUS_EXTRACTION_FAILED

    @property
    def winning_judgment(self) -> Optional[ValidationJudgment]:
        return _best(self.judgments)

    @property
    def verdict(self) -> Verdict:
        best = self.winning_judgment
        return best.verdict if best else Verdict.FAIL

    @property
    def winner(self) -> Optional[MechanismProposal]:
        best = self.winning_judgment
        if best is None:
            return None
        return next(p for p in self.proposals if p.id == best.proposal_id)

    def to_dict(self) -> Dict[str, Any]:
        best = self.winning_judgment
        return {
            "paper_id": self.paper_id,
            "run_index": self.run_index,
            "status": self.status,
            "verdict": self.verdict.value if self.counted else None,
            "winning_proposal_id": best.proposal_id if best else None,
            "problem": self.problem.to_dict() if self.problem else None,
            "generality": self.generality.to_dict() if self.generality else None,
            "leak": self.leak.to_dict() if self.leak else None,
            "proposals": [p.to_dict() for p in self.proposals],
            "judgments": [j.to_dict() for j in self.judgments],
            "expansions": [e.to_dict() for e in self.expansions],
            "frontier": [f.to_dict() for f in self.frontier],
            "failures": [f.to_dict() for f in self.failures],
            "core_insight": self.core_insight,
        }


@dataclass
class IdeationReport:
    cells: List[CellResult]
    warnings: List[str] = field(default_factory=list)

    @property
    def stats(self) -> RunStats:
        return aggregate_stats(c.verdict for c in self.cells if c.counted)

    @property
    def frontier_stats(self) -> RunStats:
        return aggregate_stats(f.verdict for c in self.cells for f in c.frontier)

    @property
    def partial(self) -> bool:
        return any(c.status == STATUS_EXTRACTION_FAILED for c in self.cells)

    @property
    def excluded(self) -> Dict[str, int]:
        return {STATUS_EXTRACTION_FAILED: sum(1 for c in self.cells if not c.counted)}

    @property
    def leaked(self) -> int:
        return sum(1 for c in self.cells if c.status == STATUS_LEAKED)

    def candidates(self) -> List[Dict[str, Any]]:
        """Every generated proposal with its problem, for the funnel."""
        rows = []
        for cell in self.cells:
            for proposal in cell.proposals:
                rows.append({"proposal": proposal.to_dict(), "problem": cell.problem.to_dict()})
            for result in cell.frontier:
                for proposal in result.proposals:
                    rows.append({"proposal": proposal.to_dict(), "problem": result.problem.to_dict()})
        return rows

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pipeline": "ideation",
            "partial": self.partial,
            "stats": self.stats.to_dict(),
            "excluded": self.excluded,
            "leaked": self.leaked,
            "frontier_stats": self.frontier_stats.to_dict(),
            "warnings": list(self.warnings),
            "cells": [c.to_dict() for c in self.cells],
        }


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------

def _parse_problem_fields(text: str) -> Tuple[Optional[Dict[str, str]], str]:
    """Canonical fields from model text, or (None, reason)."""
    fields = parse_labelled(text, PROBLEM_LABELS)
    missing = [label for label in PROBLEM_LABELS if label not in fields]
    if missing:
        return None, "missing " + ", ".join(f"[{m}]" for m in missing)
    if not has_digit(fields["SYMPTOM"]):
        return None, "[SYMPTOM] carries no quantitative evidence"
    return {
        "context": fields["CONTEXT"],
        "symptom": fields["SYMPTOM"],
        "constraint": fields["CONSTRAINT"],
    }, ""


def _parse_proposal_fields(text: str) -> Tuple[Optional[Dict[str, str]], str]:
    raw = parse_labelled(text, list(PROPOSAL_LABELS))
    fields: Dict[str, str] = {}
    for label, name in PROPOSAL_LABELS.items():
        if label in raw and name not in fields:
            fields[name] = raw[label]
    missing = [n for n in ("title", "mechanism", "rationale", "evaluation_plan") if n not in fields]
    if missing:
        return None, "missing " + ", ".join(missing)
    return fields, ""


def _words(text: str) -> List[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def shared_ngrams(text: str, reference: str, n: int) -> List[str]:
    """
    Word n-grams of `text` that also occur in `reference`.

    Tokens are lower-cased alphanumeric runs, so punctuation and spacing
    differences do not hide a verbatim copy.
    """
    words = _words(text)
    ref_words = _words(reference)
    if len(words) < n or len(ref_words) < n:
        return []
    ref_grams: Set[Tuple[str, ...]] = {tuple(ref_words[i:i + n]) for i in range(len(ref_words) - n + 1)}
    found: List[str] = []
    seen: Set[Tuple[str, ...]] = set()
    for i in range(len(words) - n + 1):
        gram = tuple(words[i:i + n])
        if gram in ref_grams and gram not in seen:
            seen.add(gram)
            found.append(" ".join(gram))
    return found


def _tag(*parts: Any) -> str:
    return "/".join(str(p) for p in parts)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def extract_problem(
    source: ExtractionInput,
    backend: Backend,
    run_index: int = 1,
    temperature: float = 0.0,
) -> ProblemStatement:
    """
    Extract the canonical problem from the problem window.

    Only source.window_text is placed in the prompt.

    Raises:
        ExtractionFailed: output unparseable after one re-prompt
    """
    reason: Optional[str] = None
    for attempt in (1, 2):
        text = call_agent(
            backend,
            "extractor",
            SYSTEM_PROMPTS["extractor"],
            extraction_prompt(source.window_text, reason),
            temperature=temperature,
            request_tag=_tag(source.paper_id, run_index, "extract", attempt),
        )
        fields, reason = _parse_problem_fields(text)
        if fields:
            return ProblemStatement(
                id=f"{source.paper_id}-r{run_index}",
                source=ProblemSource.PAPER_EXTRACTION,
                **fields,
            )
        logger.info("%s run %d: extraction attempt %d unusable (%s)", source.paper_id, run_index, attempt, reason)
    raise ExtractionFailed(f"{source.paper_id}: {reason}")


def _score(problem: ProblemStatement, backend: Backend, tag: str) -> Tuple[int, str]:
    text = call_agent(backend, "generality-qc", SYSTEM_PROMPTS["generality-qc"], qc_prompt(problem), request_tag=tag)
    score = parse_int(text, "SCORE", 1, 10)
    if score is None:
        raise QCFailed(f"{problem.id}: generality score unparseable")
    return score, find_field(text, "CRITIQUE") or ""


def qc_generality(
    problem: ProblemStatement,
    backend: Backend,
    threshold: int = 7,
) -> Tuple[ProblemStatement, GeneralityReport]:
    """
    Score generality; below threshold, repair once and re-score.

    Returns:
        (final problem with generality_score set, report of the final score)

    Raises:
        QCFailed: a score or the repaired problem is unparseable
    """
    score, critique = _score(problem, backend, _tag(problem.id, "qc", 1))
    if score >= threshold:
        return dataclasses.replace(problem, generality_score=score), GeneralityReport(score, critique, repaired=False)

    logger.info("%s: generality %d below %d, repairing", problem.id, score, threshold)
    text = call_agent(
        backend,
        "generality-repair",
        SYSTEM_PROMPTS["generality-repair"],
        repair_prompt(problem, critique),
        request_tag=_tag(problem.id, "repair"),
    )
    fields, reason = _parse_problem_fields(text)
    if not fields:
        raise QCFailed(f"{problem.id}: repaired problem unparseable ({reason})")
    repaired = dataclasses.replace(problem, **fields)
    final, final_critique = _score(repaired, backend, _tag(problem.id, "qc", 2))
    report = GeneralityReport(
        score=final,
        critique=final_critique,
        repaired=True,
        below_threshold=final < threshold,
        initial_score=score,
    )
    return dataclasses.replace(repaired, generality_score=final), report


def check_leakage(
    problem: ProblemStatement,
    full_text: str,
    backend: Backend,
    problem_window: int = DEFAULT_PROBLEM_WINDOW,
    ngram: int = 8,
) -> LeakReport:
    """
    Two-stage leak check against everything past the problem window.

    A judge failure never raises; the report falls back to the lexical
    result and carries a warning.
    """
    solution_text = full_text[problem_window:]
    problem_text = " ".join((problem.context, problem.symptom, problem.constraint))
    lexical = tuple(shared_ngrams(problem_text, solution_text, ngram)[:5])

    if not solution_text.strip():
        return LeakReport(lexical_evidence=lexical, warning="no text past the problem window; judge skipped")

    try:
        text = call_agent(
            backend,
            "leakage-judge",
            SYSTEM_PROMPTS["leakage-judge"],
            leakage_prompt(problem, solution_text),
            request_tag=_tag(problem.id, "leak"),
        )
    except GauntletError as e:
        logger.warning("%s: leakage judge failed (%s); lexical check only", problem.id, e.code)
        return LeakReport(lexical_evidence=lexical, warning=f"judge unavailable ({e.code}); lexical check only")

    answer = (find_field(text, "REVEALS") or "").strip().upper()
    if answer.startswith("YES"):
        reveals = True
    elif answer.startswith("NO"):
        reveals = False
    else:
        logger.warning("%s: leakage judge answer unparseable; lexical check only", problem.id)
        return LeakReport(lexical_evidence=lexical, warning="judge answer unparseable; lexical check only")
    evidence = find_field(text, "EVIDENCE") or ""
    return LeakReport(lexical_evidence=lexical, judge_reveals=reveals, judge_evidence=evidence if reveals else "")


def generate_mechanisms(
    problem: ProblemStatement,
    n: int,
    temps: Sequence[float],
    backend: Backend,
    variants: Sequence[str] = (),
    feedback: Sequence[str] = (),
    tag: str = "",
) -> GenerationOutcome:
    """
    Generate n independent proposals, one per temperature.

    Each slot sees only the rendered problem (plus an optional focus
    variant and funnel feedback); no slot sees another slot's output.

    Args:
        problem: Clean-room problem
        n: Number of proposals
        temps: One temperature per slot
        backend: Agent backend
        variants: Optional focus angles, assigned to slots round-robin
        feedback: Known failure modes for this problem
        tag: Transcript tag prefix

    Returns:
        GenerationOutcome; an unparseable slot becomes a failure record
    """
    if len(temps) != n:
        raise PreconditionError(f"{len(temps)} temperatures for {n} proposals")
    outcome = GenerationOutcome()
    for slot, temperature in enumerate(temps, 1):
        focus = variants[(slot - 1) % len(variants)] if variants else None
        reason: Optional[str] = None
        fields = None
        try:
            for attempt in (1, 2):
                text = call_agent(
                    backend,
                    "architect",
                    SYSTEM_PROMPTS["architect"],
                    architect_prompt(problem, focus, feedback, reason),
                    temperature=temperature,
                    request_tag=_tag(tag or problem.id, "m", slot, attempt),
                )
                fields, reason = _parse_proposal_fields(text)
                if fields:
                    break
            if not fields:
                raise GenerationFailed(f"{problem.id} slot {slot}: {reason}")
        except GauntletError as e:
            logger.info("%s slot %d failed: %s", problem.id, slot, e)
            outcome.failures.append(FailureRecord.of("generation", e, f"{problem.id}-m{slot}"))
            continue
        outcome.proposals.append(
            MechanismProposal(
                id=f"{problem.id}-m{slot}",
                problem_id=problem.id,
                temperature=temperature,
                **fields,
            )
        )
    return outcome


def validate_proposal(
    proposal: MechanismProposal,
    ground_truth: str,
    backend: Backend,
    problem: Optional[ProblemStatement] = None,
) -> ValidationJudgment:
    """
    Judge a proposal against the full paper on both axes.

    Any verdict the model writes is ignored; the stored verdict is derived
    from the parsed axes.

    Raises:
        ValidationFailed: axis labels unparseable after one re-prompt
    """
    if problem is None:
        raise PreconditionError(f"{proposal.id}: validation needs the problem it answers")
    if not ground_truth.strip():
        raise PreconditionError(f"{proposal.id}: no ground truth text")
    reason: Optional[str] = None
    for attempt in (1, 2):
        text = call_agent(
            backend,
            "validator",
            SYSTEM_PROMPTS["validator"],
            validator_prompt(proposal, problem, ground_truth, reason),
            request_tag=_tag(proposal.id, "validate", attempt),
        )
        similarity = parse_enum(text, "SIMILARITY", SimilarityClass, SIMILARITY_ALIASES)
        quality = parse_enum(text, "QUALITY", QualityClass, QUALITY_ALIASES)
        if similarity and quality:
            return ValidationJudgment(proposal.id, similarity, quality, find_field(text, "JUSTIFICATION") or "")
        reason = "SIMILARITY and QUALITY labels are required"
    raise ValidationFailed(f"{proposal.id}: axis labels unparseable")


def validate_frontier(proposal: MechanismProposal, problem: ProblemStatement, backend: Backend) -> ValidationJudgment:
    """Quality-only judgment for problems with no reference solution."""
    reason: Optional[str] = None
    for attempt in (1, 2):
        text = call_agent(
            backend,
            "frontier-validator",
            SYSTEM_PROMPTS["frontier-validator"],
            frontier_validator_prompt(proposal, problem, reason),
            request_tag=_tag(proposal.id, "validate", attempt),
        )
        quality = parse_enum(text, "QUALITY", QualityClass, QUALITY_ALIASES)
        if quality:
            return ValidationJudgment(
                proposal.id,
                SimilarityClass.DIFFERENT_APPROACH,
                quality,
                find_field(text, "JUSTIFICATION") or "",
            )
        reason = "QUALITY label is required"
    raise ValidationFailed(f"{proposal.id}: quality label unparseable")


def expand_frontier(
    problem: ProblemStatement,
    winning_proposal: MechanismProposal,
    backend: Backend,
) -> ExpansionOutcome:
    """
    One new problem per expansion mode.

    Returns:
        ExpansionOutcome with up to three expansions in mode order; a mode
        whose output cannot be parsed is a failure record instead
    """
    outcome = ExpansionOutcome()
    for mode in ExpansionMode:
        role = expansion_role(mode)
        try:
            text = call_agent(
                backend,
                role,
                SYSTEM_PROMPTS[role],
                expansion_prompt(mode, problem, winning_proposal),
                request_tag=_tag(problem.id, role),
            )
        except GauntletError as e:
            outcome.failures.append(FailureRecord.of("expansion", e, mode.value))
            continue
        fields, reason = _parse_problem_fields(text)
        if not fields:
            failure = ExpansionFailed(f"{problem.id} {mode.value}: {reason}")
            outcome.failures.append(FailureRecord.of("expansion", failure, mode.value))
            continue
        new_problem = ProblemStatement(
            id=f"{problem.id}-{mode.value.lower()}",
            source=ProblemSource.EXPANSION,
            lineage=Lineage(problem.id, mode),
            **fields,
        )
        outcome.expansions.append(FrontierExpansion(problem.id, mode, new_problem))
    return outcome


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

def load_feedback(directory: Optional[str]) -> Dict[str, List[str]]:
    """
    Funnel feedback files grouped by problem id.

    Each file is {"candidate_id", "problem_id", "tier", "feedback"}.
    """
    grouped: Dict[str, List[str]] = {}
    if not directory or not Path(directory).is_dir():
        return grouped
    for path in sorted(Path(directory).glob("*.json")):
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            logger.warning("skipping feedback file %s: %s", path, e)
            continue
        problem_id = record.get("problem_id")
        if problem_id and record.get("feedback"):
            grouped.setdefault(problem_id, []).append(f"tier {record.get('tier')}: {record['feedback']}")
    return grouped


def _judge_all(
    proposals: Sequence[MechanismProposal],
    judge,
    failures: List[FailureRecord],
) -> List[ValidationJudgment]:
    judgments = []
    for proposal in proposals:
        try:
            judgments.append(judge(proposal))
        except GauntletError as e:
            failures.append(FailureRecord.of("validation", e, proposal.id))
    return judgments


class _CellRunner:
    """Runs one cell; holds the shared settings so cells stay independent."""

    def __init__(self, backend: Backend, settings: IdeationSettings, feedback: Dict[str, List[str]], panel_library):
        self.backend = backend
        self.settings = settings
        self.feedback = feedback
        self.panel_library = panel_library
        self.temps = settings.ladder()

    def _generate(self, problem: ProblemStatement, failures: List[FailureRecord]) -> List[MechanismProposal]:
        outcome = generate_mechanisms(
            problem,
            self.settings.n_proposals,
            self.temps,
            self.backend,
            variants=self.settings.architect_variants,
            feedback=self.feedback.get(problem.id, ()),
        )
        failures.extend(outcome.failures)
        return outcome.proposals

    def run_paper(self, source: ExtractionInput, run_index: int) -> CellResult:
        cell = CellResult(source.paper_id, run_index)
        try:
            problem = extract_problem(source, self.backend, run_index, self.settings.extraction_temperature)
        except GauntletError as e:
            logger.warning("%s run %d: %s", source.paper_id, run_index, e)
            cell.status = STATUS_EXTRACTION_FAILED
            cell.failures.append(FailureRecord.of("extraction", e))
            return cell

        try:
            problem, cell.generality = qc_generality(problem, self.backend, self.settings.generality_threshold)
        except GauntletError as e:
            cell.failures.append(FailureRecord.of("qc", e))
        cell.problem = problem

        if source.ground_truth_available:
            cell.leak = check_leakage(
                problem, source.text, self.backend, source.problem_window, self.settings.leak_ngram
            )
            if cell.leak.leaked:
                logger.info("%s: problem leaks the solution (%s)", problem.id, cell.leak.to_dict()["flagged_by"])
                cell.status = STATUS_LEAKED
                return cell

        cell.proposals = self._generate(problem, cell.failures)
        if source.ground_truth_available:
            judge = lambda p: validate_proposal(p, source.text, self.backend, problem)
        else:
            judge = lambda p: validate_frontier(p, problem, self.backend)
        cell.judgments = _judge_all(cell.proposals, judge, cell.failures)
        self._finish(cell, problem, depth=0)
        return cell

    def run_problem(self, problem: ProblemStatement, run_index: int) -> CellResult:
        """Cells seeded with a pre-formatted problem skip extraction, QC and leakage."""
        cell = CellResult(problem.id, run_index)
        problem = dataclasses.replace(problem, id=f"{problem.id}-r{run_index}")
        cell.problem = problem
        cell.proposals = self._generate(problem, cell.failures)
        cell.judgments = _judge_all(
            cell.proposals, lambda p: validate_frontier(p, problem, self.backend), cell.failures
        )
        self._finish(cell, problem, depth=0)
        return cell

    def _finish(self, cell: CellResult, problem: ProblemStatement, depth: int) -> None:
        winner = cell.winner
        if winner is None or not cell.verdict.viable:
            return
        outcome = expand_frontier(problem, winner, self.backend)
        cell.expansions = outcome.expansions
        cell.failures.extend(outcome.failures)
        if self.settings.panel_review_top and self.panel_library is not None:
            cell.core_insight = self._panel_insight(problem, winner, cell.failures)
        queue = [(e.new_problem, depth + 1) for e in outcome.expansions if depth + 1 < self.settings.recursion_depth]
        while queue:
            frontier_problem, level = queue.pop(0)
            result = self._run_frontier(frontier_problem, level)
            cell.frontier.append(result)
            queue.extend(
                (e.new_problem, level + 1) for e in result.expansions if level + 1 < self.settings.recursion_depth
            )

    def _run_frontier(self, problem: ProblemStatement, depth: int) -> FrontierResult:
        result = FrontierResult(problem, depth)
        result.proposals = self._generate(problem, result.failures)
        result.judgments = _judge_all(
            result.proposals, lambda p: validate_frontier(p, problem, self.backend), result.failures
        )
        best = _best(result.judgments)
        if best and best.verdict.viable:
            winner = next(p for p in result.proposals if p.id == best.proposal_id)
            outcome = expand_frontier(problem, winner, self.backend)
            result.expansions = outcome.expansions
            result.failures.extend(outcome.failures)
        return result

    def _panel_insight(self, problem: ProblemStatement, winner: MechanismProposal, failures: List[FailureRecord]) -> Optional[str]:
        from panel import run_panel

        document = f"{problem.render()}\n\n{winner.render()}"
        outcome = run_panel(document, self.panel_library, self.backend, paper_id=winner.id)
        if outcome.masterclass is None:
            for failure in outcome.failures:
                failures.append(FailureRecord("panel", failure["code"], failure["message"], failure.get("persona_id", "")))
            return None
        return outcome.masterclass.core_insight


def run_ideation(
    corpus: Sequence[ExtractionInput],
    runs_per_paper: int,
    backend: Backend,
    settings: Optional[IdeationSettings] = None,
    problems: Sequence[ProblemStatement] = (),
    panel_library=None,
) -> IdeationReport:
    """
    Run every (paper, run) cell and assemble the report.

    Cells run concurrently up to the backend's max_parallel; the report is
    ordered by (paper_id, run_index) regardless of completion order.

    Args:
        corpus: Papers to process
        runs_per_paper: Independent runs per paper
        backend: Agent backend
        settings: Ideation settings (defaults when None)
        problems: Pre-formatted problems (manual / telemetry-stub sources)
        panel_library: Persona library for panel_review_top

    Returns:
        IdeationReport
    """
    if not corpus and not problems:
        raise PreconditionError("ideation needs at least one paper or problem")
    if runs_per_paper < 1:
        raise PreconditionError("runs_per_paper must be at least 1")
    settings = settings or IdeationSettings()
    runner = _CellRunner(backend, settings, load_feedback(settings.feedback_dir), panel_library)

    jobs = [(runner.run_paper, source, r) for source in corpus for r in range(1, runs_per_paper + 1)]
    jobs += [(runner.run_problem, problem, r) for problem in problems for r in range(1, runs_per_paper + 1)]
    logger.info("running %d ideation cells", len(jobs))

    with ThreadPoolExecutor(max_workers=backend.max_parallel) as pool:
        futures = [pool.submit(fn, item, r) for fn, item, r in jobs]
        cells = [f.result() for f in futures]

    cells.sort(key=lambda c: (c.paper_id, c.run_index))
    warnings = []
    for cell in cells:
        if cell.leak and cell.leak.warning:
            warnings.append(f"{cell.paper_id} run {cell.run_index}: {cell.leak.warning}")
    stats = aggregate_stats(c.verdict for c in cells if c.counted)
    logger.info("ideation done: n=%d viable=%d", stats.n_total, stats.n_viable)
    return IdeationReport(cells, warnings)
