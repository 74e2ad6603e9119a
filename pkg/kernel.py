"""
kernel.py - Domain Types and Verdict Algebra

Pure values shared by every pipeline. No I/O, no prompts, no model calls.

VERDICT RULES:
A judgment is made on two independent axes and the verdict is derived:
- REDISCOVERY_SUCCESS: (EXACT_MATCH or FUNCTIONAL_EQUIVALENT) and ISCA_WORTHY
- ALTERNATIVE_SUCCESS: DIFFERENT_APPROACH and ISCA_WORTHY
- FAIL:                any INCREMENTAL or FLAWED result

The verdict is never taken from model text; it is always recomputed from
the two axis labels with classify_verdict().

DETERMINISM:
All types here are frozen dataclasses or enums. Same input, same output.
"""

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Dict, Iterable, List, Optional

from errors import PreconditionError


# Temperature range accepted by every chat-completions provider we target
MIN_TEMPERATURE = 0.0
MAX_TEMPERATURE = 2.0


class ProblemSource(Enum):
    """Where a problem statement came from."""
    PAPER_EXTRACTION = "paper-extraction"
    EXPANSION = "expansion"
    MANUAL = "manual"
    TELEMETRY_STUB = "telemetry-stub"


class SimilarityClass(Enum):
    """Axis 1: how close a proposal is to the known solution."""
    EXACT_MATCH = "EXACT_MATCH"
    FUNCTIONAL_EQUIVALENT = "FUNCTIONAL_EQUIVALENT"
    DIFFERENT_APPROACH = "DIFFERENT_APPROACH"


class QualityClass(Enum):
    """Axis 2: standalone quality of a proposal."""
    ISCA_WORTHY = "ISCA_WORTHY"
    INCREMENTAL = "INCREMENTAL"
    FLAWED = "FLAWED"


class Verdict(Enum):
    """Derived outcome. Only produced by classify_verdict()."""
    REDISCOVERY_SUCCESS = "REDISCOVERY_SUCCESS"
    ALTERNATIVE_SUCCESS = "ALTERNATIVE_SUCCESS"
    FAIL = "FAIL"

    @property
    def viable(self) -> bool:
        return self is not Verdict.FAIL


# Best-first ordering used when a cell holds several judged proposals
VERDICT_RANK = {
    Verdict.REDISCOVERY_SUCCESS: 0,
    Verdict.ALTERNATIVE_SUCCESS: 1,
    Verdict.FAIL: 2,
}


class ExpansionMode(Enum):
    """The three ways a solved problem spawns new problems."""
    VERTICAL = "Vertical"
    LATERAL = "Lateral"
    FOUNDATIONAL = "Foundational"


def _require_text(name: str, value: str) -> None:
    if not isinstance(value, str) or not value.strip():
        raise PreconditionError(f"{name} must be non-empty text")


def _require_temperature(value: float) -> None:
    if not (MIN_TEMPERATURE <= value <= MAX_TEMPERATURE):
        raise PreconditionError(
            f"temperature {value} outside [{MIN_TEMPERATURE}, {MAX_TEMPERATURE}]"
        )


@dataclass(frozen=True)
class Lineage:
    """Parent link carried by expanded problems."""
    parent_id: str
    mode: ExpansionMode

    def to_dict(self) -> Dict[str, str]:
        return {"parent_id": self.parent_id, "mode": self.mode.value}


@dataclass(frozen=True)
class ProblemStatement:
    """
    Canonical [CONTEXT]/[SYMPTOM]/[CONSTRAINT] problem record.

    Invariants enforced at construction:
    - context, symptom, constraint all non-empty
    - generality_score, when present, within [1, 10]
    - lineage present if and only if source is EXPANSION
    """
    id: str
    source: ProblemSource
    context: str
    symptom: str
    constraint: str
    generality_score: Optional[int] = None
    lineage: Optional[Lineage] = None

    def __post_init__(self):
        _require_text("id", self.id)
        _require_text("context", self.context)
        _require_text("symptom", self.symptom)
        _require_text("constraint", self.constraint)
        if self.generality_score is not None and not (1 <= self.generality_score <= 10):
            raise PreconditionError(f"generality_score {self.generality_score} outside [1, 10]")
        if (self.lineage is not None) != (self.source is ProblemSource.EXPANSION):
            raise PreconditionError("lineage must be present exactly when source is expansion")

    def render(self) -> str:
        """Canonical three-field text, as placed into prompts."""
        return (
            f"[CONTEXT]: {self.context}\n"
            f"[SYMPTOM]: {self.symptom}\n"
            f"[CONSTRAINT]: {self.constraint}"
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "source": self.source.value,
            "context": self.context,
            "symptom": self.symptom,
            "constraint": self.constraint,
            "generality_score": self.generality_score,
            "lineage": self.lineage.to_dict() if self.lineage else None,
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "ProblemStatement":
        lineage = data.get("lineage")
        return ProblemStatement(
            id=data["id"],
            source=ProblemSource(data.get("source", ProblemSource.MANUAL.value)),
            context=data["context"],
            symptom=data["symptom"],
            constraint=data["constraint"],
            generality_score=data.get("generality_score"),
            lineage=Lineage(lineage["parent_id"], ExpansionMode(lineage["mode"])) if lineage else None,
        )


@dataclass(frozen=True)
class MechanismProposal:
    """One architect-agent output."""
    id: str
    problem_id: str
    title: str
    mechanism: str
    rationale: str
    evaluation_plan: str
    temperature: float

    def __post_init__(self):
        for name in ("id", "problem_id", "title", "mechanism", "rationale", "evaluation_plan"):
            _require_text(name, getattr(self, name))
        _require_temperature(self.temperature)

    def render(self) -> str:
        return (
            f"Title: {self.title}\n\n"
            f"The Mechanism:\n{self.mechanism}\n\n"
            f"Why it Works:\n{self.rationale}\n\n"
            f"Evaluation Plan:\n{self.evaluation_plan}"
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "problem_id": self.problem_id,
            "title": self.title,
            "mechanism": self.mechanism,
            "rationale": self.rationale,
            "evaluation_plan": self.evaluation_plan,
            "temperature": self.temperature,
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "MechanismProposal":
        return MechanismProposal(
            id=data["id"],
            problem_id=data["problem_id"],
            title=data["title"],
            mechanism=data["mechanism"],
            rationale=data["rationale"],
            evaluation_plan=data["evaluation_plan"],
            temperature=float(data["temperature"]),
        )


def check_proposal_links(
    proposals: Iterable[MechanismProposal],
    problems: Iterable[ProblemStatement],
) -> List[str]:
    """
    Return ids of proposals whose problem_id resolves to no known problem.

    Args:
        proposals: Proposals to check
        problems: Known problem statements

    Returns:
        List of dangling proposal ids (empty when all resolve)
    """
    known = {p.id for p in problems}
    return [p.id for p in proposals if p.problem_id not in known]


def classify_verdict(sim: SimilarityClass, qual: QualityClass) -> Verdict:
    """
    Derive the verdict from the two judgment axes.

    Total over all 3x3 inputs. The quality gate dominates: anything not
    ISCA_WORTHY fails regardless of similarity.
    """
    if qual is not QualityClass.ISCA_WORTHY:
        return Verdict.FAIL
    if sim is SimilarityClass.DIFFERENT_APPROACH:
        return Verdict.ALTERNATIVE_SUCCESS
    return Verdict.REDISCOVERY_SUCCESS


def best_verdict(verdicts: Iterable[Verdict]) -> Verdict:
    """Best verdict in a group (FAIL for an empty group)."""
    return min(verdicts, key=VERDICT_RANK.__getitem__, default=Verdict.FAIL)


@dataclass(frozen=True)
class RunStats:
    """
    Verdict counts for a batch of runs.

    Counts are stored; rates are derived on read as exact fractions so
    rounding never drifts between the JSON and Markdown reports.
    """
    n_total: int = 0
    n_rediscovery: int = 0
    n_alternative: int = 0
    n_fail: int = 0

    def __post_init__(self):
        if self.n_rediscovery + self.n_alternative + self.n_fail != self.n_total:
            raise PreconditionError("verdict counts must partition n_total")

    def _rate(self, count: int) -> Fraction:
        if self.n_total == 0:
            return Fraction(0)
        return Fraction(count, self.n_total)

    @property
    def n_viable(self) -> int:
        return self.n_rediscovery + self.n_alternative

    @property
    def viable_rate(self) -> Fraction:
        return self._rate(self.n_viable)

    @property
    def rediscovery_rate(self) -> Fraction:
        return self._rate(self.n_rediscovery)

    @property
    def alternative_rate(self) -> Fraction:
        return self._rate(self.n_alternative)

    @property
    def fail_rate(self) -> Fraction:
        return self._rate(self.n_fail)

    def to_dict(self) -> Dict[str, Any]:
        """JSON form: counts plus each rate as an exact fraction and a 6-place decimal."""
        rates = {}
        for name in ("viable_rate", "rediscovery_rate", "alternative_rate", "fail_rate"):
            value = getattr(self, name)
            rates[name] = {
                "fraction": f"{value.numerator}/{value.denominator}",
                "decimal": round(float(value), 6),
            }
        return {
            "n_total": self.n_total,
            "n_rediscovery": self.n_rediscovery,
            "n_alternative": self.n_alternative,
            "n_fail": self.n_fail,
            "n_viable": self.n_viable,
            "rates": rates,
        }


def aggregate_stats(verdicts: Iterable[Verdict]) -> RunStats:
    """
    Partition a list of verdicts into RunStats.

    Args:
        verdicts: Any iterable of Verdict (may be empty)

    Returns:
        RunStats whose counts partition the input
    """
    counts = {v: 0 for v in Verdict}
    total = 0
    for verdict in verdicts:
        counts[verdict] += 1
        total += 1
    return RunStats(
        n_total=total,
        n_rediscovery=counts[Verdict.REDISCOVERY_SUCCESS],
        n_alternative=counts[Verdict.ALTERNATIVE_SUCCESS],
        n_fail=counts[Verdict.FAIL],
    )


def temperature_ladder(n: int, lo: float, hi: float) -> List[float]:
    """
    Evenly spaced sampling temperatures from lo to hi inclusive.

    Args:
        n: Number of rungs (>= 1)
        lo: First temperature
        hi: Last temperature

    Returns:
        n ascending values; endpoints exactly lo and hi

    Raises:
        PreconditionError: n < 1, lo > hi, a bound outside [0, 2],
            or n == 1 with lo != hi
    """
    if n < 1:
        raise PreconditionError("temperature ladder needs at least one rung")
    if lo > hi:
        raise PreconditionError(f"ladder lower bound {lo} exceeds upper bound {hi}")
    _require_temperature(lo)
    _require_temperature(hi)
    if n == 1:
        if lo != hi:
            raise PreconditionError("a single-rung ladder requires lo == hi")
        return [lo]

    step = (hi - lo) / (n - 1)
    # Rounding keeps 0.5 + 0.1 * 1 equal to the literal 0.6
    ladder = [round(lo + i * step, 10) for i in range(n)]
    ladder[0] = lo
    ladder[-1] = hi
    return ladder
