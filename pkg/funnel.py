"""
funnel.py - Multi-Tier Candidate Evaluation Funnel

Candidates advance strictly tier by tier; only passing candidates enter
the next tier.

TIERS:
- 0 first-principles filter  (one judge call against a checklist)
- 1 adversarial panel        (four experts in parallel; k-of-4 approval, default 4)
- 2 analytical model         (pluggable hook; a forge-built model by default)
- 3 purpose-built simulation (full model-construction ensemble on the proposal)
- 4 full simulator           (stub: passes, flagged "not implemented")
- 5 RTL / FPGA               (stub: passes, flagged "not implemented")

ACCOUNTING:
Every candidate that enters a tier gets exactly one TierDecision there.
entered(k+1) == passed(k) and passed(k) <= entered(k). Failed decisions
always carry feedback; feedback is exported per candidate so ideation can
steer the next generation round.

QUOTAS:
A tier with a quota stops evaluating once that many candidates passed;
the rest fail with "tier quota exhausted".
"""

import json
import logging
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

from backend import AgentResponse, Backend, build_request, call_agent
from config import ForgeSettings, FunnelSettings
from errors import ForgeFailed, GauntletError, PreconditionError
from kernel import MechanismProposal, ProblemStatement, check_proposal_links
from prompts import (
    DEFAULT_TIER0_CHECKLIST,
    SYSTEM_PROMPTS,
    TIER1_EXPERTS,
    tier0_prompt,
    tier1_prompt,
    tier1_role,
    tier1_system,
)
from response_parser import extract_json, find_field, parse_int
from sandbox import Sandbox

logger = logging.getLogger("gauntlet.funnel")

TIERS = range(6)
TIER_NAMES = {
    0: "first-principles",
    1: "adversarial-panel",
    2: "analytical-model",
    3: "purpose-built-simulation",
    4: "full-simulator",
    5: "rtl",
}
STUB_TIERS = (4, 5)
QUOTA_EXHAUSTED = "tier quota exhausted"
NO_ANALYTICAL_MODEL = "no analytical model registered"


@dataclass(frozen=True)
class FunnelCandidate:
    proposal: MechanismProposal
    problem: Optional[ProblemStatement] = None

    @property
    def id(self) -> str:
        return self.proposal.id

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "FunnelCandidate":
        problem = data.get("problem")
        return FunnelCandidate(
            MechanismProposal.from_dict(data["proposal"]),
            ProblemStatement.from_dict(problem) if problem else None,
        )


def load_candidates(path) -> List[FunnelCandidate]:
    """
    Read a candidates.jsonl file.

    Raises:
        PreconditionError: malformed line (the message names the line number),
            duplicate ids, or a proposal whose problem_id matches no carried problem
    """
    candidates = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                candidates.append(FunnelCandidate.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError, GauntletError) as e:
                raise PreconditionError(f"{path}:{number}: malformed candidate ({e})")
    ids = [c.id for c in candidates]
    if len(set(ids)) != len(ids):
        raise PreconditionError(f"{path}: duplicate candidate ids")
    carried = [c for c in candidates if c.problem is not None]
    dangling = check_proposal_links([c.proposal for c in carried], [c.problem for c in carried])
    if dangling:
        raise PreconditionError(f"{path}: proposals name a problem the file does not carry: {', '.join(dangling)}")
    return candidates


@dataclass(frozen=True)
class TierDecision:
    candidate_id: str
    tier: int
    passed: bool
    feedback: str = ""
    details: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.tier not in TIERS:
            raise PreconditionError(f"tier {self.tier} outside 0-5")
        if not self.passed and not self.feedback.strip():
            raise PreconditionError(f"failed decision for {self.candidate_id} at tier {self.tier} has no feedback")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "candidate_id": self.candidate_id,
            "tier": self.tier,
            "passed": self.passed,
            "feedback": self.feedback,
            "details": self.details,
        }


@dataclass(frozen=True)
class ExpertScorecard:
    expert_id: str
    dimension_scores: Tuple[Tuple[str, int], ...]
    approve: bool
    top_issue: str = ""

    def __post_init__(self):
        if self.expert_id not in TIER1_EXPERTS:
            raise PreconditionError(f"unknown expert {self.expert_id}")
        for dimension, score in self.dimension_scores:
            if not 0 <= score <= 10:
                raise PreconditionError(f"{self.expert_id} {dimension} score {score} outside 0-10")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "expert_id": self.expert_id,
            "dimension_scores": {d: s for d, s in self.dimension_scores},
            "approve": self.approve,
            "top_issue": self.top_issue,
        }


@dataclass
class TierCount:
    entered: int = 0
    passed: int = 0


@dataclass
class FunnelLedger:
    counts: Dict[int, TierCount] = field(default_factory=lambda: {k: TierCount() for k in TIERS})
    decisions: List[TierDecision] = field(default_factory=list)
    enabled: Tuple[int, ...] = tuple(TIERS)
    problems: Dict[str, str] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def record(self, decision: TierDecision) -> None:
        self.decisions.append(decision)
        count = self.counts[decision.tier]
        count.entered += 1
        if decision.passed:
            count.passed += 1

    @property
    def partial(self) -> bool:
        """An evaluator errored on some candidate instead of judging it."""
        return any("error" in d.details for d in self.decisions)

    def failures(self) -> List[TierDecision]:
        return [d for d in self.decisions if not d.passed]

    def feedback_records(self) -> Dict[str, Dict[str, Any]]:
        """Generation feedback keyed by candidate id."""
        records = {}
        for decision in self.failures():
            records[decision.candidate_id] = {
                "candidate_id": decision.candidate_id,
                "problem_id": self.problems.get(decision.candidate_id),
                "tier": decision.tier,
                "tier_name": TIER_NAMES[decision.tier],
                "feedback": decision.feedback,
            }
        return records

    def artifacts(self) -> Dict[str, str]:
        files = {"ledger.json": json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"}
        for candidate_id, record in sorted(self.feedback_records().items()):
            files[f"feedback/{candidate_id}.json"] = json.dumps(record, indent=2, sort_keys=True) + "\n"
        return files

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pipeline": "funnel",
            "partial": self.partial,
            "tiers": [
                {
                    "tier": k,
                    "name": TIER_NAMES[k],
                    "enabled": k in self.enabled,
                    "entered": self.counts[k].entered,
                    "passed": self.counts[k].passed,
                }
                for k in TIERS
            ],
            "warnings": list(self.warnings),
            "decisions": [d.to_dict() for d in self.decisions],
        }


def check_chain(ledger: FunnelLedger) -> List[str]:
    """Violations of the funnel accounting rules (empty when the ledger is sound)."""
    problems = []
    for k in TIERS:
        count = ledger.counts[k]
        if count.passed > count.entered:
            problems.append(f"tier {k}: passed {count.passed} > entered {count.entered}")
        if k + 1 in TIERS and ledger.counts[k + 1].entered != count.passed:
            problems.append(f"tier {k + 1}: entered {ledger.counts[k + 1].entered} != passed({k}) {count.passed}")
    passed_by: Dict[str, set] = {}
    for decision in ledger.decisions:
        earlier = passed_by.setdefault(decision.candidate_id, set())
        if any(t not in earlier for t in range(decision.tier)):
            problems.append(f"{decision.candidate_id} reached tier {decision.tier} without passing every earlier tier")
        if not decision.passed and not decision.feedback:
            problems.append(f"{decision.candidate_id} failed tier {decision.tier} without feedback")
        if decision.passed:
            earlier.add(decision.tier)
    return problems


# ---------------------------------------------------------------------------
# Tier 0
# ---------------------------------------------------------------------------

def tier0_filter(
    proposal: MechanismProposal,
    backend: Backend,
    checklist: Optional[Dict[str, str]] = None,
    problem: Optional[ProblemStatement] = None,
) -> TierDecision:
    """
    First-principles check. Failures cite a checklist item; anything the
    judge says that cannot be read fails as "unevaluable".
    """
    checklist = checklist or DEFAULT_TIER0_CHECKLIST
    try:
        text = call_agent(
            backend, "tier0.first-principles", SYSTEM_PROMPTS["tier0.first-principles"],
            tier0_prompt(proposal, problem, checklist), request_tag=f"{proposal.id}/tier0",
        )
    except GauntletError as e:
        return TierDecision(proposal.id, 0, False, f"unevaluable: {e.code}")

    result = (find_field(text, "RESULT") or "").upper()
    reason = find_field(text, "REASON") or ""
    if result.startswith("PASS"):
        return TierDecision(proposal.id, 0, True)
    if not result.startswith("FAIL"):
        return TierDecision(proposal.id, 0, False, "unevaluable")

    violation = (find_field(text, "VIOLATION") or "").lower()
    cited = next((item for item in checklist if item in violation), None)
    if cited is None:
        cited = next((item for item in checklist if item in reason.lower()), None)
    if cited is None:
        return TierDecision(proposal.id, 0, False, f"unevaluable: failure cites no checklist item ({reason})")
    return TierDecision(proposal.id, 0, False, f"{cited}: {reason}".strip(), {"violation": cited})


# ---------------------------------------------------------------------------
# Tier 1
# ---------------------------------------------------------------------------

def parse_scorecard(expert_id: str, text: str) -> Optional[ExpertScorecard]:
    answer = (find_field(text, "APPROVE") or "").upper()
    if not answer.startswith(("YES", "NO")):
        return None
    scores = []
    for dimension in TIER1_EXPERTS[expert_id]["dimensions"]:
        score = parse_int(text, dimension, 0, 10)
        if score is not None:
            scores.append((dimension, score))
    return ExpertScorecard(expert_id, tuple(scores), answer.startswith("YES"), find_field(text, "TOP ISSUE") or "")


def tier1_adversarial(
    proposal: MechanismProposal,
    backend: Backend,
    threshold: int = 4,
    problem: Optional[ProblemStatement] = None,
) -> Tuple[List[ExpertScorecard], TierDecision]:
    """
    Four expert reviews issued together. Passes when at least `threshold`
    experts approve; an expert whose output stays unreadable after one
    re-prompt counts as not approving.
    """
    experts = list(TIER1_EXPERTS)
    requests = [
        build_request(
            backend, tier1_role(e), tier1_system(e), tier1_prompt(e, proposal, problem),
            request_tag=f"{proposal.id}/tier1/{e}",
        )
        for e in experts
    ]
    scorecards = []
    for expert_id, result in zip(experts, backend.complete_all(requests)):
        card = parse_scorecard(expert_id, result.text) if isinstance(result, AgentResponse) else None
        if card is None:
            try:
                retry = call_agent(
                    backend, tier1_role(expert_id), tier1_system(expert_id),
                    tier1_prompt(expert_id, proposal, problem, "APPROVE: YES or NO is required"),
                    request_tag=f"{proposal.id}/tier1/{expert_id}/retry",
                )
                card = parse_scorecard(expert_id, retry)
            except GauntletError:
                card = None
        if card is None:
            card = ExpertScorecard(expert_id, (), False, "expert output unparseable")
        scorecards.append(card)

    approvals = sum(1 for c in scorecards if c.approve)
    details = {"scorecards": [c.to_dict() for c in scorecards], "approvals": approvals, "threshold": threshold}
    if approvals >= threshold:
        return scorecards, TierDecision(proposal.id, 1, True, details=details)
    dissent = "; ".join(f"{c.expert_id}: {c.top_issue or 'no issue given'}" for c in scorecards if not c.approve)
    return scorecards, TierDecision(proposal.id, 1, False, f"dissent from {dissent}", details)


# ---------------------------------------------------------------------------
# Tier 2
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HookResult:
    estimates: Dict[str, float]
    passed: bool
    note: str = ""


class AnalyticalHook(Protocol):
    def __call__(self, proposal: MechanismProposal, problem: Optional[ProblemStatement]) -> Optional[HookResult]:
        """Evaluate the proposal; None means no model covers it."""


class ForgeModelHook:
    """
    Runs forge-produced model programs registered per paper id.

    registry maps a paper id to the model.src text of a forge run. The
    model's printed JSON becomes the estimates; a reported speedup below
    1.0 fails the candidate.
    """

    def __init__(self, registry: Dict[str, str], sandbox, workdir: Path):
        self.registry = registry
        self.sandbox = sandbox
        self.workdir = Path(workdir)

    @staticmethod
    def stored_models(runs_dir: Path) -> Dict[str, str]:
        """The picked model of every stored forge run, keyed by its paper id."""
        registry: Dict[str, str] = {}
        for pick in sorted(Path(runs_dir).glob("*/forge/pick.json")):
            chosen = json.loads(pick.read_text(encoding="utf-8")).get("chosen_run_index")
            run_json = pick.parent.parent / "run.json"
            model = pick.parent / f"run-{chosen}" / "model.src"
            if chosen and model.exists() and run_json.exists():
                paper_id = json.loads(run_json.read_text(encoding="utf-8")).get("subject")
                if paper_id:
                    registry[paper_id] = model.read_text(encoding="utf-8")
        return registry

    def __call__(self, proposal: MechanismProposal, problem: Optional[ProblemStatement]) -> Optional[HookResult]:
        # problem ids extend the paper id ("ship-r2", "ship-r2-lateral")
        owners = [k for k in self.registry if proposal.problem_id == k or proposal.problem_id.startswith(k + "-")]
        if not owners:
            return None
        program = self.registry[max(owners, key=len)]
        execution = self.sandbox.run(program, self.workdir / proposal.id)
        if not execution.ok:
            raise RuntimeError(f"analytical model {execution.summary()}: {execution.stderr.strip()[-500:]}")
        payload = extract_json(execution.stdout) or {}
        estimates = {k: float(v) for k, v in payload.items() if isinstance(v, (int, float))}
        speedup = estimates.get("speedup")
        passed = speedup is None or speedup >= 1.0
        note = "" if passed else f"analytical model predicts slowdown ({speedup:.2f}x)"
        return HookResult(estimates, passed, note)


def tier2_analytical(
    proposal: MechanismProposal,
    model_hook: Optional[AnalyticalHook],
    strict: bool = False,
    problem: Optional[ProblemStatement] = None,
) -> TierDecision:
    """Decision mirrors the hook; a missing hook passes (or fails when strict)."""
    if model_hook is None:
        return TierDecision(proposal.id, 2, not strict, NO_ANALYTICAL_MODEL, {"hook": None})
    try:
        result = model_hook(proposal, problem)
    except Exception as e:
        diagnostics = "".join(traceback.format_exception_only(type(e), e)).strip()
        return TierDecision(proposal.id, 2, False, f"analytical hook crashed: {diagnostics}", {"diagnostics": diagnostics})
    if result is None:
        return TierDecision(proposal.id, 2, not strict, NO_ANALYTICAL_MODEL, {"hook": "no model"})
    details = {"estimates": dict(result.estimates)}
    if result.passed:
        return TierDecision(proposal.id, 2, True, result.note, details)
    return TierDecision(proposal.id, 2, False, result.note or "analytical model rejects the mechanism", details)


# ---------------------------------------------------------------------------
# Tier 3
# ---------------------------------------------------------------------------

def tier3_simulate(
    proposal: MechanismProposal,
    forge: Callable[..., Any],
    sandbox,
    backend: Optional[Backend] = None,
    settings: Optional[ForgeSettings] = None,
    problem: Optional[ProblemStatement] = None,
) -> TierDecision:
    """
    Build a purpose-built model of the proposal with the forge ensemble.

    Passes when a run was picked, its model executed and its interpretation
    does not flag the claims as infeasible.
    """
    document = proposal.render()
    if problem is not None:
        document = f"{problem.render()}\n\n{document}"
    try:
        outcome = forge(document, backend, sandbox, settings, paper_id=proposal.id)
    except ForgeFailed as e:
        return TierDecision(proposal.id, 3, False, "forge failed: " + "; ".join(e.causes), {"causes": e.causes})
    except GauntletError as e:
        return TierDecision(proposal.id, 3, False, f"forge failed: {e.code}: {e}")

    chosen = outcome.chosen
    details = {"pick": outcome.pick.to_dict()}
    if chosen is None:
        return TierDecision(proposal.id, 3, False, "forge produced no pick", details)
    if not chosen.artifact.execution.ok:
        return TierDecision(proposal.id, 3, False, f"model {chosen.artifact.execution.summary()}", details)
    if not chosen.interpretation.feasible:
        gap = chosen.interpretation.magic_gap or "interpretation flags the claims as infeasible"
        return TierDecision(proposal.id, 3, False, f"magic gap: {gap}", details)
    return TierDecision(proposal.id, 3, True, "", details)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

Evaluator = Callable[[FunnelCandidate], TierDecision]


def default_evaluators(
    backend: Backend,
    settings: FunnelSettings,
    model_hook: Optional[AnalyticalHook] = None,
    sandbox=None,
    forge_settings: Optional[ForgeSettings] = None,
    forge: Optional[Callable[..., Any]] = None,
) -> Dict[int, Evaluator]:
    """Evaluator per tier wired to the backend and settings."""
    if forge is None:
        from modelforge import run_forge as forge
    if sandbox is None:
        sandbox = Sandbox(forge_settings.sandbox if forge_settings else None)

    def t0(c: FunnelCandidate) -> TierDecision:
        return tier0_filter(c.proposal, backend, settings.tier0_checklist, c.problem)

    def t1(c: FunnelCandidate) -> TierDecision:
        return tier1_adversarial(c.proposal, backend, settings.consensus_threshold, c.problem)[1]

    def t2(c: FunnelCandidate) -> TierDecision:
        return tier2_analytical(c.proposal, model_hook, settings.strict_tier2, c.problem)

    def t3(c: FunnelCandidate) -> TierDecision:
        return tier3_simulate(c.proposal, forge, sandbox, backend, forge_settings, c.problem)

    return {0: t0, 1: t1, 2: t2, 3: t3}


def _stub(tier: int) -> Evaluator:
    def evaluate(c: FunnelCandidate) -> TierDecision:
        return TierDecision(c.id, tier, True, "not implemented", {"stub": True})
    return evaluate


def _run_tier(
    tier: int,
    entering: List[FunnelCandidate],
    evaluate: Evaluator,
    quota: Optional[int],
    parallel: int,
) -> List[TierDecision]:
    """Decisions in input order; evaluation stops once the quota is filled."""
    decisions: List[TierDecision] = []
    passes = 0
    position = 0
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        while position < len(entering):
            if quota is not None and passes >= quota:
                break
            chunk = entering[position:position + parallel]
            position += len(chunk)
            for candidate, decision in zip(chunk, pool.map(_guarded(tier, evaluate), chunk)):
                if decision.passed and quota is not None and passes >= quota:
                    decision = TierDecision(candidate.id, tier, False, QUOTA_EXHAUSTED)
                if decision.passed:
                    passes += 1
                decisions.append(decision)
    for candidate in entering[position:]:
        decisions.append(TierDecision(candidate.id, tier, False, QUOTA_EXHAUSTED))
    return decisions


def _guarded(tier: int, evaluate: Evaluator) -> Evaluator:
    def run(candidate: FunnelCandidate) -> TierDecision:
        try:
            decision = evaluate(candidate)
        except GauntletError as e:
            return TierDecision(candidate.id, tier, False, f"{e.code}: {e}", {"error": e.code})
        if decision.candidate_id != candidate.id or decision.tier != tier:
            raise PreconditionError(f"tier {tier} evaluator returned a decision for another candidate or tier")
        return decision
    return run


def run_funnel(
    candidates: Sequence[FunnelCandidate],
    settings: Optional[FunnelSettings],
    backend: Optional[Backend],
    evaluators: Optional[Dict[int, Evaluator]] = None,
    model_hook: Optional[AnalyticalHook] = None,
    sandbox=None,
    forge_settings: Optional[ForgeSettings] = None,
) -> FunnelLedger:
    """
    Push candidates through tiers 0-5 and account for every decision.

    Args:
        candidates: Proposals (with their problems) to evaluate
        settings: Enabled tiers, consensus threshold, quotas
        backend: Agent backend for the default evaluators
        evaluators: Per-tier overrides (tier -> callable)
        model_hook: Tier-2 analytical hook
        sandbox: Sandbox for tier 3
        forge_settings: Forge settings for tier 3

    Returns:
        FunnelLedger (an empty one for no candidates)
    """
    settings = settings or FunnelSettings()
    ledger = FunnelLedger(enabled=tuple(settings.enabled_tiers))
    ledger.problems = {c.id: c.proposal.problem_id for c in candidates}
    if not candidates:
        return ledger

    table: Dict[int, Evaluator] = {}
    if backend is not None:
        table.update(default_evaluators(backend, settings, model_hook, sandbox, forge_settings))
    for tier in STUB_TIERS:
        table[tier] = _stub(tier)
    table.update(evaluators or {})

    if 2 in settings.enabled_tiers and model_hook is None and 2 not in (evaluators or {}):
        message = f"tier 2: {NO_ANALYTICAL_MODEL}" + ("; strict mode fails every candidate" if settings.strict_tier2 else "")
        logger.warning(message)
        ledger.warnings.append(message)

    parallel = backend.max_parallel if backend is not None else 4
    survivors = list(candidates)
    for tier in TIERS:
        if tier not in settings.enabled_tiers:
            decisions = [TierDecision(c.id, tier, True, "tier disabled", {"disabled": True}) for c in survivors]
        else:
            if tier not in table:
                raise PreconditionError(f"no evaluator for enabled tier {tier}")
            decisions = _run_tier(tier, survivors, table[tier], settings.quotas.get(tier), parallel)
        for decision in decisions:
            ledger.record(decision)
        passed_ids = {d.candidate_id for d in decisions if d.passed}
        survivors = [c for c in survivors if c.id in passed_ids]
        logger.info("tier %d (%s): %d entered, %d passed", tier, TIER_NAMES[tier], len(decisions), len(survivors))
    return ledger
