"""
prompts.py - Prompt Templates for Every Agent Role

System prompts live in SYSTEM_PROMPTS keyed by role name; user prompts are
built by the functions below from the data each stage is allowed to see.

OUTPUT CONTRACTS:
Each template ends with the exact output shape the matching parser in the
pipeline modules expects (labelled fields, ## sections, fenced code or a
JSON payload). Changing a shape here means changing its parser too.

CLEAN ROOM:
extraction_prompt() and architect_prompt() only ever receive the problem
window or a rendered ProblemStatement. Nothing that could contain the
paper's solution is passed to them.
"""

import json
from typing import Dict, Iterable, Optional, Sequence

from kernel import ExpansionMode, MechanismProposal, ProblemStatement


PROBLEM_FORMAT = (
    "[CONTEXT]: <the system setting and workload where the problem appears>\n"
    "[SYMPTOM]: <the observed bottleneck, with at least one concrete number>\n"
    "[CONSTRAINT]: <what any fix must respect: area, power, compatibility, latency>"
)

APPROVAL_FORMAT = (
    "APPROVED: YES or NO\n"
    "ISSUES:\n"
    "- <one concrete issue per bullet; leave the list empty when approved>"
)


SYSTEM_PROMPTS: Dict[str, str] = {
    "extractor": (
        "You are a computer architecture analyst. You read the opening pages of a "
        "research paper and describe the hardware bottleneck it is attacking. You "
        "describe the problem only. Never name, hint at or paraphrase the mechanism "
        "the authors propose."
    ),
    "generality-qc": (
        "You grade problem statements for generality. A general statement describes "
        "a bottleneck class that many designs face; an over-specific one is tied to a "
        "single paper's setup, product or benchmark. Score from 1 (narrow) to 10 (broad)."
    ),
    "generality-repair": (
        "You rewrite over-specific architecture problem statements so they describe the "
        "underlying bottleneck class. Keep the quantitative evidence. Do not add a solution."
    ),
    "leakage-judge": (
        "You audit problem statements for solution leakage. Answer one question only: "
        "does this problem text reveal the mechanism that solves it?"
    ),
    "architect": (
        "You are a senior computer architect proposing a new hardware mechanism. "
        "Propose a structural change: new tables, buffers, predictors, datapaths or "
        "protocols. Do not propose parameter tuning such as larger caches or deeper "
        "queues. Name every hardware structure and its size."
    ),
    "validator": (
        "You are a program committee member for a top architecture venue. You compare a "
        "candidate mechanism against the published paper that solved the same problem, "
        "then judge the candidate on its own merits."
    ),
    "frontier-validator": (
        "You are a program committee member for a top architecture venue. There is no "
        "reference solution for this problem; judge the candidate mechanism on its own merits."
    ),
    "expander.vertical": (
        "You find the next bottleneck. Once a mechanism removes one limit, performance is "
        "bounded by whatever comes next in the chain compute, memory bandwidth, memory "
        "latency, interconnect, power. Identify that next limit as a new problem."
    ),
    "expander.lateral": (
        "You transfer solved problems across domains. Abstract the structure of the solved "
        "problem (a producer outrunning a consumer, a predictor with stale state, a shared "
        "resource under contention) and find the same structure in a different subsystem."
    ),
    "expander.foundational": (
        "You question premises. Instead of improving the mechanism that was built, find the "
        "assumption that made it necessary and pose the problem of removing that need."
    ),
    "topic-detector": (
        "You classify computer architecture papers into fine-grained sub-topics such as "
        "'cache coherence protocols' or 'systolic array architectures'."
    ),
    "reviewer": (
        "You are one reviewer on an adversarial reading panel. You critique the paper "
        "from your own expertise only, independently of any other reviewer."
    ),
    "synthesizer": (
        "You turn six independent reviews of one paper into a single reading guide for "
        "a strong graduate student. Surface where reviewers agree, where they conflict, "
        "the one idea worth remembering and the limitations the paper does not admit."
    ),
    "forge.specifier": (
        "You convert a paper into a specification for a first-principles performance "
        "model. Capture every variable, equation, constraint and calibration number the "
        "paper states. Invent nothing."
    ),
    "forge.spec-verifier": (
        "You audit a performance-model specification against its source paper. Look for "
        "missing variables, equations that reference undeclared symbols, and formulas that "
        "do not appear in the paper."
    ),
    "forge.spec-repairer": (
        "You fix performance-model specifications. Address every listed issue and change "
        "nothing else."
    ),
    "forge.implementer": (
        "You write self-contained Python performance models from a specification. The "
        "program reads no files, opens no network connections and starts no processes. "
        "Every constant is a named variable taken from the specification. The program "
        "prints one JSON object of results to standard output."
    ),
    "forge.functional-verifier": (
        "You check that a performance model program implements its specification and "
        "that its execution output is plausible. A crash, a timeout or a missing result "
        "is a rejection."
    ),
    "forge.directive-verifier": (
        "You enforce scientific standards on model code: no hardcoded magic numbers, every "
        "constant traceable to the specification, units consistent, assumptions stated in "
        "comments."
    ),
    "forge.code-repairer": (
        "You repair performance model programs. Address every listed issue and return the "
        "complete corrected program."
    ),
    "forge.interpreter": (
        "You explain what a first-principles performance model says about a paper. Compare "
        "the model's predictions with the paper's claims and call out any gap where the "
        "claimed result exceeds what the model supports."
    ),
    "forge.selector": (
        "You compare independent attempts at the same performance model and score each on "
        "correctness and on the quality of insight it gives."
    ),
    "tier0.first-principles": (
        "You are a first-principles filter for proposed hardware mechanisms. Reject any "
        "mechanism that breaks a physical or logical rule. Do not judge novelty."
    ),
}


# Tier-0 checklist: id -> question put to the judge
DEFAULT_TIER0_CHECKLIST: Dict[str, str] = {
    "causality": "Does the mechanism need information before it can exist (violate causality)?",
    "perfect-prediction": "Does it assume perfect prediction or oracle knowledge of future events?",
    "ignored-edge-cases": "Does it ignore critical edge cases such as coherence, exceptions, context switches or overflow?",
}


# Tier-1 experts: id -> (charter, scored dimensions)
TIER1_EXPERTS: Dict[str, Dict[str, object]] = {
    "microarchitecture": {
        "charter": "How would this be built in silicon? Check structure sizes, timing paths, ports and area.",
        "dimensions": ["implementability", "timing", "area-power"],
    },
    "simulation-methodology": {
        "charter": "Can the claimed benefit be measured honestly? Check the simulator, baseline and statistics.",
        "dimensions": ["baseline-fairness", "measurability", "sensitivity"],
    },
    "workloads": {
        "charter": "Are the target workloads representative, and does the benefit survive outside them?",
        "dimensions": ["representativeness", "generality", "expected-benefit"],
    },
    "systems-integration": {
        "charter": "Does it fit the rest of the system: OS, coherence, virtualization, security?",
        "dimensions": ["compatibility", "security", "deployability"],
    },
}


EXPANSION_GUIDANCE: Dict[ExpansionMode, str] = {
    ExpansionMode.VERTICAL: (
        "Assume the mechanism below works as claimed. What is the IMMEDIATE NEXT bottleneck "
        "the system now hits? If compute was the limit, look at memory bandwidth; if "
        "bandwidth, look at latency; if latency, look at interconnect or power."
    ),
    ExpansionMode.LATERAL: (
        "Describe the abstract structure of the solved problem in one sentence, then find a "
        "different subsystem (storage, networking, accelerators, OS, compilers) where the same "
        "structure causes a measurable bottleneck. Pose that as the new problem."
    ),
    ExpansionMode.FOUNDATIONAL: (
        "Identify the design assumption that created the need for the mechanism below. Pose the "
        "problem of a system that does not need the mechanism at all."
    ),
}


def _retry_note(problem: Optional[str]) -> str:
    if not problem:
        return ""
    return (
        f"\n\nYOUR PREVIOUS ANSWER COULD NOT BE USED: {problem}\n"
        "Answer again and follow the output format exactly."
    )


def extraction_prompt(excerpt: str, retry_reason: Optional[str] = None) -> str:
    """
    Build the problem-extraction prompt.

    Args:
        excerpt: The problem window of the paper (never the full text)
        retry_reason: Why the previous answer was rejected, for the re-prompt

    Returns:
        User prompt text
    """
    return (
        "Read the paper excerpt below and state the bottleneck it addresses in canonical form. "
        "Redact the proposed solution completely: no mechanism names, no structure names the "
        "authors introduce, no description of their design.\n\n"
        f"PAPER EXCERPT:\n{excerpt}\n\n"
        "OUTPUT FORMAT:\n"
        f"{PROBLEM_FORMAT}"
        f"{_retry_note(retry_reason)}"
    )


def qc_prompt(problem: ProblemStatement) -> str:
    return (
        "Grade how general this problem statement is.\n\n"
        f"{problem.render()}\n\n"
        "OUTPUT FORMAT:\n"
        "SCORE: <integer 1-10>\n"
        "CRITIQUE: <what makes it narrow or broad>"
    )


def repair_prompt(problem: ProblemStatement, critique: str) -> str:
    return (
        "Rewrite this problem statement so it describes the bottleneck class rather than one "
        "paper's instance of it.\n\n"
        f"{problem.render()}\n\n"
        f"GRADER CRITIQUE:\n{critique}\n\n"
        "OUTPUT FORMAT:\n"
        f"{PROBLEM_FORMAT}"
    )


def leakage_prompt(problem: ProblemStatement, solution_text: str) -> str:
    return (
        "Below is a problem statement and the part of the paper that describes the solution.\n\n"
        f"PROBLEM:\n{problem.render()}\n\n"
        f"SOLUTION MATERIAL:\n{solution_text}\n\n"
        "Does the problem text reveal the mechanism, or enough of it that a reader could "
        "reconstruct it?\n\n"
        "OUTPUT FORMAT:\n"
        "REVEALS: YES or NO\n"
        "EVIDENCE: <the revealing phrase, or 'none'>"
    )


def architect_prompt(
    problem: ProblemStatement,
    focus: Optional[str] = None,
    feedback: Sequence[str] = (),
    retry_reason: Optional[str] = None,
) -> str:
    """
    Build the architect prompt from the rendered problem only.

    Args:
        problem: Clean-room problem statement
        focus: Optional domain-specific angle for prompt variants
        feedback: Failure modes recorded for earlier designs on this problem
        retry_reason: Re-prompt note after an unparseable answer
    """
    parts = [
        "Design a novel hardware mechanism for the problem below.\n",
        problem.render(),
    ]
    if focus:
        parts.append(f"\nANGLE TO EXPLORE: {focus}")
    if feedback:
        lines = "\n".join(f"- {item}" for item in feedback)
        parts.append(f"\nKNOWN FAILURE MODES OF EARLIER DESIGNS (avoid them):\n{lines}")
    parts.append(
        "\nOUTPUT FORMAT:\n"
        "Title: <catchy, academic paper title>\n"
        "The Mechanism: <the hardware structures, their sizes and how they interact>\n"
        "Why it Works: <first-principles argument for the benefit>\n"
        "Evaluation Plan: <baseline, workloads, metrics and the expected result>"
    )
    return "\n".join(parts) + _retry_note(retry_reason)


def validator_prompt(
    proposal: MechanismProposal,
    problem: ProblemStatement,
    ground_truth: str,
    retry_reason: Optional[str] = None,
) -> str:
    return (
        "Evaluate the CANDIDATE SOLUTION against the GROUND TRUTH PAPER.\n\n"
        f"PROBLEM:\n{problem.render()}\n\n"
        f"CANDIDATE SOLUTION:\n{proposal.render()}\n\n"
        f"GROUND TRUTH PAPER:\n{ground_truth}\n\n"
        "Judge two things independently.\n"
        "SIMILARITY to the paper's mechanism:\n"
        "- EXACT_MATCH: the same mechanism\n"
        "- FUNCTIONAL_EQUIVALENT: different structures, same principle and effect\n"
        "- DIFFERENT_APPROACH: a genuinely different way to attack the problem\n"
        "QUALITY of the candidate on its own:\n"
        "- ISCA_WORTHY: novel, non-obvious, feasible and well argued\n"
        "- INCREMENTAL: correct but a small step over known designs\n"
        "- FLAWED: violates hardware constraints, is naive, or would not deliver the benefit\n\n"
        "OUTPUT FORMAT:\n"
        "SIMILARITY: <EXACT_MATCH | FUNCTIONAL_EQUIVALENT | DIFFERENT_APPROACH>\n"
        "QUALITY: <ISCA_WORTHY | INCREMENTAL | FLAWED>\n"
        "JUSTIFICATION: <two to five sentences>"
        f"{_retry_note(retry_reason)}"
    )


def frontier_validator_prompt(
    proposal: MechanismProposal,
    problem: ProblemStatement,
    retry_reason: Optional[str] = None,
) -> str:
    return (
        "Evaluate the CANDIDATE SOLUTION to the problem below.\n\n"
        f"PROBLEM:\n{problem.render()}\n\n"
        f"CANDIDATE SOLUTION:\n{proposal.render()}\n\n"
        "QUALITY of the candidate:\n"
        "- ISCA_WORTHY: novel, non-obvious, feasible and well argued\n"
        "- INCREMENTAL: correct but a small step over known designs\n"
        "- FLAWED: violates hardware constraints, is naive, or would not deliver the benefit\n\n"
        "OUTPUT FORMAT:\n"
        "QUALITY: <ISCA_WORTHY | INCREMENTAL | FLAWED>\n"
        "JUSTIFICATION: <two to five sentences>"
        f"{_retry_note(retry_reason)}"
    )


def expansion_prompt(mode: ExpansionMode, problem: ProblemStatement, proposal: MechanismProposal) -> str:
    return (
        f"{EXPANSION_GUIDANCE[mode]}\n\n"
        f"SOLVED PROBLEM:\n{problem.render()}\n\n"
        f"MECHANISM THAT SOLVED IT:\n{proposal.render()}\n\n"
        "State the NEW problem in canonical form.\n\n"
        "OUTPUT FORMAT:\n"
        f"{PROBLEM_FORMAT}"
    )


def topic_prompt(paper_text: str) -> str:
    return (
        "List the sub-topics of the paper below, most central first. Use short lower-case "
        "phrases.\n\n"
        f"PAPER:\n{paper_text}\n\n"
        "OUTPUT FORMAT:\n"
        "TOPICS:\n"
        "- <topic>\n"
        "- <topic>"
    )


def review_prompt(paper_text: str, display_name: str, charter: str, retry_reason: Optional[str] = None) -> str:
    return (
        f"You are {display_name}. Your driving question: {charter}\n\n"
        f"PAPER:\n{paper_text}\n\n"
        "Write your critique under these headings, in this order:\n"
        "## Mechanism\n"
        "## Methodology\n"
        "## Feasibility\n"
        "## Verdict\n\n"
        "End with one line:\n"
        "STANCE: <your position in one sentence>"
        f"{_retry_note(retry_reason)}"
    )


def synthesis_prompt(paper_text: str, critiques: Iterable[Dict[str, str]], retry_reason: Optional[str] = None) -> str:
    """critiques: dicts with 'reviewer' and 'text'."""
    blocks = "\n\n".join(f"=== REVIEW BY {c['reviewer']} ===\n{c['text']}" for c in critiques)
    return (
        f"PAPER:\n{paper_text}\n\n"
        f"REVIEWS:\n{blocks}\n\n"
        "Write the reading guide with these headings:\n"
        "## Agreements\n- <point the reviewers share>\n"
        "## Tensions\n- <point where reviewers disagree, naming who>\n"
        "## Core Insight\n<the single idea to take away>\n"
        "## Frank Limitations\n<what the paper does not admit>"
        f"{_retry_note(retry_reason)}"
    )


def spec_prompt(paper_text: str, retry_reason: Optional[str] = None) -> str:
    return (
        f"PAPER:\n{paper_text}\n\n"
        "Extract the performance-model specification as one JSON object:\n"
        "```json\n"
        "{\n"
        '  "variables": [{"symbol": "...", "meaning": "...", "units": "..."}],\n'
        '  "relationships": ["T_total = N_ops / throughput", "..."],\n'
        '  "constraints": ["..."],\n'
        '  "calibration_data": [{"source": "Table 2", "values": {"symbol": 1.0}}]\n'
        "}\n"
        "```\n"
        "Every symbol used in a relationship must be declared in variables."
        f"{_retry_note(retry_reason)}"
    )


def spec_verify_prompt(spec_json: str, paper_text: str) -> str:
    return (
        f"PAPER:\n{paper_text}\n\n"
        f"SPECIFICATION:\n```json\n{spec_json}\n```\n\n"
        "Is the specification complete and faithful to the paper?\n\n"
        f"OUTPUT FORMAT:\n{APPROVAL_FORMAT}"
    )


def spec_repair_prompt(spec_json: str, issues: Sequence[str], paper_text: str) -> str:
    listed = "\n".join(f"- {issue}" for issue in issues)
    return (
        f"PAPER:\n{paper_text}\n\n"
        f"SPECIFICATION:\n```json\n{spec_json}\n```\n\n"
        f"ISSUES TO FIX:\n{listed}\n\n"
        "Return the corrected specification as one JSON object in a ```json block."
    )


def implement_prompt(spec_json: str, retry_reason: Optional[str] = None) -> str:
    return (
        f"SPECIFICATION:\n```json\n{spec_json}\n```\n\n"
        "Write the complete model program in one ```python block. It must print a single "
        "JSON object with the model's predictions to standard output."
        f"{_retry_note(retry_reason)}"
    )


def functional_verify_prompt(spec_json: str, program: str, execution_log: str) -> str:
    return (
        f"SPECIFICATION:\n```json\n{spec_json}\n```\n\n"
        f"PROGRAM:\n```python\n{program}\n```\n\n"
        f"EXECUTION LOG:\n{execution_log}\n\n"
        "Does the program implement the specification, and did it run correctly?\n\n"
        f"OUTPUT FORMAT:\n{APPROVAL_FORMAT}"
    )


def directive_verify_prompt(program: str) -> str:
    return (
        f"PROGRAM:\n```python\n{program}\n```\n\n"
        "Check: no hardcoded magic numbers, every constant named and traceable, consistent "
        "units, assumptions stated.\n\n"
        f"OUTPUT FORMAT:\n{APPROVAL_FORMAT}"
    )


def code_repair_prompt(spec_json: str, program: str, issues: Sequence[str]) -> str:
    listed = "\n".join(f"- {issue}" for issue in issues)
    return (
        f"SPECIFICATION:\n```json\n{spec_json}\n```\n\n"
        f"PROGRAM:\n```python\n{program}\n```\n\n"
        f"ISSUES TO FIX:\n{listed}\n\n"
        "Return the complete corrected program in one ```python block."
    )


def interpret_prompt(spec_json: str, program: str, stdout: str, paper_text: str, retry_reason: Optional[str] = None) -> str:
    return (
        f"PAPER:\n{paper_text}\n\n"
        f"SPECIFICATION:\n```json\n{spec_json}\n```\n\n"
        f"PROGRAM:\n```python\n{program}\n```\n\n"
        f"MODEL OUTPUT:\n{stdout}\n\n"
        "Write the interpretation under these headings:\n"
        "## Model Structure\n"
        "## Assumptions\n"
        "## Findings\n"
        "## Magic Gaps\n"
        "(write 'none identified' under Magic Gaps when the claims match the model)\n\n"
        "End with one line:\n"
        "FEASIBILITY: FEASIBLE or INFEASIBLE"
        f"{_retry_note(retry_reason)}"
    )


def selector_prompt(summaries: Sequence[Dict[str, str]]) -> str:
    """summaries: one dict per run with 'index', 'status' and 'summary'."""
    blocks = "\n\n".join(
        f"=== RUN {s['index']} ({s['status']}) ===\n{s['summary']}" for s in summaries
    )
    return (
        f"{blocks}\n\n"
        "Score every run from 0 to 10 on CORRECTNESS and INSIGHT.\n\n"
        "OUTPUT FORMAT:\n"
        "RUN 1: CORRECTNESS=<0-10> INSIGHT=<0-10>\n"
        "RUN 2: CORRECTNESS=<0-10> INSIGHT=<0-10>\n"
        "RUN 3: CORRECTNESS=<0-10> INSIGHT=<0-10>\n"
        "JUSTIFICATION: <why the best run is best>"
    )


def tier0_prompt(proposal: MechanismProposal, problem: Optional[ProblemStatement], checklist: Dict[str, str]) -> str:
    items = "\n".join(f"- {key}: {question}" for key, question in checklist.items())
    context = f"PROBLEM:\n{problem.render()}\n\n" if problem else ""
    return (
        f"{context}"
        f"MECHANISM:\n{proposal.render()}\n\n"
        f"CHECKLIST:\n{items}\n\n"
        "OUTPUT FORMAT:\n"
        "RESULT: PASS or FAIL\n"
        "VIOLATION: <checklist id that fails, or none>\n"
        "REASON: <one or two sentences>"
    )


def tier1_prompt(
    expert_id: str,
    proposal: MechanismProposal,
    problem: Optional[ProblemStatement],
    retry_reason: Optional[str] = None,
) -> str:
    expert = TIER1_EXPERTS[expert_id]
    dims = "\n".join(f"{d}: <0-10>" for d in expert["dimensions"])
    context = f"PROBLEM:\n{problem.render()}\n\n" if problem else ""
    return (
        f"You are the {expert_id} expert. {expert['charter']}\n\n"
        f"{context}"
        f"MECHANISM:\n{proposal.render()}\n\n"
        "OUTPUT FORMAT:\n"
        "SCORES:\n"
        f"{dims}\n"
        "APPROVE: YES or NO\n"
        "TOP ISSUE: <the most serious problem you see>"
        f"{_retry_note(retry_reason)}"
    )


def tier1_system(expert_id: str) -> str:
    return (
        f"You are the {expert_id} expert on an adversarial design review board. "
        "Approve only mechanisms you would defend in front of the whole board."
    )


def dump_spec(spec: Dict) -> str:
    """Canonical JSON used whenever a spec is placed into a prompt."""
    return json.dumps(spec, indent=2, sort_keys=True)


def expansion_role(mode: ExpansionMode) -> str:
    return f"expander.{mode.value.lower()}"


def tier1_role(expert_id: str) -> str:
    return f"tier1.{expert_id}"
