"""
mock_playbook.py - Built-in Mock Responses

Default rule set for MockBackend so every pipeline runs offline. Each role
gets well-formed output in the shape its parser expects. Variation comes
only from the per-request rng (seeded from backend seed + request digest),
so a fixed seed gives identical runs.

Quality judgments are always ISCA_WORTHY; similarity labels vary.
"""

import hashlib
import json
import re
from typing import List

from backend import AgentRequest, MockRule, MockScript

MOCK_SPEC = {
    "variables": [
        {"symbol": "N_ops", "meaning": "operations per invocation", "units": "ops"},
        {"symbol": "throughput", "meaning": "sustained operations per second", "units": "ops/s"},
        {"symbol": "T_total", "meaning": "end-to-end execution time", "units": "s"},
        {"symbol": "speedup", "meaning": "speedup over the baseline", "units": "x"},
        {"symbol": "T_base", "meaning": "baseline execution time", "units": "s"},
    ],
    "relationships": [
        "T_total = N_ops / throughput",
        "speedup = T_base / T_total",
    ],
    "constraints": ["throughput > 0"],
    "calibration_data": [
        {"source": "evaluation section", "values": {"N_ops": 1.0e9, "throughput": 2.5e8, "T_base": 6.0}},
    ],
}

MOCK_PROGRAM = '''\
"""Throughput-bound execution time model."""
import json

# Calibration values taken from the specification
N_OPS = 1.0e9        # ops
THROUGHPUT = 2.5e8   # ops/s
T_BASE = 6.0         # s


def main():
    t_total = N_OPS / THROUGHPUT
    print(json.dumps({"T_total": t_total, "speedup": T_BASE / t_total}, sort_keys=True))


if __name__ == "__main__":
    main()
'''

_TITLES = [
    "Stride Sieve: Filtering Useless Prefetches at the L2 Boundary",
    "Ledger Buffers: Decoupling Commit from Writeback",
    "Echo Tables: Reusing Branch History Across Contexts",
    "Shadow Tags: Cheap Reuse Prediction for Large LLCs",
    "Tidepool: Bandwidth-Aware Request Scheduling for HBM",
]

_SIMILARITY = ["EXACT_MATCH", "FUNCTIONAL_EQUIVALENT", "DIFFERENT_APPROACH"]


def _tag(request: AgentRequest) -> str:
    return hashlib.sha256(request.user_prompt.encode("utf-8")).hexdigest()[:6]


def _problem(subject: str, tag: str) -> str:
    return (
        f"[CONTEXT]: Out-of-order cores running {subject} (instance {tag}) share a multi-megabyte last-level cache.\n"
        "[SYMPTOM]: Cores stall on memory for 38% of cycles and achieved bandwidth stays below 40% of peak.\n"
        "[CONSTRAINT]: Added storage must stay under 64 KB per core with no change to the ISA."
    )


def _extract(request, rng) -> str:
    return _problem("data-intensive server workloads", _tag(request))


def _expand(request, rng) -> str:
    mode = request.role_name.split(".", 1)[1]
    return _problem(f"workloads exposed by a {mode} expansion", _tag(request))


def _architect(request, rng) -> str:
    title = rng.choice(_TITLES)
    entries = rng.choice([256, 512, 1024])
    return (
        f"Title: {title}\n\n"
        f"The Mechanism: A {entries}-entry set-associative table beside the L2 records the reuse "
        "distance of recently evicted lines. A 2-bit confidence counter per entry gates insertion "
        "priority for incoming lines.\n\n"
        "Why it Works: Lines with long observed reuse distances pollute the cache; demoting them "
        "on insertion keeps the working set resident and removes repeated misses.\n\n"
        "Evaluation Plan: Compare against LRU and a signature-based baseline on memory-intensive "
        "SPEC and graph workloads; report IPC, MPKI and storage overhead."
    )


def _validate(request, rng) -> str:
    similarity = rng.choice(_SIMILARITY)
    return (
        f"SIMILARITY: {similarity}\n"
        "QUALITY: ISCA_WORTHY\n"
        "JUSTIFICATION: The candidate targets the same bottleneck with a concrete, sized structure "
        "and a sound first-principles argument."
    )


def _review(request, rng) -> str:
    match = re.search(r"You are (.+?)\. Your driving question", request.user_prompt)
    name = match.group(1) if match else "a reviewer"
    return (
        "## Mechanism\n"
        f"From the perspective of {name}, the central structure is described in enough detail to build.\n\n"
        "## Methodology\n"
        "The baseline is reasonable but the sensitivity study is thin.\n\n"
        "## Feasibility\n"
        "Storage and timing overheads look modest.\n\n"
        "## Verdict\n"
        "A solid contribution with an under-explored evaluation.\n\n"
        f"STANCE: {name} finds the mechanism sound and the evaluation incomplete."
    )


def _synthesize(request, rng) -> str:
    return (
        "## Agreements\n"
        "- The mechanism is clearly described and buildable.\n"
        "- Storage overhead is modest.\n\n"
        "## Tensions\n"
        "- Reviewers disagree on whether the workload set is representative.\n\n"
        "## Core Insight\n"
        "Reuse behaviour observed at eviction is a cheap, accurate predictor of future value.\n\n"
        "## Frank Limitations\n"
        "The evaluation omits multi-programmed mixes and sensitivity to cache size."
    )


def _select(request, rng) -> str:
    runs = sorted({int(n) for n in re.findall(r"=== RUN (\d+)", request.user_prompt)})
    lines = [f"RUN {k}: CORRECTNESS={rng.randint(6, 9)} INSIGHT={rng.randint(5, 9)}" for k in runs]
    lines.append("JUSTIFICATION: The highest-scoring run derives every prediction from stated calibration data.")
    return "\n".join(lines)


def _expert(request, rng) -> str:
    dims = re.findall(r"^([a-z][a-z-]*): <0-10>$", request.user_prompt, re.MULTILINE)
    scores = "\n".join(f"{d}: {rng.randint(6, 9)}" for d in dims)
    return f"SCORES:\n{scores}\nAPPROVE: YES\nTOP ISSUE: Sensitivity to table size is not characterized."


def default_playbook() -> MockScript:
    """Rules covering every role the pipelines issue."""
    approved = "APPROVED: YES\nISSUES:\n"
    rules: List[MockRule] = [
        MockRule("extractor", "", _extract),
        MockRule("generality-qc", "", "SCORE: 8\nCRITIQUE: Describes a bottleneck class shared by many designs."),
        MockRule("generality-repair", "", _extract),
        MockRule("leakage-judge", "", "REVEALS: NO\nEVIDENCE: none"),
        MockRule("architect", "", _architect),
        MockRule("validator", "", _validate),
        MockRule(
            "frontier-validator", "",
            "QUALITY: ISCA_WORTHY\nJUSTIFICATION: Concrete structures with a plausible benefit.",
        ),
        MockRule("expander.*", "", _expand),
        MockRule("topic-detector", "", "TOPICS:\n- cache replacement policies\n- memory hierarchy\n- prefetching"),
        MockRule("reviewer", "", _review),
        MockRule("synthesizer", "", _synthesize),
        MockRule("forge.specifier", "", "```json\n" + json.dumps(MOCK_SPEC, indent=2) + "\n```"),
        MockRule("forge.spec-repairer", "", "```json\n" + json.dumps(MOCK_SPEC, indent=2) + "\n```"),
        MockRule("forge.*-verifier", "", approved),
        MockRule("forge.implementer", "", "```python\n" + MOCK_PROGRAM + "```"),
        MockRule("forge.code-repairer", "", "```python\n" + MOCK_PROGRAM + "```"),
        MockRule(
            "forge.interpreter", "",
            "## Model Structure\nExecution time is operations divided by sustained throughput.\n\n"
            "## Assumptions\nThroughput is constant across the run.\n\n"
            "## Findings\nThe model predicts a 1.5x speedup over the baseline.\n\n"
            "## Magic Gaps\nnone identified\n\n"
            "FEASIBILITY: FEASIBLE",
        ),
        MockRule("forge.selector", "", _select),
        MockRule(
            "tier0.first-principles", "",
            "RESULT: PASS\nVIOLATION: none\nREASON: The mechanism uses only information available at decision time.",
        ),
        MockRule("tier1.*", "", _expert),
    ]
    return MockScript(rules)
