"""Tests for the ideation pipeline: clean-room extraction through frontier expansion."""

import json
from fractions import Fraction

import pytest
from pydantic import ValidationError

from config import IdeationSettings
from conftest import SOLUTION_MARKER, VALID_PROBLEM, VALID_PROPOSAL, WINDOW, paper_text
from errors import ExtractionFailed, PreconditionError, ProviderError
from ideation import (
    STATUS_COMPLETE,
    STATUS_EXTRACTION_FAILED,
    STATUS_LEAKED,
    ExtractionInput,
    check_leakage,
    expand_frontier,
    extract_problem,
    generate_mechanisms,
    load_feedback,
    qc_generality,
    run_ideation,
    shared_ngrams,
    validate_proposal,
)
from kernel import (
    ExpansionMode,
    MechanismProposal,
    ProblemSource,
    ProblemStatement,
    QualityClass,
    SimilarityClass,
    Verdict,
)


def _source(paper_id="p1", ground_truth=True):
    return ExtractionInput(paper_id, paper_text(paper_id), WINDOW, ground_truth)


def _problem(problem_id="p1-r1"):
    return ProblemStatement(
        id=problem_id,
        source=ProblemSource.PAPER_EXTRACTION,
        context="Graph analytics on a 16-core server.",
        symptom="Irregular accesses miss 61% of the time.",
        constraint="No more than 32 KB of new state per core.",
    )


def _proposal(problem_id="p1-r1", slot=1):
    return MechanismProposal(
        id=f"{problem_id}-m{slot}",
        problem_id=problem_id,
        title="Hop Tables",
        mechanism="A 512-entry table records pointer hops.",
        rationale="Chains repeat across iterations.",
        evaluation_plan="Compare with a stride prefetcher.",
        temperature=0.5,
    )


def _user_prompts(backend, role):
    return [e["request"]["user_prompt"] for e in backend.transcript.for_role(role)]


def test_extraction_input_window_bounds():
    with pytest.raises(PreconditionError):
        ExtractionInput("p1", "short text", 500)
    source = _source()
    assert len(source.window_text) == WINDOW
    assert SOLUTION_MARKER not in source.window_text
    assert SOLUTION_MARKER in source.solution_text


def test_extract_problem(make_backend):
    backend = make_backend()
    problem = extract_problem(_source(), backend, run_index=3)

    assert problem.id == "p1-r3"
    assert problem.source is ProblemSource.PAPER_EXTRACTION
    assert "38%" in problem.symptom
    assert len(backend.transcript.for_role("extractor")) == 1


def test_extract_problem_reprompts_once(make_backend):
    backend = make_backend((("extractor", ""), ["I could not find a problem.", VALID_PROBLEM]))
    problem = extract_problem(_source(), backend)

    prompts = _user_prompts(backend, "extractor")
    assert len(prompts) == 2
    assert "YOUR PREVIOUS ANSWER COULD NOT BE USED" in prompts[1]
    assert "61%" in problem.symptom


def test_extract_problem_fails_after_two_attempts(make_backend):
    backend = make_backend((("extractor", ""), "no structure here"))
    with pytest.raises(ExtractionFailed):
        extract_problem(_source(), backend)
    assert len(backend.transcript.for_role("extractor")) == 2


def test_symptom_requires_a_number(make_backend):
    vague = VALID_PROBLEM.replace("Irregular accesses miss in the cache 61% of the time.", "Accesses often miss.")
    backend = make_backend((("extractor", ""), vague))
    with pytest.raises(ExtractionFailed) as info:
        extract_problem(_source(), backend)
    assert "quantitative" in str(info.value)


def test_qc_passes_without_repair(make_backend):
    backend = make_backend()
    problem, report = qc_generality(_problem(), backend, threshold=7)
    assert problem.generality_score == 8
    assert not report.repaired
    assert backend.transcript.for_role("generality-repair") == []


def test_qc_repairs_once_below_threshold(make_backend):
    backend = make_backend(
        (("generality-qc", ""), ["SCORE: 3\nCRITIQUE: tied to one benchmark", "SCORE: 8\nCRITIQUE: general"]),
        (("generality-repair", ""), VALID_PROBLEM),
    )
    problem, report = qc_generality(_problem(), backend, threshold=7)

    assert report.repaired
    assert report.initial_score == 3
    assert report.score == 8
    assert not report.below_threshold
    assert problem.generality_score == 8
    assert problem.id == "p1-r1"
    assert len(backend.transcript.for_role("generality-repair")) == 1


def test_qc_flags_still_narrow_problem(make_backend):
    backend = make_backend(
        (("generality-qc", ""), ["SCORE: 3\nCRITIQUE: narrow", "SCORE: 5\nCRITIQUE: still narrow"]),
        (("generality-repair", ""), VALID_PROBLEM),
    )
    _, report = qc_generality(_problem(), backend, threshold=7)
    assert report.below_threshold
    assert len(backend.transcript.for_role("generality-qc")) == 2


SOLUTION_SENTENCES = [
    "the victim filter tracks recently evicted lines with two bit saturating counters",
    "a reuse predictor indexed by program counter demotes lines that never return",
    "the stream engine walks linked lists ahead of the core using spare fill buffers",
    "a bandwidth governor throttles prefetch issue whenever queue occupancy exceeds half",
    "the coherence directory caches sharer vectors only for lines written by many cores",
    "a skewed branch table hashes global history with the return address stack top",
    "the translation cache keeps huge page entries in a separate fully associative array",
    "a compression engine packs zero words into the tag array to free data ways",
    "the scheduler groups row buffer hits before switching to requests from other banks",
    "a value predictor forwards the last loaded value to dependents before the miss returns",
]


def _leak_cases():
    cases = []
    for i, sentence in enumerate(SOLUTION_SENTENCES):
        leaky = ProblemStatement(
            id=f"leak-{i}", source=ProblemSource.PAPER_EXTRACTION,
            context="Multicore servers running mixed workloads.",
            symptom=f"Stalls reach {i + 20}% because {sentence}.",
            constraint="Less than 64 KB of new state.",
        )
        clean = ProblemStatement(
            id=f"clean-{i}", source=ProblemSource.PAPER_EXTRACTION,
            context="Multicore servers running mixed workloads.",
            symptom=f"Memory stalls account for {i + 20}% of cycles on irregular phases.",
            constraint="Less than 64 KB of new state.",
        )
        cases.append((leaky, True))
        cases.append((clean, False))
    return cases


def test_leakage_fixtures(make_backend):
    window = "Opening section about memory stalls in data centers. " * 20
    full_text = window + ". ".join(s.capitalize() for s in SOLUTION_SENTENCES)
    backend = make_backend()
    cases = _leak_cases()
    assert len(cases) == 20
    for problem, expected in cases:
        report = check_leakage(problem, full_text, backend, len(window), ngram=8)
        assert report.leaked is expected, problem.id
        if expected:
            assert report.to_dict()["flagged_by"] == ["lexical"]
            assert report.lexical_evidence


def test_leakage_judge_flags_paraphrase(make_backend):
    backend = make_backend((("leakage-judge", ""), "REVEALS: YES\nEVIDENCE: describes the victim filter"))
    report = check_leakage(_problem(), paper_text("p1"), backend, WINDOW)
    assert report.leaked
    assert report.to_dict()["flagged_by"] == ["judge"]
    assert report.judge_evidence == "describes the victim filter"


def test_leakage_judge_failure_falls_back_to_lexical(make_backend):
    def unavailable(request, rng):
        raise ProviderError("judge offline", 503)

    backend = make_backend((("leakage-judge", ""), unavailable))
    report = check_leakage(_problem(), paper_text("p1"), backend, WINDOW)
    assert not report.leaked
    assert "provider-error" in report.warning

    backend = make_backend((("leakage-judge", ""), "I would rather not say"))
    report = check_leakage(_problem(), paper_text("p1"), backend, WINDOW)
    assert not report.leaked
    assert "unparseable" in report.warning


def test_shared_ngrams_ignores_case_and_punctuation():
    found = shared_ngrams("Victim-Filter tracks evicted LINES", "the victim filter tracks evicted lines daily", 4)
    assert found == ["victim filter tracks evicted", "filter tracks evicted lines"]
    assert shared_ngrams("too short", "too short as well", 8) == []


def test_generation_slot_failure_is_recorded(make_backend):
    backend = make_backend((("architect", ""), ["rambling", "still rambling", VALID_PROPOSAL]))
    outcome = generate_mechanisms(_problem(), 3, [0.5, 0.7, 0.9], backend)

    assert [p.id for p in outcome.proposals] == ["p1-r1-m2", "p1-r1-m3"]
    assert [p.temperature for p in outcome.proposals] == [0.7, 0.9]
    assert len(outcome.failures) == 1
    assert outcome.failures[0].code == "generation-failed"
    assert outcome.failures[0].item == "p1-r1-m1"


def test_generation_needs_one_temperature_per_slot(make_backend):
    with pytest.raises(PreconditionError):
        generate_mechanisms(_problem(), 3, [0.5], make_backend())


def test_architect_sees_only_the_problem(make_backend):
    backend = make_backend()
    generate_mechanisms(_problem(), 2, [0.5, 0.9], backend, variants=["power"], feedback=["tier 1: too costly"])
    prompts = _user_prompts(backend, "architect")

    assert len(prompts) == 2
    for prompt in prompts:
        assert _problem().render() in prompt
        assert "ANGLE TO EXPLORE: power" in prompt
        assert "tier 1: too costly" in prompt


def test_model_written_verdict_is_ignored(make_backend):
    backend = make_backend((
        ("validator", ""),
        "SIMILARITY: EXACT_MATCH\nQUALITY: NAIVE\nVERDICT: REDISCOVERY_SUCCESS\nJUSTIFICATION: close copy",
    ))
    judgment = validate_proposal(_proposal(), paper_text("p1"), backend, _problem())

    assert judgment.similarity is SimilarityClass.EXACT_MATCH
    assert judgment.quality is QualityClass.FLAWED
    assert judgment.verdict is Verdict.FAIL


def test_validation_requires_problem_and_ground_truth(make_backend):
    backend = make_backend()
    with pytest.raises(PreconditionError):
        validate_proposal(_proposal(), paper_text("p1"), backend)
    with pytest.raises(PreconditionError):
        validate_proposal(_proposal(), "   ", backend, _problem())
    assert len(backend.transcript) == 0


def test_expansion_lineage(make_backend):
    backend = make_backend()
    outcome = expand_frontier(_problem(), _proposal(), backend)

    assert [e.mode for e in outcome.expansions] == list(ExpansionMode)
    for expansion in outcome.expansions:
        child = expansion.new_problem
        assert child.source is ProblemSource.EXPANSION
        assert child.lineage.parent_id == "p1-r1"
        assert child.lineage.mode is expansion.mode
        assert child.id == f"p1-r1-{expansion.mode.value.lower()}"
    assert outcome.failures == []


def test_expansion_mode_failure_is_isolated(make_backend):
    backend = make_backend((("expander.lateral", ""), "no idea"))
    outcome = expand_frontier(_problem(), _proposal(), backend)
    assert [e.mode for e in outcome.expansions] == [ExpansionMode.VERTICAL, ExpansionMode.FOUNDATIONAL]
    assert outcome.failures[0].item == "Lateral"
    assert outcome.failures[0].code == "expansion-failed"
    assert outcome.failures[0].message.startswith("p1-r1 Lateral: ")


def test_run_ideation_counts_every_run(make_backend):
    backend = make_backend()
    report = run_ideation([_source()], 5, backend, IdeationSettings())

    stats = report.stats
    assert stats.n_total == 5
    assert stats.n_viable == 5
    assert not report.partial
    assert [c.run_index for c in report.cells] == [1, 2, 3, 4, 5]
    assert all(c.status == STATUS_COMPLETE for c in report.cells)
    assert len(report.candidates()) == 25
    assert report.to_dict()["pipeline"] == "ideation"


def test_run_ideation_extraction_failure_is_partial(make_backend):
    backend = make_backend((("extractor", ""), "nothing"))
    report = run_ideation([_source()], 2, backend, IdeationSettings(n_proposals=2))

    assert report.partial
    assert report.stats.n_total == 0
    assert report.excluded[STATUS_EXTRACTION_FAILED] == 2
    assert all(c.to_dict()["verdict"] is None for c in report.cells)
    assert backend.transcript.for_role("architect") == []


def test_leaked_cell_stays_in_denominator(make_backend):
    def judge(request, rng):
        if request.request_tag.startswith("p2-"):
            return "REVEALS: YES\nEVIDENCE: names the victim filter"
        return "REVEALS: NO\nEVIDENCE: none"

    backend = make_backend((("leakage-judge", ""), judge))
    report = run_ideation([_source("p1"), _source("p2"), _source("p3")], 1, backend, IdeationSettings(n_proposals=2))

    assert [c.status for c in report.cells] == [STATUS_COMPLETE, STATUS_LEAKED, STATUS_COMPLETE]
    assert report.stats.n_total == 3
    assert report.stats.n_fail == 1
    assert report.stats.viable_rate == Fraction(2, 3)
    assert report.leaked == 1
    assert report.excluded[STATUS_EXTRACTION_FAILED] == 0
    leaked = report.to_dict()["cells"][1]
    assert leaked["verdict"] == Verdict.FAIL.value
    assert leaked["proposals"] == []
    assert not any(e["request"]["request_tag"].startswith("p2-") for e in backend.transcript.for_role("architect"))


def test_scripted_sequences_survive_parallel_cells(make_backend):
    rules = (
        (("generality-qc", ""), ["SCORE: 3\nCRITIQUE: tied to one benchmark", "SCORE: 8\nCRITIQUE: general"]),
        (("generality-repair", ""), VALID_PROBLEM),
    )
    corpus = [_source(f"paper{i}") for i in range(6)]
    settings = IdeationSettings(n_proposals=2)

    reports = []
    for _ in range(2):
        report = run_ideation(corpus, 2, make_backend(*rules, max_parallel=8, delay=0.002), settings)
        reports.append(json.dumps(report.to_dict(), sort_keys=True))
        assert all(c.generality.repaired and c.generality.score == 8 for c in report.cells)
    assert reports[0] == reports[1]


def test_clean_room_over_one_hundred_cells(make_backend):
    corpus = [_source(f"paper{i:02d}") for i in range(20)]
    backend = make_backend(max_parallel=8)
    report = run_ideation(corpus, 5, backend, IdeationSettings(n_proposals=2, temp_lo=0.5, temp_hi=0.9))

    assert len(report.cells) == 100
    assert report.stats.n_total == 100
    for role in ("extractor", "architect", "generality-qc", "generality-repair"):
        for entry in backend.transcript.for_role(role):
            assert SOLUTION_MARKER not in entry["request"]["user_prompt"]
            assert SOLUTION_MARKER not in entry["request"]["system_prompt"]

    by_paper = {source.paper_id: source for source in corpus}
    extractions = backend.transcript.for_role("extractor")
    assert len(extractions) >= 100
    for entry in extractions:
        source = by_paper[entry["request"]["request_tag"].split("/")[0]]
        prompt = entry["request"]["user_prompt"]
        assert source.window_text in prompt
        # nothing of the paper survives once its window is cut out
        residue = prompt.replace(source.window_text, "")
        assert f"Paper {source.paper_id} studies" not in residue
        assert "victim filter" not in prompt
    assert any(SOLUTION_MARKER in p for p in _user_prompts(backend, "validator"))
    assert backend.max_in_flight <= 8


def test_frontier_recursion(make_backend):
    backend = make_backend()
    settings = IdeationSettings(n_proposals=2, recursion_depth=2)
    report = run_ideation([_source()], 1, backend, settings)

    cell = report.cells[0]
    assert len(cell.expansions) == 3
    assert len(cell.frontier) == 3
    assert all(f.depth == 1 for f in cell.frontier)
    assert report.stats.n_total == 1
    assert report.frontier_stats.n_total == 3
    assert len(report.candidates()) == 2 + 3 * 2
    assert len(backend.transcript.for_role("frontier-validator")) == 6


def test_no_ground_truth_uses_quality_only_judge(make_backend):
    backend = make_backend()
    report = run_ideation([_source(ground_truth=False)], 1, backend, IdeationSettings(n_proposals=2))

    assert report.cells[0].leak is None
    assert backend.transcript.for_role("leakage-judge") == []
    assert backend.transcript.for_role("validator") == []
    assert len(backend.transcript.for_role("frontier-validator")) == 2


def test_preformatted_problems_skip_extraction(make_backend):
    backend = make_backend()
    manual = ProblemStatement.from_dict({
        "id": "q1", "context": "Mobile SoC.", "symptom": "GPU idles 45% of the frame.", "constraint": "1 W budget.",
    })
    report = run_ideation([], 2, backend, IdeationSettings(n_proposals=2), problems=[manual])

    assert [(c.paper_id, c.run_index) for c in report.cells] == [("q1", 1), ("q1", 2)]
    assert [c.problem.id for c in report.cells] == ["q1-r1", "q1-r2"]
    assert backend.transcript.for_role("extractor") == []
    assert report.stats.n_total == 2


def test_run_ideation_preconditions(make_backend):
    with pytest.raises(PreconditionError):
        run_ideation([], 1, make_backend())
    with pytest.raises(PreconditionError):
        run_ideation([_source()], 0, make_backend())


def test_feedback_reaches_the_architect(tmp_path, make_backend):
    feedback_dir = tmp_path / "feedback"
    feedback_dir.mkdir()
    (feedback_dir / "p1-r1-m1.json").write_text(json.dumps({
        "candidate_id": "p1-r1-m1", "problem_id": "p1-r1", "tier": 1, "feedback": "dissent from timing",
    }), encoding="utf-8")
    (feedback_dir / "junk.json").write_text("{not json", encoding="utf-8")

    assert load_feedback(str(feedback_dir)) == {"p1-r1": ["tier 1: dissent from timing"]}

    backend = make_backend()
    settings = IdeationSettings(n_proposals=2, feedback_dir=str(feedback_dir))
    run_ideation([_source()], 1, backend, settings)
    prompts = _user_prompts(backend, "architect")
    assert prompts and all("dissent from timing" in p for p in prompts)


def test_settings_reject_mismatched_temperatures():
    with pytest.raises(ValidationError):
        IdeationSettings(n_proposals=3, temps=[0.5, 0.7])
    assert IdeationSettings(n_proposals=2, temps=[0.2, 1.4]).ladder() == [0.2, 1.4]


def test_panel_review_of_winning_proposal(make_backend):
    from config import DEFAULT_PERSONA_LIBRARY
    from panel import load_library

    backend = make_backend()
    settings = IdeationSettings(n_proposals=2, panel_review_top=True)
    report = run_ideation([_source()], 1, backend, settings, panel_library=load_library(DEFAULT_PERSONA_LIBRARY))

    cell = report.cells[0]
    assert cell.core_insight.startswith("Reuse behaviour")
    assert report.to_dict()["cells"][0]["core_insight"] == cell.core_insight
    assert len(backend.transcript.for_role("synthesizer")) == 1
    assert all(SOLUTION_MARKER not in p for p in _user_prompts(backend, "reviewer"))
