"""Tests for the specify / implement / interpret pipeline and the ensemble pick."""

import json

import pytest

from config import ForgeSettings
from conftest import FakeSandbox, paper_text
from errors import ForgeFailed, PreconditionError, SandboxUnavailable
from mock_playbook import MOCK_SPEC
from modelforge import (
    ForgeRun,
    Interpretation,
    ModelArtifact,
    ModelSpec,
    VerifierId,
    parse_rubric,
    parse_verifier,
    phase1_specify,
    phase2_implement,
    phase3_interpret,
    run_forge,
    select_run,
)
from sandbox import ExecutionResult

UNDECLARED_SPEC = {
    "variables": [{"symbol": "T", "meaning": "time", "units": "s"}, {"symbol": "N", "meaning": "ops", "units": "ops"}],
    "relationships": ["T = N / throughput + overhead"],
}
REJECT = "APPROVED: NO\nISSUES:\n- constant 0.85 is not traceable"


def _fenced(payload):
    return "```json\n" + json.dumps(payload) + "\n```"


def _spec():
    return ModelSpec.from_payload("p1", MOCK_SPEC)


def test_undeclared_symbols():
    spec = ModelSpec.from_payload("p1", UNDECLARED_SPEC)
    assert spec.undeclared_symbols() == ["throughput", "overhead"]
    assert _spec().undeclared_symbols() == []
    assert ModelSpec.from_payload("p1", {"variables": [], "relationships": ["a = b"]}) is None


def test_verifier_parsing():
    assert parse_verifier("APPROVED: YES\nISSUES:\n", VerifierId.SPEC).approved
    with_issue = parse_verifier("APPROVED: YES\nISSUES:\n- units mismatch", VerifierId.SPEC)
    assert not with_issue.approved
    assert with_issue.issues == ("units mismatch",)
    silent = parse_verifier("looks fine to me", VerifierId.DIRECTIVE)
    assert not silent.approved
    assert silent.issues == ("verifier output has no APPROVED line",)


def test_phase1_rejects_undeclared_symbols(make_backend):
    backend = make_backend(
        (("forge.specifier", ""), _fenced(UNDECLARED_SPEC)),
        (("forge.spec-repairer", ""), _fenced(UNDECLARED_SPEC)),
    )
    result = phase1_specify(paper_text("p1"), backend, "p1", max_iterations=3)

    assert not result.approved
    assert result.loop_count == 3
    assert all("undeclared symbols: throughput, overhead" in r.issues[-1] for r in result.reports)
    assert len(backend.transcript.for_role("forge.spec-verifier")) == 3
    assert len(backend.transcript.for_role("forge.spec-repairer")) == 2


def test_phase1_bound_never_exceeds_three(make_backend):
    backend = make_backend((("forge.spec-verifier", ""), REJECT))
    result = phase1_specify(paper_text("p1"), backend, "p1", max_iterations=5)
    assert result.loop_count == 3
    assert len(backend.transcript.for_role("forge.spec-verifier")) == 3


def test_phase1_approves_first_pass(make_backend):
    backend = make_backend()
    result = phase1_specify(paper_text("p1"), backend, "p1")
    assert result.approved
    assert result.loop_count == 1
    assert backend.transcript.for_role("forge.spec-repairer") == []


def test_loop_bounds_hold_over_many_runs(tmp_path, make_backend):
    def flaky(request, rng):
        return "APPROVED: YES\nISSUES:\n" if rng.random() < 0.3 else REJECT

    for i in range(500):
        bound = 1 + i % 3
        backend = make_backend((("forge.*-verifier", ""), flaky), seed=i)
        sandbox = FakeSandbox()

        phase1 = phase1_specify(paper_text("p1"), backend, "p1", max_iterations=bound)
        assert 1 <= phase1.loop_count <= bound
        assert len(backend.transcript.for_role("forge.spec-verifier")) == phase1.loop_count

        phase2 = phase2_implement(
            phase1.spec, backend, sandbox, tmp_path, spec_approved=phase1.approved, override=True, max_iterations=bound
        )
        assert 1 <= phase2.loop_count <= bound
        assert sandbox.runs == phase2.loop_count
        assert len(backend.transcript.for_role("forge.functional-verifier")) == phase2.loop_count
        assert len(backend.transcript.for_role("forge.code-repairer")) == phase2.loop_count - 1


def test_unapproved_spec_needs_override(tmp_path, make_backend):
    with pytest.raises(PreconditionError):
        phase2_implement(_spec(), make_backend(), FakeSandbox(), tmp_path, spec_approved=False)


def test_verifiers_run_in_parallel(tmp_path, make_backend):
    backend = make_backend()
    result = phase2_implement(_spec(), backend, FakeSandbox(), tmp_path)
    assert result.approved

    pair = backend.transcript.for_role("forge.functional-verifier") + backend.transcript.for_role("forge.directive-verifier")
    assert len(pair) == 2
    assert max(e["issued_seq"] for e in pair) < min(e["completed_seq"] for e in pair)


def test_crashing_program_is_never_approved(tmp_path, make_backend):
    backend = make_backend()
    result = phase2_implement(_spec(), backend, FakeSandbox(stdout="", returncode=1), tmp_path, max_iterations=2)

    assert not result.approved
    assert result.loop_count == 2
    functional, _ = result.reports[-1]
    assert functional.issues[0] == "program crashed with exit status 1"


def test_interpretation_requires_successful_execution(make_backend):
    failed = ModelArtifact("p1", "print(1)\n", ExecutionResult(124, "", "", timed_out=True))
    with pytest.raises(PreconditionError):
        phase3_interpret(failed, _spec(), make_backend())


def test_interpretation_sections(make_backend):
    artifact = ModelArtifact("p1", "print(1)\n", ExecutionResult(0, '{"speedup": 1.5}', ""))
    interpretation = phase3_interpret(artifact, _spec(), make_backend(), paper_text("p1"))
    assert interpretation.feasible
    assert interpretation.magic_gap_none
    assert set(interpretation.sections) >= {"model structure", "assumptions", "findings", "magic gaps"}


def test_rubric_parsing():
    text = "RUN 1: CORRECTNESS=7 INSIGHT=6\nRUN 2: correctness = 11 insight = 4\nRUN 3 - CORRECTNESS=9, INSIGHT=9"
    assert parse_rubric(text, [1, 2, 3]) == {1: (7, 6), 3: (9, 9)}
    assert parse_rubric(text, [1]) == {1: (7, 6)}


def test_select_run_ties_and_failures():
    ok = Interpretation("text", {}, True)
    runs = [ForgeRun(1, cause="phase2-failed: no code"), ForgeRun(2, interpretation=ok), ForgeRun(3, interpretation=ok)]
    pick = select_run(runs, {1: (10, 10), 2: (7, 8), 3: (8, 7)}, "close call")

    assert pick.chosen_run_index == 2
    assert pick.rubric_scores[1] == (0, 0)
    assert pick.to_dict()["rubric_scores"]["3"] == {"correctness": 8, "insight": 7, "combined": 15}

    assert select_run([ForgeRun(1, cause="x")], {}, "").chosen_run_index is None


def test_run_forge_with_mock(make_backend):
    backend = make_backend()
    outcome = run_forge(paper_text("p1"), backend, FakeSandbox(), ForgeSettings(), paper_id="p1")

    assert len(outcome.runs) == 3
    assert all(r.succeeded for r in outcome.runs)
    assert outcome.chosen is not None
    assert outcome.pick.chosen_run_index in (1, 2, 3)

    files = outcome.artifacts()
    for k in (1, 2, 3):
        assert json.loads(files[f"forge/run-{k}/spec.json"])["paper_id"] == "p1"
        assert f"forge/run-{k}/model.src" in files
        assert f"forge/run-{k}/interpretation.md" in files
        assert files[f"forge/run-{k}/execution.log"].startswith("status: exit status 0")
    assert json.loads(files["forge/pick.json"])["chosen_run_index"] == outcome.pick.chosen_run_index
    assert outcome.to_dict()["runs"][0]["loop_counts"] == {"phase1": 1, "phase2": 1}


def test_selector_fallback_picks_lowest_successful_run(make_backend):
    backend = make_backend((("forge.selector", ""), "All three runs look reasonable."))
    outcome = run_forge(paper_text("p1"), backend, FakeSandbox(), paper_id="p1")

    assert outcome.pick.chosen_run_index == 1
    assert "selector output unusable" in outcome.pick.justification


def test_forge_failed_when_every_run_fails(make_backend):
    backend = make_backend((("forge.implementer", ""), "I cannot write this program."))
    with pytest.raises(ForgeFailed) as info:
        run_forge(paper_text("p1"), backend, FakeSandbox(), paper_id="p1")

    assert len(info.value.causes) == 3
    assert all(c.startswith("phase2-failed") for c in info.value.causes)
    assert backend.transcript.for_role("forge.selector") == []


def test_unapproved_spec_halts_run_unless_continued(make_backend):
    backend = make_backend((("forge.spec-verifier", ""), REJECT))
    with pytest.raises(ForgeFailed) as info:
        run_forge(paper_text("p1"), backend, FakeSandbox(), ForgeSettings(runs=1), paper_id="p1")
    assert info.value.causes == ["specification not approved after 3 iterations"]

    backend = make_backend((("forge.spec-verifier", ""), REJECT))
    outcome = run_forge(
        paper_text("p1"), backend, FakeSandbox(), ForgeSettings(runs=1, continue_unapproved=True), paper_id="p1"
    )
    assert outcome.chosen.succeeded


def test_sandbox_preflight_runs_before_any_call(make_backend):
    class MissingSandbox(FakeSandbox):
        def preflight(self):
            raise SandboxUnavailable("sandbox executable not found: /nonexistent")

    backend = make_backend()
    with pytest.raises(SandboxUnavailable):
        run_forge(paper_text("p1"), backend, MissingSandbox(), paper_id="p1")
    assert len(backend.transcript) == 0


def test_one_failed_run_marks_outcome_partial(make_backend):
    class SecondRunCrashes(FakeSandbox):
        def run(self, program_text, workdir):
            result = super().run(program_text, workdir)
            return ExecutionResult(1, "", "Traceback: boom") if workdir.name == "run-2" else result

    outcome = run_forge(paper_text("p1"), make_backend(), SecondRunCrashes(), paper_id="p1")
    assert [r.succeeded for r in outcome.runs] == [True, False, True]
    assert outcome.partial
    assert outcome.to_dict()["partial"] is True
    assert outcome.pick.chosen_run_index in (1, 3)

    complete = run_forge(paper_text("p1"), make_backend(), FakeSandbox(), paper_id="p1")
    assert not complete.partial
