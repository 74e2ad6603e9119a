"""End-to-end tests of the commands, run against the mock backend."""

import json
import os
import random
from functools import partial

import pytest

import main as main_module
from conftest import CountingFactory, FakeSandbox
from errors import ConfigurationError, SandboxUnavailable
from funnel import NO_ANALYTICAL_MODEL, TierDecision, run_funnel
from kernel import MechanismProposal
from main import EXIT_ERROR, EXIT_OK, EXIT_PARTIAL, cmd_corpus, cmd_forge, cmd_funnel, cmd_ideate, cmd_review, main
from sandbox import ExecutionResult

posix_only = pytest.mark.skipif(os.name != "posix", reason="sandbox limits need a POSIX host")


def _read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


def test_missing_corpus_fails_before_any_backend(make_config, tmp_path, capsys):
    factory = CountingFactory()
    config = make_config(tmp_path / "missing")
    with pytest.raises(ConfigurationError):
        cmd_ideate(config, make_backend=factory)
    assert factory.calls == 0

    assert main(["--backend", "mock", "ideate", "--corpus", str(tmp_path / "missing")]) == EXIT_ERROR
    assert "Error: corpus not found" in capsys.readouterr().err


def test_unknown_paper_rejected(make_corpus, make_config):
    factory = CountingFactory()
    with pytest.raises(ConfigurationError):
        cmd_ideate(make_config(make_corpus(["p1"])), papers=["p9"], make_backend=factory)
    assert factory.calls == 0


def test_ideate_writes_run(make_corpus, make_config, capsys):
    code, run_dir = cmd_ideate(make_config(make_corpus(["p1"])), make_backend=CountingFactory())

    assert code == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0] == run_dir.name
    assert out[1].startswith("n=5 viable=5 ")
    for name in ("run.json", "COMPLETE", "transcript.jsonl", "ideation/report.json", "ideation/report.md"):
        assert (run_dir / name).exists()
    lines = (run_dir / "ideation" / "candidates.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 25
    record = _read_json(run_dir / "run.json")
    assert record["pipeline"] == "ideation"
    assert record["status"] == "complete"
    assert record["config"]["backend"]["seed"] == 7


def test_ideate_partial_exit(make_corpus, make_config):
    factory = CountingFactory((("extractor", ""), "nothing useful"))
    code, run_dir = cmd_ideate(make_config(make_corpus(["p1"]), ideation={"runs_per_paper": 2}), make_backend=factory)

    assert code == EXIT_PARTIAL
    assert _read_json(run_dir / "run.json")["status"] == "partial"
    assert (run_dir / "ideation" / "report.md").read_text(encoding="utf-8").startswith("> **PARTIAL**")


def test_review_writes_masterclass(make_corpus, make_config, capsys):
    code, run_dir = cmd_review(make_config(make_corpus(["p1"])), "p1", make_backend=CountingFactory())

    assert code == EXIT_OK
    assert (run_dir / "panel" / "masterclass.md").exists()
    guide = _read_json(run_dir / "panel" / "masterclass.json")
    assert guide["paper_id"] == "p1"
    assert guide["core_insight"]
    assert len(list((run_dir / "panel" / "critiques").glob("*.md"))) == 6
    assert capsys.readouterr().out.splitlines()[1] == "critiques=6 failures=0 masterclass=yes"


def test_review_failure_is_partial(make_corpus, make_config):
    factory = CountingFactory((("reviewer", "You are Chief Architect."), "no structure here"))
    code, run_dir = cmd_review(make_config(make_corpus(["p1"])), "p1", make_backend=factory)

    assert code == EXIT_PARTIAL
    assert not (run_dir / "panel" / "masterclass.md").exists()
    assert not (run_dir / "panel" / "masterclass.json").exists()


def test_review_needs_two_topical_personas(make_corpus, make_config, tmp_path):
    library = tmp_path / "personas.json"
    library.write_text(json.dumps([{
        "id": "solo", "display_name": "Solo", "kind": "topical", "charter": "Why?", "topic_tags": ["caches"],
    }]), encoding="utf-8")
    factory = CountingFactory()
    config = make_config(make_corpus(["p1"]), panel={"persona_library": str(library)})

    with pytest.raises(ConfigurationError):
        cmd_review(config, "p1", make_backend=factory)
    assert factory.calls == 0


@posix_only
def test_forge_writes_pick(make_corpus, make_config, capsys):
    config = make_config(make_corpus(["p1"]), forge={"runs": 2})
    code, run_dir = cmd_forge(config, "p1", make_backend=CountingFactory())

    assert code == EXIT_OK
    pick = _read_json(run_dir / "forge" / "pick.json")
    assert pick["chosen_run_index"] in (1, 2)
    assert (run_dir / "forge" / f"run-{pick['chosen_run_index']}" / "model.src").exists()
    assert capsys.readouterr().out.splitlines()[1].startswith("runs=2 succeeded=2 chosen=")


def test_forge_failed_run_is_partial(make_corpus, make_config, monkeypatch):
    class FirstRunCrashes(FakeSandbox):
        def run(self, program_text, workdir):
            result = super().run(program_text, workdir)
            return ExecutionResult(1, "", "boom") if workdir.name == "run-1" else result

    monkeypatch.setattr(main_module, "Sandbox", lambda settings: FirstRunCrashes())
    code, run_dir = cmd_forge(make_config(make_corpus(["p1"]), forge={"runs": 2}), "p1", make_backend=CountingFactory())

    assert code == EXIT_PARTIAL
    assert _read_json(run_dir / "run.json")["status"] == "partial"
    assert _read_json(run_dir / "forge" / "pick.json")["chosen_run_index"] == 2


def test_forge_without_sandbox(make_corpus, make_config):
    factory = CountingFactory()
    config = make_config(
        make_corpus(["p1"]), forge={"sandbox": {"command": ["/nonexistent/python3", "{runner}", "{program}"]}}
    )
    with pytest.raises(SandboxUnavailable):
        cmd_forge(config, "p1", make_backend=factory)
    assert factory.calls == 0


def test_funnel_empty_input(make_config, tmp_path):
    path = tmp_path / "candidates.jsonl"
    path.write_text("", encoding="utf-8")
    code, run_dir = cmd_funnel(make_config(), str(path), make_backend=CountingFactory())

    assert code == EXIT_OK
    ledger = _read_json(run_dir / "funnel" / "ledger.json")
    assert [t["entered"] for t in ledger["tiers"]] == [0] * 6


def test_funnel_malformed_input(write_config, tmp_path, capsys):
    path = tmp_path / "candidates.jsonl"
    path.write_text('\n{"proposal": {"id": "a"}}\n', encoding="utf-8")
    config = write_config({"backend": {"kind": "mock", "seed": 1}, "output": str(tmp_path / "runs")})

    assert main(["--config", str(config), "funnel", str(path)]) == EXIT_ERROR
    assert ":2:" in capsys.readouterr().err
    assert not (tmp_path / "runs").exists()


def test_same_seed_same_report(make_corpus, make_config):
    config = make_config(make_corpus(["p1", "p2"]), ideation={"runs_per_paper": 2, "n_proposals": 3})
    _, first = cmd_ideate(config, make_backend=CountingFactory())
    _, second = cmd_ideate(config, make_backend=CountingFactory())

    assert first != second
    assert (first / "ideation" / "report.json").read_text(encoding="utf-8") == (
        second / "ideation" / "report.json"
    ).read_text(encoding="utf-8")


def test_replay_reproduces_report(make_corpus, write_config, tmp_path, capsys):
    corpus = make_corpus(["p1", "p2"])
    config = write_config({
        "backend": {"kind": "mock", "seed": 11},
        "corpus": str(corpus),
        "output": str(tmp_path / "recorded"),
        "ideation": {"runs_per_paper": 2, "n_proposals": 2},
    })
    assert main(["--config", str(config), "ideate"]) == EXIT_OK
    recorded = tmp_path / "recorded" / capsys.readouterr().out.splitlines()[0]

    code = main([
        "--config", str(config), "--backend", "replay", "--replay", str(recorded / "transcript.jsonl"),
        "--out", str(tmp_path / "replayed"), "ideate",
    ])
    assert code == EXIT_OK
    replayed = tmp_path / "replayed" / capsys.readouterr().out.splitlines()[0]
    for name in ("ideation/report.json", "ideation/report.md", "ideation/candidates.jsonl"):
        assert (replayed / name).read_text(encoding="utf-8") == (recorded / name).read_text(encoding="utf-8")
    assert _read_json(replayed / "run.json")["config"]["backend"]["kind"] == "replay"


def test_same_seed_same_review(make_corpus, make_config):
    config = make_config(make_corpus(["p1"]))
    _, first = cmd_review(config, "p1")
    _, second = cmd_review(config, "p1")
    assert (first / "panel" / "report.json").read_bytes() == (second / "panel" / "report.json").read_bytes()


@posix_only
def test_same_seed_same_forge(make_corpus, make_config):
    config = make_config(make_corpus(["p1"]))
    _, first = cmd_forge(config, "p1")
    _, second = cmd_forge(config, "p1")
    assert (first / "forge" / "report.json").read_bytes() == (second / "forge" / "report.json").read_bytes()
    assert (first / "forge" / "pick.json").read_bytes() == (second / "forge" / "pick.json").read_bytes()


def test_ideate_then_funnel(make_corpus, make_config, monkeypatch, capsys):
    sandbox = FakeSandbox()
    monkeypatch.setattr(main_module, "Sandbox", lambda settings: sandbox)
    config = make_config(
        make_corpus(["a", "b", "c"]),
        ideation={"runs_per_paper": 2, "n_proposals": 2},
        forge={"runs": 1},
    )
    code, ideation_dir = cmd_ideate(config, make_backend=CountingFactory())
    assert code == EXIT_OK

    code, funnel_dir = cmd_funnel(
        config, str(ideation_dir / "ideation" / "candidates.jsonl"), make_backend=CountingFactory()
    )
    assert code == EXIT_OK
    ledger = _read_json(funnel_dir / "funnel" / "ledger.json")
    assert [t["passed"] for t in ledger["tiers"]] == [12] * 6
    assert ledger["warnings"] == [f"tier 2: {NO_ANALYTICAL_MODEL}"]
    tier3 = [d for d in ledger["decisions"] if d["tier"] == 3]
    assert len(tier3) == 12
    assert all("pick" in d["details"] for d in tier3)
    assert sandbox.runs >= 12
    assert capsys.readouterr().out.splitlines()[-1] == "entered=12 survivors: 12 -> 12 -> 12 -> 12 -> 12 -> 12"


def _store_forge_run(runs_dir, paper_id):
    run_dir = runs_dir / f"20260101T000000Z-forge-{paper_id}"
    (run_dir / "forge" / "run-1").mkdir(parents=True)
    (run_dir / "run.json").write_text(json.dumps({"subject": paper_id}), encoding="utf-8")
    (run_dir / "forge" / "pick.json").write_text(json.dumps({"chosen_run_index": 1}), encoding="utf-8")
    (run_dir / "forge" / "run-1" / "model.src").write_text("print('{}')\n", encoding="utf-8")


def test_funnel_uses_stored_forge_models(make_corpus, make_config, monkeypatch, tmp_path):
    sandbox = FakeSandbox(stdout='{"T_total": 2.0, "speedup": 1.25}')
    monkeypatch.setattr(main_module, "Sandbox", lambda settings: sandbox)
    config = make_config(
        make_corpus(["a", "b"]),
        ideation={"runs_per_paper": 1, "n_proposals": 2},
        funnel={"enabled_tiers": [0, 1, 2]},
    )
    _, ideation_dir = cmd_ideate(config, make_backend=CountingFactory())
    candidates = str(ideation_dir / "ideation" / "candidates.jsonl")
    _store_forge_run(tmp_path / "runs", "a")

    code, funnel_dir = cmd_funnel(config, candidates, make_backend=CountingFactory())
    assert code == EXIT_OK
    ledger = _read_json(funnel_dir / "funnel" / "ledger.json")
    assert ledger["warnings"] == []
    tier2 = [d for d in ledger["decisions"] if d["tier"] == 2]
    modelled = [d for d in tier2 if d["candidate_id"].startswith("a-")]
    assert modelled
    assert all(d["details"]["estimates"] == {"T_total": 2.0, "speedup": 1.25} for d in modelled)
    assert all(d["feedback"] == NO_ANALYTICAL_MODEL for d in tier2 if d["candidate_id"].startswith("b-"))
    assert sandbox.runs == len(modelled)

    _, skipped_dir = cmd_funnel(config, candidates, forge_models=False, make_backend=CountingFactory())
    assert _read_json(skipped_dir / "funnel" / "ledger.json")["warnings"] == [f"tier 2: {NO_ANALYTICAL_MODEL}"]
    assert sandbox.runs == len(modelled)


def test_funnel_of_ten_thousand_candidates(make_config, monkeypatch, tmp_path):
    rates = {0: 0.6, 1: 0.5, 2: 0.8, 3: 0.7}

    def evaluator(tier):
        def evaluate(candidate):
            passed = random.Random(f"{candidate.id}:{tier}").random() < rates[tier]
            return TierDecision(candidate.id, tier, passed, "" if passed else "rejected")
        return evaluate

    monkeypatch.setattr(main_module, "Sandbox", lambda settings: FakeSandbox())
    monkeypatch.setattr(main_module, "run_funnel", partial(run_funnel, evaluators={k: evaluator(k) for k in rates}))

    path = tmp_path / "candidates.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        for i in range(10000):
            proposal = MechanismProposal(
                f"p{i % 50}-r1-m{i}", f"p{i % 50}-r1", f"Design {i}",
                "A small table tracks reuse.", "Reuse predicts value.", "Compare with LRU.", 0.5,
            )
            f.write(json.dumps({"proposal": proposal.to_dict()}) + "\n")
    quotas = {0: 2000, 1: 500, 2: 100, 3: 20}

    code, run_dir = cmd_funnel(make_config(funnel={"quotas": quotas}), str(path), make_backend=CountingFactory())
    assert code == EXIT_OK
    tiers = _read_json(run_dir / "funnel" / "ledger.json")["tiers"]
    assert tiers[0]["entered"] == 10000
    assert tiers[0]["passed"] == 2000
    for tier in range(1, 6):
        assert tiers[tier]["entered"] == tiers[tier - 1]["passed"]
    for tier, quota in quotas.items():
        assert tiers[tier]["passed"] <= quota
    assert 0 < tiers[5]["passed"] <= 20


def test_corpus_commands(make_corpus, make_config, capsys):
    corpus = make_corpus(["p1", "p2"])
    config = make_config(corpus)
    assert cmd_corpus(config, "list") == EXIT_OK
    table = capsys.readouterr().out
    assert "p1" in table and "p2" in table

    assert cmd_corpus(config, "validate") == EXIT_OK
    (corpus / "broken").mkdir()
    assert cmd_corpus(config, "validate") == EXIT_ERROR
    assert "2 papers, 1 problems" in capsys.readouterr().out


def test_main_with_flags_only(make_corpus, tmp_path, capsys):
    corpus = make_corpus(["p1"])
    code = main([
        "--backend", "mock", "--seed", "3", "--out", str(tmp_path / "out"),
        "ideate", "--corpus", str(corpus),
    ])
    assert code == EXIT_OK
    run_id = capsys.readouterr().out.splitlines()[0]
    record = _read_json(tmp_path / "out" / run_id / "run.json")
    assert record["config"]["backend"]["seed"] == 3
    assert record["subject"] == str(corpus)
