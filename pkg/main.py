#!/usr/bin/env python3
"""
main.py - Application Entry Point

Gauntlet: multi-agent pipelines for computer-architecture research

WHAT THIS TOOL DOES:
- ideate: extracts problems from papers (clean room), generates mechanisms,
  judges them on two axes and expands solved problems into new ones
- review: six-reviewer panel merged into a Master Class reading guide
- forge:  builds, runs and interprets a performance model of a paper
- funnel: pushes candidates through the tiered evaluation funnel
- corpus: lists / validates the paper corpus

WHAT THIS TOOL DOES NOT DO:
- Schedule recurring cycles or run as a service
- Offer an interactive mode
- Host reports

ORDERING:
Every command validates configuration, paths and the corpus before its
first agent call. Results go to runs/{run_id}/; stdout carries the run id
and one summary line, everything else goes to stderr.

EXIT STATUS: 0 complete, 1 error, 2 partial result
"""

import json
import logging
import sys
import tempfile
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from backend import Backend, BackendConfig, Transcript, create_backend
from cli import CLI, SummaryFormatter
from config import CliConfig, check_paths, load_config
from errors import ConfigurationError, GauntletError
from funnel import ForgeModelHook, load_candidates, run_funnel
from ideation import ExtractionInput, run_ideation
from modelforge import run_forge
from panel import load_library, require_topical, run_panel
from sandbox import Sandbox
from store import (
    TRANSCRIPT_FILE,
    CorpusEntry,
    Pipeline,
    RunRecord,
    RunStatus,
    RunStore,
    ingest_corpus,
    load_problems,
    new_run_id,
    report_artifacts,
)

logger = logging.getLogger("gauntlet.cli")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2

BackendFactory = Callable[[BackendConfig, Transcript], Backend]
CommandResult = Tuple[int, Optional[Path]]


def _corpus(config: CliConfig) -> List[CorpusEntry]:
    if not config.corpus:
        raise ConfigurationError("no corpus configured (set 'corpus' in the config file)")
    entries, _ = ingest_corpus(config.corpus)
    return entries


def _find_paper(config: CliConfig, paper_id: str) -> CorpusEntry:
    for entry in _corpus(config):
        if entry.paper_id == paper_id:
            return entry
    raise ConfigurationError(f"paper '{paper_id}' not found in corpus {config.corpus}")


def _persist(
    config: CliConfig,
    pipeline: Pipeline,
    subject: str,
    report: Dict,
    artifacts: Dict[str, str],
    transcript: Transcript,
) -> Tuple[str, Path]:
    run_id = new_run_id()
    files = dict(artifacts)
    files.update(report_artifacts(report))
    files[TRANSCRIPT_FILE] = transcript.to_jsonl()
    status = RunStatus.PARTIAL if report.get("partial") else RunStatus.COMPLETE
    record = RunRecord(run_id, pipeline, subject, config.snapshot(), TRANSCRIPT_FILE, (), status)
    run_dir = RunStore(config.output).persist_run(record, files)
    print(run_id)
    return run_id, run_dir


def cmd_ideate(
    config: CliConfig,
    papers: Sequence[str] = (),
    make_backend: BackendFactory = create_backend,
) -> CommandResult:
    """
    Run ideation and store ideation/{report.json, report.md, candidates.jsonl}.

    Args:
        config: Validated configuration
        papers: Paper ids to restrict to (empty for the whole corpus)
        make_backend: Backend factory

    Returns:
        (exit status, run directory)
    """
    check_paths(config, need_corpus=True)
    entries, diagnostics = ingest_corpus(config.corpus) if config.corpus else ([], [])
    if papers:
        known = {e.paper_id for e in entries}
        missing = [p for p in papers if p not in known]
        if missing:
            raise ConfigurationError(f"papers not in corpus: {', '.join(missing)}")
        entries = [e for e in entries if e.paper_id in set(papers)]
    problems = load_problems(config.problems) if config.problems else []
    library = load_library(config.panel.persona_library) if config.ideation.panel_review_top else None
    if library is not None:
        require_topical(library)
    sources = [ExtractionInput.from_entry(e) for e in entries]

    transcript = Transcript()
    backend = make_backend(config.backend, transcript)
    report = run_ideation(sources, config.ideation.runs_per_paper, backend, config.ideation, problems, library)
    report.warnings[:0] = [f"corpus: {d}" for d in diagnostics]

    data = report.to_dict()
    candidates = "".join(json.dumps(row, sort_keys=True) + "\n" for row in report.candidates())
    subject = ",".join(papers) if papers else str(config.corpus or config.problems)
    _, run_dir = _persist(config, Pipeline.IDEATION, subject, data, {"ideation/candidates.jsonl": candidates}, transcript)
    print(SummaryFormatter.ideation(data["stats"]))
    return (EXIT_PARTIAL if report.partial else EXIT_OK), run_dir


def cmd_review(config: CliConfig, paper_id: str, make_backend: BackendFactory = create_backend) -> CommandResult:
    """Run the panel on one paper and store panel/{critiques/*.md, masterclass.{md,json}, report.*}."""
    check_paths(config, need_corpus=True)
    entry = _find_paper(config, paper_id)
    library = load_library(config.panel.persona_library)
    require_topical(library)
    text = Path(entry.text_path).read_text(encoding="utf-8")

    transcript = Transcript()
    backend = make_backend(config.backend, transcript)
    outcome = run_panel(text, library, backend, paper_id=paper_id)

    data = outcome.to_dict()
    _, run_dir = _persist(config, Pipeline.PANEL, paper_id, data, outcome.artifacts(), transcript)
    print(SummaryFormatter.panel(data))
    return (EXIT_PARTIAL if outcome.partial else EXIT_OK), run_dir


def cmd_forge(config: CliConfig, paper_id: str, make_backend: BackendFactory = create_backend) -> CommandResult:
    """Run the forge ensemble on one paper and store forge/run-N/... and forge/pick.json."""
    check_paths(config, need_corpus=True)
    entry = _find_paper(config, paper_id)
    sandbox = Sandbox(config.forge.sandbox)
    sandbox.preflight()
    text = Path(entry.text_path).read_text(encoding="utf-8")

    transcript = Transcript()
    backend = make_backend(config.backend, transcript)
    outcome = run_forge(text, backend, sandbox, config.forge, paper_id=paper_id)

    data = outcome.to_dict()
    _, run_dir = _persist(config, Pipeline.FORGE, paper_id, data, outcome.artifacts(), transcript)
    print(SummaryFormatter.forge(data))
    return (EXIT_PARTIAL if outcome.partial else EXIT_OK), run_dir


def cmd_funnel(
    config: CliConfig,
    candidates_path: str,
    forge_models: bool = True,
    make_backend: BackendFactory = create_backend,
) -> CommandResult:
    """
    Evaluate candidates and store funnel/{ledger.json, feedback/*.json, report.*}.

    Tier 2 runs the picked model of every forge run stored under the output
    directory unless forge_models is False.
    """
    check_paths(config)
    if not Path(candidates_path).exists():
        raise ConfigurationError(f"candidates file not found: {candidates_path}")
    candidates = load_candidates(candidates_path)
    sandbox = Sandbox(config.forge.sandbox)
    registry = ForgeModelHook.stored_models(Path(config.output)) if forge_models else {}
    if candidates and (3 in config.funnel.enabled_tiers or registry):
        sandbox.preflight()

    transcript = Transcript()
    backend = make_backend(config.backend, transcript)
    with tempfile.TemporaryDirectory(prefix="gauntlet-funnel-") as workdir:
        hook = ForgeModelHook(registry, sandbox, Path(workdir)) if registry else None
        ledger = run_funnel(candidates, config.funnel, backend, model_hook=hook, sandbox=sandbox, forge_settings=config.forge)

    data = ledger.to_dict()
    artifacts = {f"funnel/{rel}": text for rel, text in ledger.artifacts().items()}
    _, run_dir = _persist(config, Pipeline.FUNNEL, str(candidates_path), data, artifacts, transcript)
    print(SummaryFormatter.funnel(data))
    return (EXIT_PARTIAL if ledger.partial else EXIT_OK), run_dir


def cmd_corpus(config: CliConfig, action: str) -> int:
    """List the corpus, or validate it (exit 1 when any entry is malformed)."""
    if not config.corpus:
        raise ConfigurationError("no corpus configured (set 'corpus' in the config file)")
    entries, diagnostics = ingest_corpus(config.corpus)
    if action == "list":
        print(SummaryFormatter.corpus_table([e.to_dict() for e in entries]))
        return EXIT_OK
    for line in diagnostics:
        print(line)
    print(f"{len(entries)} papers, {len(diagnostics)} problems")
    return EXIT_ERROR if diagnostics else EXIT_OK


def setup_logging(verbose: bool = False) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("[%(name)s] %(message)s"))
    root = logging.getLogger("gauntlet")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main application entry point."""
    parser = CLI.create_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    try:
        overrides = {"backend": args.backend, "seed": args.seed, "out": args.out, "replay": args.replay}
        config = load_config(args.config, overrides)
        if args.command == "ideate" and args.corpus:
            config = config.model_copy(update={"corpus": args.corpus})

        if args.command == "ideate":
            code, _ = cmd_ideate(config, args.paper)
        elif args.command == "review":
            code, _ = cmd_review(config, args.paper_id)
        elif args.command == "forge":
            code, _ = cmd_forge(config, args.paper_id)
        elif args.command == "funnel":
            code, _ = cmd_funnel(config, args.candidates, args.forge_models)
        else:
            code = cmd_corpus(config, args.action)
        return code

    except GauntletError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR

    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
