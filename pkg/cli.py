"""
cli.py - Command-Line Interface and Summary Formatting

Provides argparse configuration and the one-line summaries printed after
each pipeline.
"""

import argparse
from typing import Any, Dict, List, Sequence


class CLI:
    """Command-line interface handler."""

    @staticmethod
    def create_parser() -> argparse.ArgumentParser:
        """
        Create and configure argument parser.

        Returns:
            Configured ArgumentParser
        """
        parser = argparse.ArgumentParser(
            prog='gauntlet',
            description='Gauntlet - multi-agent pipelines for computer-architecture research',
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  # Ideation over every paper in the corpus, offline
  python main.py --backend mock --seed 7 ideate --corpus corpus/

  # Ideation for two papers only
  python main.py --config gauntlet.json ideate --paper ship --paper hawkeye

  # Six-reviewer panel and Master Class for one paper
  python main.py --config gauntlet.json review ship

  # Build, run and interpret a performance model of a paper
  python main.py --config gauntlet.json forge ship

  # Push ideation candidates through the evaluation funnel
  python main.py --config gauntlet.json funnel runs/<run_id>/ideation/candidates.jsonl

  # Re-run from a recorded transcript
  python main.py --backend replay --replay runs/<run_id>/transcript.jsonl ideate

  # Check the corpus
  python main.py --config gauntlet.json corpus validate

Exit status: 0 complete, 1 error, 2 partial result.
            """
        )

        parser.add_argument(
            '--config',
            type=str,
            metavar='PATH',
            help='JSON configuration file (default: built-in defaults)'
        )

        parser.add_argument(
            '--backend',
            type=str,
            choices=['http', 'mock', 'replay'],
            help='Agent backend; overrides the config file'
        )

        parser.add_argument(
            '--seed',
            type=int,
            metavar='N',
            help='Seed for the mock backend'
        )

        parser.add_argument(
            '--out',
            type=str,
            metavar='PATH',
            help='Output root for run directories (default: runs/)'
        )

        parser.add_argument(
            '--replay',
            type=str,
            metavar='PATH',
            help='Transcript to replay (with --backend replay)'
        )

        parser.add_argument(
            '--verbose',
            action='store_true',
            help='Debug logging on stderr'
        )

        commands = parser.add_subparsers(dest='command', metavar='COMMAND')
        commands.required = True

        ideate = commands.add_parser('ideate', help='Clean-room ideation over the corpus')
        ideate.add_argument(
            '--paper',
            action='append',
            default=[],
            metavar='ID',
            help='Restrict to this paper id (repeatable; default: every paper)'
        )
        ideate.add_argument(
            '--corpus',
            type=str,
            metavar='PATH',
            help='Corpus directory; overrides the config file'
        )

        review = commands.add_parser('review', help='Six-reviewer panel and Master Class')
        review.add_argument('paper_id', help='Paper id in the corpus')

        forge = commands.add_parser('forge', help='Performance-model construction ensemble')
        forge.add_argument('paper_id', help='Paper id in the corpus')

        funnel = commands.add_parser('funnel', help='Tiered evaluation of candidates')
        funnel.add_argument('candidates', help='candidates.jsonl written by ideate')
        funnel.add_argument(
            '--no-forge-models',
            dest='forge_models',
            action='store_false',
            help='Skip the stored forge models that otherwise serve as the tier-2 analytical hook'
        )

        corpus = commands.add_parser('corpus', help='Inspect the corpus')
        corpus.add_argument('action', choices=['list', 'validate'])

        return parser


class SummaryFormatter:
    """Format pipeline results for stdout."""

    @staticmethod
    def ideation(stats: Dict[str, Any]) -> str:
        """
        Format the corpus statistics line.

        Args:
            stats: RunStats.to_dict()

        Returns:
            "n=.. viable=.. rediscovery=.. alternative=.. fail=.."
        """
        return (
            f"n={stats['n_total']} viable={stats['n_viable']} "
            f"rediscovery={stats['n_rediscovery']} alternative={stats['n_alternative']} "
            f"fail={stats['n_fail']}"
        )

    @staticmethod
    def panel(report: Dict[str, Any]) -> str:
        guide = 'yes' if report['masterclass'] else 'no'
        return f"critiques={len(report['critiques'])} failures={len(report['failures'])} masterclass={guide}"

    @staticmethod
    def forge(report: Dict[str, Any]) -> str:
        succeeded = sum(1 for r in report['runs'] if r['status'] == 'complete')
        chosen = report['pick']['chosen_run_index']
        return f"runs={len(report['runs'])} succeeded={succeeded} chosen={chosen if chosen is not None else '-'}"

    @staticmethod
    def funnel(report: Dict[str, Any]) -> str:
        tiers = report['tiers']
        chain = ' -> '.join(str(t['passed']) for t in tiers)
        return f"entered={tiers[0]['entered']} survivors: {chain}"

    @staticmethod
    def corpus_table(entries: Sequence[Dict[str, Any]]) -> str:
        """
        Format corpus entries as a table.

        Args:
            entries: CorpusEntry.to_dict() rows

        Returns:
            Formatted table string
        """
        if not entries:
            return "No papers found in corpus."

        lines: List[str] = []
        header = f"{'PAPER':<30} | {'WINDOW':>7} | {'TRUTH':<5} | {'TAGS':<30}"
        lines.append(header)
        lines.append('-' * len(header))
        for entry in entries:
            truth = 'yes' if entry['ground_truth_available'] else 'no'
            tags = SummaryFormatter._format_text(', '.join(entry['tags']), max_len=30)
            paper = SummaryFormatter._format_text(entry['paper_id'], max_len=30)
            lines.append(f"{paper:<30} | {entry['problem_window']:>7} | {truth:<5} | {tags:<30}")
        return '\n'.join(lines)

    @staticmethod
    def _format_text(text: str, max_len: int = 30) -> str:
        text = ' '.join(text.split())
        if len(text) > max_len:
            return text[:max_len - 3] + '...'
        return text
