"""
panel.py - Six-Reviewer Comprehension Panel

A paper is read by six independent reviewers and the critiques are merged
into a single Master Class reading guide.

PANEL:
- 4 fixed personas (always present, defined below)
- 2 topical personas picked from the persona library by overlap with the
  paper's detected topics (ties broken by persona id)

ORDERING:
Reviews fan out concurrently and never see each other. Synthesis starts
only after all six reviews are back; one failed review stops the run with
a partial-panel result and no Master Class.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from backend import Backend, call_agent
from errors import (
    ConfigurationError,
    GauntletError,
    PreconditionError,
    ReviewFailed,
    SynthesisFailed,
    TopicDetectionFailed,
)
from prompts import SYSTEM_PROMPTS, review_prompt, synthesis_prompt, topic_prompt
from response_parser import find_field, parse_bullets, parse_labelled, parse_sections, section_map

logger = logging.getLogger("gauntlet.panel")

MAX_TOPICS = 5
PANEL_SIZE = 6


class PersonaKind(Enum):
    FIXED = "fixed"
    TOPICAL = "topical"


@dataclass(frozen=True)
class Persona:
    id: str
    display_name: str
    kind: PersonaKind
    charter: str
    topic_tags: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.charter.strip():
            raise ConfigurationError(f"persona {self.id} has an empty charter")
        if self.kind is PersonaKind.FIXED and self.topic_tags:
            raise ConfigurationError(f"fixed persona {self.id} cannot carry topic tags")

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "Persona":
        try:
            return Persona(
                id=data["id"],
                display_name=data["display_name"],
                kind=PersonaKind(data["kind"]),
                charter=data["charter"],
                topic_tags=tuple(t.strip().lower() for t in data.get("topic_tags", [])),
            )
        except (KeyError, ValueError, AttributeError) as e:
            raise ConfigurationError(f"malformed persona entry {data!r}: {e}")


FIXED_PERSONAS: Tuple[Persona, ...] = (
    Persona(
        "microarchitecture-specialist",
        "Microarchitecture Specialist",
        PersonaKind.FIXED,
        "How does this actually work in silicon, down to the bits in each structure?",
    ),
    Persona(
        "workload-analyst",
        "Workload Analyst",
        PersonaKind.FIXED,
        "Are these benchmarks representative, and would the result hold on the workloads that matter?",
    ),
    Persona(
        "simulation-tools-expert",
        "Simulation Tools Expert",
        PersonaKind.FIXED,
        "Can the simulator and methodology used here be trusted to show this result?",
    ),
    Persona(
        "chief-architect",
        "Chief Architect",
        PersonaKind.FIXED,
        "Would I put this in the next product, and what would it displace?",
    ),
)


def load_library(path) -> List[Persona]:
    """
    Load a persona library JSON file.

    Raises:
        ConfigurationError: unreadable file, malformed entry or duplicate id
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read persona library {path}: {e}")
    if not isinstance(raw, list):
        raise ConfigurationError(f"persona library {path} must be a JSON array")
    personas = [Persona.from_dict(item) for item in raw]
    ids = [p.id for p in personas]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise ConfigurationError(f"duplicate persona ids: {', '.join(duplicates)}")
    return personas


@dataclass(frozen=True)
class PersonaSelection:
    personas: Tuple[Persona, Persona]
    fallback: bool
    scores: Dict[str, int]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "persona_ids": [p.id for p in self.personas],
            "fallback": self.fallback,
            "scores": {p.id: self.scores[p.id] for p in self.personas},
        }


@dataclass(frozen=True)
class Critique:
    persona_id: str
    paper_id: str
    sections: Tuple[Tuple[str, str], ...]
    stance_summary: str

    def __post_init__(self):
        if not self.sections:
            raise PreconditionError(f"critique by {self.persona_id} has no sections")

    def render(self) -> str:
        body = "\n\n".join(f"## {heading}\n{text}" for heading, text in self.sections)
        return f"{body}\n\nSTANCE: {self.stance_summary}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "persona_id": self.persona_id,
            "paper_id": self.paper_id,
            "sections": [{"heading": h, "body": b} for h, b in self.sections],
            "stance_summary": self.stance_summary,
        }


@dataclass(frozen=True)
class MasterClass:
    paper_id: str
    agreements: Tuple[str, ...]
    tensions: Tuple[str, ...]
    core_insight: str
    frank_limitations: str
    full_text: str

    def __post_init__(self):
        if not self.core_insight.strip():
            raise PreconditionError("master class needs a core insight")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "paper_id": self.paper_id,
            "agreements": list(self.agreements),
            "tensions": list(self.tensions),
            "core_insight": self.core_insight,
            "frank_limitations": self.frank_limitations,
            "full_text": self.full_text,
        }

    def to_markdown(self) -> str:
        return f"# Master Class: {self.paper_id}\n\n{self.full_text.strip()}\n"


@dataclass
class PanelOutcome:
    paper_id: str
    topics: List[str]
    selection: PersonaSelection
    panel: List[Persona]
    critiques: List[Critique] = field(default_factory=list)
    failures: List[Dict[str, str]] = field(default_factory=list)
    masterclass: Optional[MasterClass] = None

    @property
    def partial(self) -> bool:
        return self.masterclass is None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pipeline": "panel",
            "paper_id": self.paper_id,
            "partial": self.partial,
            "topics": list(self.topics),
            "selection": self.selection.to_dict(),
            "panel": [{"id": p.id, "display_name": p.display_name, "kind": p.kind.value} for p in self.panel],
            "critiques": [c.to_dict() for c in self.critiques],
            "failures": list(self.failures),
            "masterclass": self.masterclass.to_dict() if self.masterclass else None,
        }

    def artifacts(self) -> Dict[str, str]:
        """One Markdown file per critique plus the guide (Markdown and JSON) when synthesis ran."""
        files = {f"panel/critiques/{c.persona_id}.md": c.render() + "\n" for c in self.critiques}
        if self.masterclass:
            files["panel/masterclass.md"] = self.masterclass.to_markdown()
            files["panel/masterclass.json"] = json.dumps(self.masterclass.to_dict(), sort_keys=True, indent=2) + "\n"
        return files


def detect_topics(paper_text: str, backend: Backend) -> List[str]:
    """
    Detect up to five sub-topic tags, most central first.

    Raises:
        TopicDetectionFailed: no tags could be parsed
    """
    if not paper_text.strip():
        raise PreconditionError("paper text is empty")
    text = call_agent(backend, "topic-detector", SYSTEM_PROMPTS["topic-detector"], topic_prompt(paper_text))
    body = parse_labelled(text, ["TOPICS"]).get("TOPICS", text)
    items = parse_bullets(body)
    if not items:
        items = body.split(",") if "\n" not in body.strip() else []
    tags: List[str] = []
    for item in items:
        tag = " ".join(item.strip().strip(".\"'`").lower().split())
        if tag and tag not in tags:
            tags.append(tag)
    if not tags:
        raise TopicDetectionFailed("no topic tags in detector output")
    return tags[:MAX_TOPICS]


def select_personas(tags: Sequence[str], library: Sequence[Persona]) -> PersonaSelection:
    """
    Pick the two topical personas with the largest tag overlap.

    Ties go to the lexicographically smaller id. With no overlap at all the
    first two ids are used and the selection is flagged as a fallback.

    Raises:
        ConfigurationError: fewer than two topical personas
    """
    require_topical(library)
    topical = [p for p in library if p.kind is PersonaKind.TOPICAL]
    wanted = {t.strip().lower() for t in tags}
    scores = {p.id: len(wanted & set(p.topic_tags)) for p in topical}
    ranked = sorted(topical, key=lambda p: (-scores[p.id], p.id))
    chosen = (ranked[0], ranked[1])
    return PersonaSelection(chosen, fallback=all(s == 0 for s in scores.values()), scores=scores)


def _parse_critique(text: str) -> Tuple[List[Tuple[str, str]], str]:
    stance = find_field(text, "STANCE") or ""
    sections = []
    for heading, body in parse_sections(text):
        kept = "\n".join(line for line in body.splitlines() if not line.strip().upper().startswith("STANCE:")).strip()
        if kept:
            sections.append((heading, kept))
    return sections, stance


def review(paper_text: str, persona: Persona, backend: Backend, paper_id: str = "paper") -> Critique:
    """
    One persona's independent critique.

    The prompt carries the paper and the persona's own charter only.

    Raises:
        ReviewFailed: no sections after one re-prompt
    """
    reason: Optional[str] = None
    for attempt in (1, 2):
        text = call_agent(
            backend,
            "reviewer",
            SYSTEM_PROMPTS["reviewer"],
            review_prompt(paper_text, persona.display_name, persona.charter, reason),
            request_tag=f"{paper_id}/review/{persona.id}/{attempt}",
        )
        sections, stance = _parse_critique(text)
        if sections:
            if not stance:
                stance = sections[-1][1].splitlines()[0]
            return Critique(persona.id, paper_id, tuple(sections), stance)
        reason = "no '## ' sections found"
    raise ReviewFailed(f"{persona.id}: critique has no sections")


def _list_items(body: str) -> Tuple[str, ...]:
    items = parse_bullets(body)
    return tuple(items) if items else ((body.strip(),) if body.strip() else ())


def synthesize(
    critiques: Sequence[Critique],
    paper_text: str,
    backend: Backend,
    names: Optional[Dict[str, str]] = None,
) -> MasterClass:
    """
    Merge six critiques into a Master Class guide.

    Raises:
        PreconditionError: not exactly six critiques for one paper (no model call made)
        SynthesisFailed: no core insight after one re-prompt
    """
    if len(critiques) != PANEL_SIZE:
        raise PreconditionError(f"synthesis needs {PANEL_SIZE} critiques, got {len(critiques)}")
    paper_ids = {c.paper_id for c in critiques}
    if len(paper_ids) != 1:
        raise PreconditionError(f"critiques span several papers: {sorted(paper_ids)}")
    paper_id = paper_ids.pop()
    names = names or {}
    blocks = [{"reviewer": names.get(c.persona_id, c.persona_id), "text": c.render()} for c in critiques]

    reason: Optional[str] = None
    for attempt in (1, 2):
        text = call_agent(
            backend,
            "synthesizer",
            SYSTEM_PROMPTS["synthesizer"],
            synthesis_prompt(paper_text, blocks, reason),
            request_tag=f"{paper_id}/synthesis/{attempt}",
        )
        sections = section_map(text)
        core = sections.get("core insight", "")
        if core:
            return MasterClass(
                paper_id=paper_id,
                agreements=_list_items(sections.get("agreements", "")),
                tensions=_list_items(sections.get("tensions", "")),
                core_insight=core,
                frank_limitations=sections.get("frank limitations", ""),
                full_text=text.strip(),
            )
        reason = "the '## Core Insight' section is missing"
    raise SynthesisFailed(f"{paper_id}: guide has no core insight")


def require_topical(library: Sequence[Persona]) -> None:
    """
    Raises:
        ConfigurationError: fewer than two topical personas
    """
    topical_count = sum(1 for p in library if p.kind is PersonaKind.TOPICAL)
    if topical_count < 2:
        raise ConfigurationError(f"persona library has {topical_count} topical personas; need at least 2")


def run_panel(
    paper_text: str,
    library: Sequence[Persona],
    backend: Backend,
    paper_id: str = "paper",
) -> PanelOutcome:
    """
    Full panel: topics -> persona selection -> six reviews -> synthesis.

    Args:
        paper_text: Document under review
        library: Persona library (topical personas are drawn from it)
        backend: Agent backend
        paper_id: Identifier stamped on critiques and the guide

    Returns:
        PanelOutcome; masterclass is None when any review failed
    """
    require_topical(library)
    topics = detect_topics(paper_text, backend)
    selection = select_personas(topics, library)
    if selection.fallback:
        logger.warning("%s: no persona matches topics %s; using fallback selection", paper_id, topics)
    panel = list(FIXED_PERSONAS) + list(selection.personas)
    outcome = PanelOutcome(paper_id, topics, selection, panel)

    with ThreadPoolExecutor(max_workers=PANEL_SIZE) as pool:
        futures = [pool.submit(review, paper_text, persona, backend, paper_id) for persona in panel]
        for persona, future in zip(panel, futures):
            try:
                outcome.critiques.append(future.result())
            except GauntletError as e:
                logger.warning("%s: review by %s failed (%s)", paper_id, persona.id, e.code)
                outcome.failures.append({"persona_id": persona.id, **e.to_record()})

    if outcome.failures:
        return outcome

    names = {p.id: p.display_name for p in panel}
    try:
        outcome.masterclass = synthesize(outcome.critiques, paper_text, backend, names)
    except SynthesisFailed as e:
        logger.warning("%s: %s", paper_id, e)
        outcome.failures.append({"persona_id": "synthesizer", **e.to_record()})
    return outcome
