"""
response_parser.py - Structured Model Output Parsing

Agents answer in plain text with light structure. This module turns that
text into fields without trusting anything the model did not label.

Recognized shapes:
- Labelled fields:  "[CONTEXT]: ...", "SYMPTOM: ...", "**Title:** ..."
- Markdown sections: "## Mechanism" followed by a body
- Single-line keys:  "SIMILARITY: EXACT_MATCH", "SCORE: 7"
- Fenced code blocks and JSON payloads
- Bullet lists ("- item", "* item", "1. item")

Every parser returns None / empty when the shape is absent; callers decide
whether that is a re-prompt or a failure.
"""

import json
import re
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, TypeVar

E = TypeVar("E", bound=Enum)

_LABEL_PREFIX = r"^[ \t>*#_-]*\**\[?\s*({labels})\s*\]?\**\s*[:\-]\**[ \t]*"
_SECTION = re.compile(r"^#{2,3}[ \t]+(.+?)[ \t]*#*[ \t]*$", re.MULTILINE)
_FENCE = re.compile(r"```([A-Za-z0-9_+-]*)[ \t]*\n(.*?)```", re.DOTALL)
_BULLET = re.compile(r"^[ \t]*(?:[-*+•]|\d+[.)])[ \t]+(.*\S)[ \t]*$")


def _label_regex(label: str) -> str:
    """Escaped label where any run of spaces/underscores matches any other."""
    words = re.split(r"[\s_]+", label.strip())
    return r"[\s_]+".join(re.escape(word) for word in words)


def _normalize_label(label: str) -> str:
    return re.sub(r"[\s_]+", " ", label.strip()).upper()


def parse_labelled(text: str, labels: Sequence[str]) -> Dict[str, str]:
    """
    Split text into labelled fields.

    A field starts at a line beginning with one of the labels (bracketed or
    not, optionally bold) and runs until the next recognized label.

    Args:
        text: Model output
        labels: Labels to look for, e.g. ["CONTEXT", "SYMPTOM", "CONSTRAINT"]

    Returns:
        Dict from normalized label (upper case) to stripped body. Labels
        that never appear, or appear with an empty body, are absent.
    """
    if not text:
        return {}
    alternatives = "|".join(
        _label_regex(label) for label in sorted(labels, key=len, reverse=True)
    )
    pattern = re.compile(_LABEL_PREFIX.format(labels=alternatives), re.IGNORECASE | re.MULTILINE)

    matches = list(pattern.finditer(text))
    fields: Dict[str, str] = {}
    for i, match in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        body = text[match.end():end].strip()
        key = _normalize_label(match.group(1))
        if body and key not in fields:
            fields[key] = body
    return fields


def parse_sections(text: str) -> List[Tuple[str, str]]:
    """
    Markdown "## Heading" sections in order of appearance.

    Returns:
        List of (heading, body); sections with an empty body are dropped
    """
    if not text:
        return []
    matches = list(_SECTION.finditer(text))
    sections = []
    for i, match in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        body = text[match.end():end].strip()
        if body:
            sections.append((match.group(1).strip(), body))
    return sections


def section_map(text: str) -> Dict[str, str]:
    """Sections keyed by lower-cased heading (first occurrence wins)."""
    result: Dict[str, str] = {}
    for heading, body in parse_sections(text):
        result.setdefault(heading.lower(), body)
    return result


def find_field(text: str, name: str) -> Optional[str]:
    """Value of a single-line "NAME: value" field, or None."""
    if not text:
        return None
    pattern = re.compile(
        r"^[ \t>*#_-]*\**\[?" + _label_regex(name) + r"\]?\**\s*[:=]\**[ \t]*(.+?)[ \t]*$",
        re.IGNORECASE | re.MULTILINE,
    )
    match = pattern.search(text)
    if not match:
        return None
    return match.group(1).strip().strip("*").strip()


def parse_enum(text: str, name: str, enum_cls: Type[E], aliases: Optional[Dict[str, E]] = None) -> Optional[E]:
    """
    Enum value of field `name`.

    Matches the member value case-insensitively, tolerating spaces or
    hyphens for underscores. aliases maps extra spellings to members.
    """
    raw = find_field(text, name)
    if raw is None:
        return None
    token = re.sub(r"[\s-]+", "_", raw.upper())
    token = re.sub(r"[^A-Z0-9_/]", "", token)
    for member in enum_cls:
        if token == str(member.value).upper() or token.startswith(str(member.value).upper()):
            return member
    for alias, member in (aliases or {}).items():
        if token.startswith(alias.upper()):
            return member
    return None


def parse_int(text: str, name: str, lo: int, hi: int) -> Optional[int]:
    """Integer field clamped to nothing: out-of-range values return None."""
    raw = find_field(text, name)
    if raw is None:
        return None
    match = re.search(r"-?\d+", raw)
    if not match:
        return None
    value = int(match.group(0))
    if lo <= value <= hi:
        return value
    return None


def extract_code(text: str, language: Optional[str] = None) -> Optional[str]:
    """
    Body of the first fenced code block.

    If language is given, a block tagged with it is preferred; an untagged
    block is accepted as a fallback.
    """
    if not text:
        return None
    blocks = _FENCE.findall(text)
    if not blocks:
        return None
    if language:
        for tag, body in blocks:
            if tag.lower() == language.lower() and body.strip():
                return body
    for tag, body in blocks:
        if body.strip():
            return body
    return None


def extract_json(text: str) -> Optional[Any]:
    """
    First JSON object or array in the text.

    Looks inside a ```json fence first, then scans for the first bracket
    that starts a decodable value.
    """
    if not text:
        return None
    fenced = extract_code(text, "json")
    candidates = [fenced] if fenced else []
    candidates.append(text)
    decoder = json.JSONDecoder()
    for candidate in candidates:
        for i, ch in enumerate(candidate):
            if ch not in "{[":
                continue
            try:
                value, _ = decoder.raw_decode(candidate[i:])
                return value
            except ValueError:
                continue
    return None


def parse_bullets(body: str) -> List[str]:
    """Bullet or numbered list items; non-list lines continue the previous item."""
    items: List[str] = []
    for line in (body or "").splitlines():
        match = _BULLET.match(line)
        if match:
            items.append(match.group(1).strip())
        elif items and line.strip():
            items[-1] = items[-1] + " " + line.strip()
    return items


def has_digit(text: str) -> bool:
    return any(ch.isdigit() for ch in text or "")
