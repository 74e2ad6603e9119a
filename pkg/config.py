"""
config.py - Configuration Loading

One JSON file configures every pipeline. Command-line flags override the
file (flags win). Unknown keys anywhere are rejected.

LAYOUT:
{
  "backend":  {"kind": "mock", "seed": 42, "max_parallel": 4, ...},
  "corpus":   "corpus/",
  "problems": "problems.jsonl",          (optional, pre-formatted problems)
  "output":   "runs/",
  "ideation": {"runs_per_paper": 5, "n_proposals": 5, "temp_lo": 0.5, ...},
  "panel":    {"persona_library": "personas.json"},
  "forge":    {"runs": 3, "sandbox": {"wall_clock_s": 120, ...}},
  "funnel":   {"consensus_threshold": 4, "quotas": {"0": 2000}, ...}
}
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from backend import BackendConfig, BackendKind
from errors import ConfigurationError
from kernel import temperature_ladder

logger = logging.getLogger("gauntlet.cli")

DEFAULT_PERSONA_LIBRARY = Path(__file__).resolve().parent / "personas.json"
DEFAULT_PROBLEM_WINDOW = 12000


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class IdeationSettings(_Section):
    runs_per_paper: int = Field(default=5, ge=1)
    n_proposals: int = Field(default=5, ge=1)
    temps: Optional[List[float]] = None
    temp_lo: float = Field(default=0.5, ge=0.0, le=2.0)
    temp_hi: float = Field(default=0.9, ge=0.0, le=2.0)
    recursion_depth: int = Field(default=1, ge=0)
    generality_threshold: int = Field(default=7, ge=1, le=10)
    leak_ngram: int = Field(default=8, ge=2)
    extraction_temperature: float = Field(default=0.0, ge=0.0, le=2.0)
    architect_variants: List[str] = Field(default_factory=list)
    feedback_dir: Optional[str] = None
    panel_review_top: bool = False

    @model_validator(mode="after")
    def _check_temps(self) -> "IdeationSettings":
        if self.temps is not None and len(self.temps) != self.n_proposals:
            raise ValueError(f"temps has {len(self.temps)} values but n_proposals is {self.n_proposals}")
        return self

    def ladder(self) -> List[float]:
        """Sampling temperature per proposal slot."""
        if self.temps is not None:
            return list(self.temps)
        if self.n_proposals == 1:
            return [self.temp_lo]
        return temperature_ladder(self.n_proposals, self.temp_lo, self.temp_hi)


class PanelSettings(_Section):
    persona_library: str = str(DEFAULT_PERSONA_LIBRARY)


class SandboxSettings(_Section):
    # Placeholders: {python}, {runner}, {program}, {workdir}
    command: List[str] = Field(default_factory=lambda: ["{python}", "{runner}", "{program}"])
    wall_clock_s: float = Field(default=120.0, gt=0)
    memory_bytes: int = Field(default=1 << 30, gt=0)


class ForgeSettings(_Section):
    runs: int = Field(default=3, ge=1, le=3)
    max_iterations: int = Field(default=3, ge=1, le=3)
    continue_unapproved: bool = False
    sandbox: SandboxSettings = Field(default_factory=SandboxSettings)


class FunnelSettings(_Section):
    enabled_tiers: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    consensus_threshold: int = Field(default=4, ge=1, le=4)
    quotas: Dict[int, int] = Field(default_factory=dict)
    strict_tier2: bool = False
    tier0_checklist: Optional[Dict[str, str]] = None

    @field_validator("enabled_tiers")
    @classmethod
    def _tiers_in_range(cls, value: List[int]) -> List[int]:
        for tier in value:
            if not 0 <= tier <= 5:
                raise ValueError(f"tier {tier} outside 0-5")
        return sorted(set(value))

    @field_validator("quotas")
    @classmethod
    def _quotas_in_range(cls, value: Dict[int, int]) -> Dict[int, int]:
        for tier, quota in value.items():
            if not 0 <= tier <= 5 or quota < 0:
                raise ValueError(f"bad quota {tier}: {quota}")
        return value


class CliConfig(_Section):
    backend: BackendConfig = Field(default_factory=BackendConfig)
    corpus: Optional[str] = None
    problems: Optional[str] = None
    output: str = "runs"
    ideation: IdeationSettings = Field(default_factory=IdeationSettings)
    panel: PanelSettings = Field(default_factory=PanelSettings)
    forge: ForgeSettings = Field(default_factory=ForgeSettings)
    funnel: FunnelSettings = Field(default_factory=FunnelSettings)

    def snapshot(self) -> Dict[str, Any]:
        """JSON-safe copy recorded with each run."""
        return self.model_dump(mode="json")


def _apply_overrides(raw: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    data = dict(raw)
    backend = dict(data.get("backend") or {})
    kind = overrides.get("backend")
    if kind:
        backend["kind"] = kind
        parsed = BackendKind.parse(kind)
        # Fields tied to another kind would make the override invalid
        if parsed is not BackendKind.HTTP:
            backend.pop("base_url", None)
        if parsed is not BackendKind.MOCK:
            backend.pop("seed", None)
    if overrides.get("seed") is not None:
        backend["seed"] = overrides["seed"]
    if overrides.get("replay"):
        backend["replay_path"] = overrides["replay"]
    data["backend"] = backend
    if overrides.get("out"):
        data["output"] = overrides["out"]
    return data


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> CliConfig:
    """
    Load and validate configuration.

    Args:
        path: JSON config file (None for all defaults)
        overrides: Flag values (backend, seed, out, replay); None values ignored

    Returns:
        Validated CliConfig

    Raises:
        ConfigurationError: unreadable file, invalid JSON, unknown keys or
            invalid values
    """
    raw: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigurationError(f"config file not found: {config_path}")
        try:
            raw = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{config_path}: invalid JSON ({e})")
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{config_path}: top level must be an object")

    data = _apply_overrides(raw, overrides or {})
    try:
        config = CliConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration: {e}")
    logger.debug("configuration loaded (backend=%s)", config.backend.kind.value)
    return config


def check_paths(config: CliConfig, need_corpus: bool = False) -> None:
    """
    Verify every referenced path exists.

    Raises:
        ConfigurationError: naming the first missing path
    """
    checks = [
        ("persona library", config.panel.persona_library),
        ("mock script", config.backend.mock_script),
        ("replay transcript", config.backend.replay_path),
        ("problems file", config.problems),
        ("corpus", config.corpus),
    ]
    for label, value in checks:
        if value and not Path(value).exists():
            raise ConfigurationError(f"{label} not found: {value}")
    if need_corpus and not config.corpus and not config.problems:
        raise ConfigurationError("no corpus configured (set 'corpus' or pass --corpus)")
