"""
errors.py - Error Taxonomy

Every failure the pipelines can report has a stable string code so that
run records, failure records and exit diagnostics all name it the same way.

RECORDED vs RAISED:
Per-item failures (one generation slot, one expansion mode, one review,
one tier decision) are caught by the owning pipeline and stored as
failure records carrying `code` and the message. Everything else
propagates to main.py, which maps it to an exit status.
"""

import re
from typing import Dict, List, Optional, Type


class GauntletError(Exception):
    """Base class for all engine errors."""

    code = "gauntlet-error"

    def to_record(self) -> Dict[str, str]:
        """Serializable form used in failure records."""
        return {"code": self.code, "message": str(self)}

    @classmethod
    def restore(cls, message: str) -> "GauntletError":
        """Rebuild from the message of a failure record."""
        return cls(message)


# --- backend -------------------------------------------------------------

class BackendUnavailable(GauntletError):
    code = "backend-unavailable"


class ProviderError(GauntletError):
    """Provider returned an error payload. Never retried."""

    code = "provider-error"

    def __init__(self, provider_message: str, status: Optional[int] = None):
        self.provider_message = provider_message
        self.status = status
        super().__init__(f"provider error (status {status}): {provider_message}")

    @classmethod
    def restore(cls, message: str) -> "ProviderError":
        match = re.fullmatch(r"provider error \(status (\d+|None)\): (.*)", message, re.DOTALL)
        if not match:
            return cls(message)
        status = match.group(1)
        return cls(match.group(2), None if status == "None" else int(status))


class ReplayMiss(GauntletError):
    code = "replay-miss"

    def __init__(self, digest: str, role_name: str = ""):
        self.digest = digest
        super().__init__(f"no recorded response for digest {digest} (role {role_name or '?'})")

    @classmethod
    def restore(cls, message: str) -> "ReplayMiss":
        match = re.fullmatch(r"no recorded response for digest (\S+) \(role (.*)\)", message)
        if not match:
            return cls(message)
        role = match.group(2)
        return cls(match.group(1), "" if role == "?" else role)


class DigestCollision(GauntletError):
    code = "digest-collision"


# --- pipelines -----------------------------------------------------------

class ExtractionFailed(GauntletError):
    code = "extraction-failed"


class QCFailed(GauntletError):
    code = "qc-failed"


class GenerationFailed(GauntletError):
    code = "generation-failed"


class ValidationFailed(GauntletError):
    code = "validation-failed"


class ExpansionFailed(GauntletError):
    code = "expansion-failed"


class TopicDetectionFailed(GauntletError):
    code = "topic-detection-failed"


class ReviewFailed(GauntletError):
    code = "review-failed"


class SynthesisFailed(GauntletError):
    code = "synthesis-failed"


class Phase1Failed(GauntletError):
    code = "phase1-failed"


class Phase2Failed(GauntletError):
    code = "phase2-failed"


class Phase3Failed(GauntletError):
    code = "phase3-failed"


class ForgeFailed(GauntletError):
    """All ensemble runs failed."""

    code = "forge-failed"

    def __init__(self, causes: List[str]):
        self.causes = list(causes)
        joined = "; ".join(f"run {i}: {c}" for i, c in enumerate(self.causes, 1))
        super().__init__(f"all forge runs failed ({joined})")

    @classmethod
    def restore(cls, message: str) -> "ForgeFailed":
        error = cls([])
        error.args = (message,)
        return error


class SandboxUnavailable(GauntletError):
    code = "sandbox-unavailable"


# --- plumbing ------------------------------------------------------------

class ConfigurationError(GauntletError):
    code = "configuration-error"


class PreconditionError(GauntletError):
    code = "precondition-violation"


class CorpusError(GauntletError):
    code = "corpus-error"


class PersistFailed(GauntletError):
    code = "persist-failed"


class DuplicateRun(GauntletError):
    code = "duplicate-run"


class ReportFormatError(GauntletError):
    code = "unknown-report-format"


def _classes_by_code() -> Dict[str, Type[GauntletError]]:
    found: Dict[str, Type[GauntletError]] = {}
    pending: List[Type[GauntletError]] = [GauntletError]
    while pending:
        cls = pending.pop()
        found[cls.code] = cls
        pending.extend(cls.__subclasses__())
    return found


def error_from_record(record: Dict[str, str]) -> GauntletError:
    """The error class a failure record's code names, carrying its message."""
    cls = _classes_by_code().get(record.get("code", ""), GauntletError)
    return cls.restore(record.get("message", ""))
