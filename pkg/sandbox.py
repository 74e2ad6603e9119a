"""
sandbox.py - Confined Execution of Generated Model Programs

Generated programs run in a child process started from a configurable
command template. Defaults: the current interpreter, 120 s wall clock,
1 GiB address space, no network.

CONFINEMENT:
- preexec: new session (so a timeout kills the whole group) + RLIMIT_AS/CPU
- runner: installs an audit hook before the program starts that rejects
  writes, renames and deletes outside the run directory, socket use and
  process spawning
- environment: PATH only, HOME pointing at the run directory

A timeout is reported as returncode 124 with timed_out set, never raised.

COMMAND TEMPLATE placeholders: {python} {runner} {program} {workdir}
"""

import logging
import os
import re
import shutil
import signal
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from config import SandboxSettings
from errors import SandboxUnavailable

logger = logging.getLogger("gauntlet.sandbox")

TIMEOUT_RETURNCODE = 124
PROGRAM_NAME = "model.py"
RUNNER_NAME = "_sandbox_runner.py"

RUNNER_SOURCE = r'''
import os
import runpy
import sys

ROOT = os.path.realpath(sys.argv[2] if len(sys.argv) > 2 else os.path.dirname(sys.argv[1]))
WRITE_FLAGS = os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_APPEND | os.O_TRUNC
BLOCKED = {
    "socket.connect", "socket.bind", "socket.sendto", "socket.getaddrinfo",
    "subprocess.Popen", "os.system", "os.exec", "os.posix_spawn", "os.spawn",
    "os.fork", "os.forkpty", "pty.spawn",
}
PATH_EVENTS = {"os.remove", "os.rmdir", "os.mkdir", "os.truncate", "os.chmod", "os.symlink", "os.link"}


def _inside(path):
    if isinstance(path, int):
        return True
    resolved = os.path.realpath(os.fsdecode(path))
    return resolved == ROOT or resolved.startswith(ROOT + os.sep)


def _audit(event, args):
    if event in BLOCKED:
        raise PermissionError(f"sandbox: {event} is not allowed")
    if event == "open":
        path, mode, flags = args
        writing = (isinstance(mode, str) and any(c in mode for c in "wax+")) or (
            isinstance(flags, int) and flags & WRITE_FLAGS
        )
        if writing and not _inside(path):
            raise PermissionError(f"sandbox: write outside run directory: {path}")
    elif event == "os.rename":
        if not (_inside(args[0]) and _inside(args[1])):
            raise PermissionError("sandbox: rename outside run directory")
    elif event in PATH_EVENTS:
        if not _inside(args[0]):
            raise PermissionError(f"sandbox: {event} outside run directory")


sys.dont_write_bytecode = True
program = sys.argv[1]
sys.argv = [program]
sys.addaudithook(_audit)
runpy.run_path(program, run_name="__main__")
'''

# Advisory scan: patterns suggesting file, network or process access
_ACCESS_PATTERNS = [
    (r"\bopen\s*\(", "file access via open()"),
    (r"\.(write_text|write_bytes|read_text|read_bytes)\s*\(", "file access via pathlib"),
    (r"\bimport\s+socket\b|\bfrom\s+socket\b", "network access via socket"),
    (r"\b(requests|urllib|http\.client|httpx|aiohttp)\b", "network access via HTTP client"),
    (r"\bsubprocess\b|\bos\.system\s*\(|\bos\.popen\s*\(", "process spawning"),
    (r"\b(np\.load|pd\.read_\w+|json\.load)\s*\(", "external data load"),
]


def scan_program(program_text: str) -> List[str]:
    """Advisory findings for file/network/process access. Never blocks execution."""
    findings = []
    for pattern, label in _ACCESS_PATTERNS:
        for match in re.finditer(pattern, program_text):
            line = program_text.count("\n", 0, match.start()) + 1
            findings.append(f"line {line}: {label}")
    return findings


@dataclass(frozen=True)
class ExecutionResult:
    returncode: int
    stdout: str
    stderr: str
    timed_out: bool = False
    duration: float = 0.0
    findings: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.returncode == 0 and not self.timed_out

    def summary(self) -> str:
        if self.timed_out:
            return "timed out"
        return f"exit status {self.returncode}"

    def log(self) -> str:
        """Contents of execution.log (duration omitted so reruns compare equal)."""
        parts = [f"status: {self.summary()}", "--- stdout ---", self.stdout.rstrip(), "--- stderr ---", self.stderr.rstrip()]
        if self.findings:
            parts += ["--- advisory scan ---"] + self.findings
        return "\n".join(parts) + "\n"

    def to_dict(self):
        return {
            "returncode": self.returncode,
            "stdout": self.stdout,
            "timed_out": self.timed_out,
            "findings": list(self.findings),
        }


def _limits(memory_bytes: int, cpu_seconds: int):
    def preexec():
        import resource

        os.setsid()
        resource.setrlimit(resource.RLIMIT_AS, (memory_bytes, memory_bytes))
        resource.setrlimit(resource.RLIMIT_CPU, (cpu_seconds, cpu_seconds))
    return preexec


class Sandbox:
    """Runs program text in a confined child process."""

    def __init__(self, settings: Optional[SandboxSettings] = None):
        self.settings = settings or SandboxSettings()

    def _command(self, runner: Path, program: Path, workdir: Path) -> List[str]:
        values = {"python": sys.executable, "runner": str(runner), "program": str(program), "workdir": str(workdir)}
        return [part.format(**values) for part in self.settings.command]

    def preflight(self) -> None:
        """
        Check that the command's executable exists.

        Raises:
            SandboxUnavailable: executable missing or not executable
        """
        if not self.settings.command:
            raise SandboxUnavailable("sandbox command template is empty")
        executable = self.settings.command[0].format(python=sys.executable, runner="", program="", workdir="")
        if os.sep in executable:
            found = os.path.isfile(executable) and os.access(executable, os.X_OK)
        else:
            found = shutil.which(executable) is not None
        if not found:
            raise SandboxUnavailable(f"sandbox executable not found: {executable}")

    def run(self, program_text: str, workdir: Path) -> ExecutionResult:
        """
        Execute program_text with workdir as its only writable location.

        Args:
            program_text: Source of the model program
            workdir: Run directory (created if missing)

        Returns:
            ExecutionResult (timeouts and crashes are results, not errors)
        """
        workdir = Path(workdir).resolve()
        workdir.mkdir(parents=True, exist_ok=True)
        program = workdir / PROGRAM_NAME
        runner = workdir / RUNNER_NAME
        program.write_text(program_text, encoding="utf-8")
        runner.write_text(RUNNER_SOURCE, encoding="utf-8")

        command = self._command(runner, program, workdir)
        env = {
            "PATH": os.environ.get("PATH", ""),
            "HOME": str(workdir),
            "PYTHONDONTWRITEBYTECODE": "1",
            "PYTHONIOENCODING": "utf-8",
        }
        cpu_seconds = int(self.settings.wall_clock_s) + 1
        preexec = _limits(self.settings.memory_bytes, cpu_seconds) if os.name == "posix" else None
        findings = scan_program(program_text)

        logger.debug("running %s", " ".join(command))
        started = time.monotonic()
        try:
            proc = subprocess.Popen(
                command,
                cwd=workdir,
                env=env,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                preexec_fn=preexec,
            )
        except OSError as e:
            raise SandboxUnavailable(f"cannot start sandbox command {command[0]}: {e}")

        try:
            stdout, stderr = proc.communicate(timeout=self.settings.wall_clock_s)
            timed_out = False
            returncode = proc.returncode
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError, AttributeError):
                proc.kill()
            stdout, stderr = proc.communicate()
            stderr = (stderr or "") + f"\nTIMEOUT after {self.settings.wall_clock_s:g} s"
            timed_out = True
            returncode = TIMEOUT_RETURNCODE
            logger.info("sandboxed program exceeded %g s", self.settings.wall_clock_s)

        return ExecutionResult(
            returncode=returncode,
            stdout=stdout or "",
            stderr=stderr or "",
            timed_out=timed_out,
            duration=time.monotonic() - started,
            findings=findings,
        )
