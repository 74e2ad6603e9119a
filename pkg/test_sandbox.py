"""Tests for confined execution of generated model programs."""

import json
import os

import pytest

from config import SandboxSettings
from errors import SandboxUnavailable
from mock_playbook import MOCK_PROGRAM
from sandbox import TIMEOUT_RETURNCODE, Sandbox, scan_program

posix_only = pytest.mark.skipif(os.name != "posix", reason="sandbox limits need a POSIX host")


@posix_only
def test_runs_program(tmp_path):
    result = Sandbox().run(MOCK_PROGRAM, tmp_path / "run")

    assert result.ok
    assert json.loads(result.stdout) == {"T_total": 4.0, "speedup": 1.5}
    assert result.log().startswith("status: exit status 0")
    assert "stderr" not in result.to_dict()


@posix_only
def test_timeout_reported_not_raised(tmp_path):
    sandbox = Sandbox(SandboxSettings(wall_clock_s=1))
    result = sandbox.run("import time\ntime.sleep(30)\n", tmp_path / "run")

    assert result.timed_out
    assert result.returncode == TIMEOUT_RETURNCODE
    assert not result.ok
    assert result.summary() == "timed out"


@posix_only
def test_writes_confined_to_run_directory(tmp_path):
    canary = tmp_path / "canary.txt"
    program = f"open({str(canary)!r}, 'w').write('escaped')\n"
    result = Sandbox().run(program, tmp_path / "run")

    assert result.returncode != 0
    assert not canary.exists()
    assert "write outside run directory" in result.stderr

    inside = Sandbox().run("open('result.txt', 'w').write('ok')\n", tmp_path / "run")
    assert inside.ok
    assert (tmp_path / "run" / "result.txt").read_text() == "ok"


@posix_only
def test_network_blocked(tmp_path):
    program = "import socket\ns = socket.socket()\ns.connect(('127.0.0.1', 9))\n"
    result = Sandbox().run(program, tmp_path / "run")

    assert result.returncode != 0
    assert "socket.connect is not allowed" in result.stderr


@posix_only
def test_process_spawning_blocked(tmp_path):
    result = Sandbox().run("import os\nos.system('true')\n", tmp_path / "run")
    assert result.returncode != 0
    assert "os.system is not allowed" in result.stderr


def test_preflight_missing_executable():
    sandbox = Sandbox(SandboxSettings(command=["/nonexistent/bin/python3", "{runner}", "{program}"]))
    with pytest.raises(SandboxUnavailable):
        sandbox.preflight()
    with pytest.raises(SandboxUnavailable):
        Sandbox(SandboxSettings(command=[])).preflight()
    Sandbox().preflight()


def test_scan_program_is_advisory():
    findings = scan_program("import socket\ndata = open('x').read()\nimport subprocess\n")
    assert findings == [
        "line 2: file access via open()",
        "line 1: network access via socket",
        "line 3: process spawning",
    ]
    assert scan_program(MOCK_PROGRAM) == []
