import contextlib
import hashlib
import io
import json
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def run_cli(*argv):
    """Run the command-line entry point in-process; returns (exit code, stdout, stderr)."""
    from ovpano.cli import main

    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def tree_digest(root: Path, skip=()):
    """sha256 of every file below ``root``, keyed by relative path."""
    out = {}
    for p in sorted(Path(root).rglob("*")):
        rel = str(p.relative_to(root))
        if p.is_file() and not any(rel.startswith(s) for s in skip):
            out[rel] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="session")
def demo_run(tmp_path_factory):
    """One full demo run shared by the CLI and acceptance tests."""
    workdir = tmp_path_factory.mktemp("demo") / "run"
    start = time.perf_counter()
    code, out, err = run_cli("demo", "--workdir", workdir)
    elapsed = time.perf_counter() - start
    assert code == 0, err
    return {"workdir": workdir, "scores": json.loads(out), "elapsed": elapsed}


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
