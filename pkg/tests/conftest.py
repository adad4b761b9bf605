import time
from contextlib import contextmanager

import pytest

from npp_fedsim.config import default_config
from npp_fedsim.orchestrator import emit_report, run_simulation

_acceptance_lines = {}


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The full default experiment, run once and shared. Returns (report, outdir, seconds)."""
    t0 = time.perf_counter()
    report = run_simulation(default_config())
    elapsed = time.perf_counter() - t0
    out = tmp_path_factory.mktemp("default_run")
    emit_report(report, out)
    return report, out, elapsed


@pytest.fixture(scope="session")
def eve_run():
    cfg = default_config()
    cfg.qkd.eve_fraction = 1.0
    return run_simulation(cfg)


@pytest.fixture
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion.

    The body fills ``notes`` with measured values; any exception marks the criterion failed.
    """

    @contextmanager
    def run(number, title):
        notes = []
        try:
            yield notes
        except BaseException as exc:
            notes.append(f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            _record(number, False, title, notes)
            raise
        _record(number, True, title, notes)

    return run


def _record(number, ok, title, notes):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {title}"
    if notes:
        line += "  [" + "; ".join(notes) + "]"
    _acceptance_lines[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance_lines):
        terminalreporter.write_line(_acceptance_lines[n])
