import os

from hypothesis import HealthCheck, settings

settings.register_profile("fv", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fv"))

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_LINES, key=lambda c: int(c[1:])):
        ok, detail = ACCEPTANCE_LINES[cid]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {cid}: {detail}")
