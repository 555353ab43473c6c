import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# The acceptance tests append their PASS/FAIL lines here (via report() in
# test_acceptance.py); the terminal-summary hook replays them after the run,
# outside pytest's output capture, so they are always visible.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
