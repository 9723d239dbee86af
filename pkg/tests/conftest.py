import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# acceptance verdicts, filled by test_acceptance.criterion()
VERDICTS: list[tuple[int, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(VERDICTS):
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")
