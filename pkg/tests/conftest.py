import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# filled by test_acceptance.py: (number, title, passed, detail)
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {title}: {detail}")
