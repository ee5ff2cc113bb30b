import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def _order(key):
    head = key.split()[0]
    return (int(head) if head.isdigit() else 99, key)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines, key=_order):
            terminalreporter.write_line(lines[key])
