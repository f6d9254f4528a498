import sys
from pathlib import Path

# lets test modules share helpers (e.g. tree_digest) by plain import
sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.pass_fail_lines():
        terminalreporter.write_line(line)
