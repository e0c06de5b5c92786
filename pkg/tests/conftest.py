import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in mod.TITLES.items():
        ok, _, detail = mod.VERDICTS.get(n, (False, title, "did not reach a verdict"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}: {detail}")
