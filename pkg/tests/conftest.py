import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One verdict line per headline check, printed after the test table."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod else None
    if not results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, ok, detail in results:
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line("ACCEPTANCE: %s %s (%s)" % (verdict, name, detail))
