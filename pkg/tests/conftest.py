import re

# criterion number -> verdict line, filled by test_acceptance
ACCEPTANCE: dict[int, str] = {}
N_CRITERIA = 9


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    ran = set()
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if m:
                ran.add(int(m.group(1)))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            terminalreporter.write_line(ACCEPTANCE[n])
        elif n in ran:
            terminalreporter.write_line(f"criterion {n}: FAIL  (errored before a verdict)")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
