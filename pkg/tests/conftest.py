CRITERIA = {}


def record(number, title, ok, detail=""):
    """Store one acceptance line; printed in the terminal summary."""
    line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {title}"
    CRITERIA[number] = line + (f" ({detail})" if detail else "")
    print(CRITERIA[number], flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[key])
